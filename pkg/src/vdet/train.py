"""Target assignment, composite detection loss, Adam, cosine schedule and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .blocks import BatchNorm2d
from .data import Annotation, AugmentConfig, Dataset, augment
from .errors import NonFiniteLossError, ParameterError, ShapeError
from .functional import bce_with_logits
from .inference import evaluate, stack_images
from .model import Model, save_checkpoint
from .tensor import Tape, Tensor, concat, exp, maximum, minimum, sigmoid, tsum

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr0: float = 0.001
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    eta_min: float | None = None  # defaults to lr0 / 100
    patience: int = 10
    epochs: int = 150
    lambda_box: float = 5.0
    lambda_obj: float = 1.0
    lambda_cls: float = 0.5
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    conf_threshold: float = 0.25
    nms_iou: float = 0.45
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)
    scale_bands: tuple[float, float] = (64.0, 160.0)
    freeze_bn: bool = False  # batch norm uses and keeps its running statistics

    def __post_init__(self):
        if self.eta_min is None:
            self.eta_min = self.lr0 / 100
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ParameterError("batch_size, epochs and patience must be positive")
        if self.lr0 < 0 or self.eta_min < 0:
            raise ParameterError("learning rates must be non-negative")
        if self.patience > self.epochs:
            raise ParameterError(f"patience {self.patience} exceeds epochs {self.epochs}")


# ------------------------------------------------------------------ targets


@dataclass
class ScaleTargets:
    stride: int
    objectness: np.ndarray  # [B, A, H, W] of 0/1
    boxes: np.ndarray  # [B, A, H, W, 4] xyxy pixels, valid where objectness == 1
    classes: np.ndarray  # [B, A, H, W, C] one-hot

    def positives(self):
        return np.nonzero(self.objectness > 0)


@dataclass
class TargetMap:
    scales: list[ScaleTargets]
    dropped: int = 0

    @property
    def num_positive(self) -> int:
        return int(sum(s.objectness.sum() for s in self.scales))


def scale_index(bbox, bands=(64.0, 160.0)) -> int:
    side = math.sqrt(max((bbox[2] - bbox[0]) * (bbox[3] - bbox[1]), 0.0))
    if side < bands[0]:
        return 0
    return 1 if side < bands[1] else 2


def assign_targets(annotations: Sequence[Sequence[Annotation]], grids: Sequence[tuple[int, int]],
                   strides: Sequence[int], num_classes: int, anchors: int = 1,
                   bands=(64.0, 160.0)) -> TargetMap:
    """Centre-cell, size-banded assignment.

    A box goes to stride 8 / 16 / 32 by sqrt(area) against ``bands`` and to
    the cell holding its centre (every anchor slot of that cell). When two
    boxes claim one cell the larger keeps it and the other is counted in
    ``dropped``.
    """
    b = len(annotations)
    scales = [ScaleTargets(s, np.zeros((b, anchors, h, w), np.float32), np.zeros((b, anchors, h, w, 4), np.float64),
                           np.zeros((b, anchors, h, w, num_classes), np.float32)) for (h, w), s in zip(grids, strides)]
    dropped = 0
    for bi, anns in enumerate(annotations):
        usable = [a for a in anns if a.trainable and a.class_index < num_classes]
        usable.sort(key=lambda a: -a.area)
        for a in usable:
            st = scales[scale_index(a.bbox, bands)]
            h, w = st.objectness.shape[2:]
            cx = (a.bbox[0] + a.bbox[2]) / 2
            cy = (a.bbox[1] + a.bbox[3]) / 2
            gx = min(max(int(math.floor(cx / st.stride)), 0), w - 1)
            gy = min(max(int(math.floor(cy / st.stride)), 0), h - 1)
            if st.objectness[bi, 0, gy, gx]:
                dropped += 1
                continue
            st.objectness[bi, :, gy, gx] = 1
            st.boxes[bi, :, gy, gx] = a.bbox
            st.classes[bi, :, gy, gx, a.class_index] = 1
    return TargetMap(scales, dropped)


# ------------------------------------------------------------------ loss


def box_iou_tensor(pred: Sequence[Tensor], target: np.ndarray) -> Tensor:
    """IoU between predicted (x1, y1, x2, y2) tensors and fixed [P,4] targets."""
    px1, py1, px2, py2 = pred
    tx1, ty1, tx2, ty2 = (target[:, i] for i in range(4))
    iw = maximum(minimum(px2, tx2) - maximum(px1, tx1), 0.0)
    ih = maximum(minimum(py2, ty2) - maximum(py1, ty1), 0.0)
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + ((tx2 - tx1) * (ty2 - ty1)) - inter
    return inter / union


def detection_loss(raw: Sequence[Tensor], targets: TargetMap, config: TrainConfig | None = None):
    """lambda_obj * BCE(obj, all cells) + lambda_cls * BCE(cls, positives) + lambda_box * (1 - IoU, positives).

    Objectness is averaged over every cell of every scale. The class term sums
    BCE over the class vector and averages over positive cells; the box term
    averages over positive cells.
    """
    config = config or TrainConfig()
    obj_sum, n_cells = None, 0
    pos_rows, pos_targets, pos_cls, pos_cells = [], [], [], []
    for r, st in zip(raw, targets.scales):
        if r.shape[:4] != st.objectness.shape:
            raise ShapeError(f"prediction grid {r.shape[:4]} does not match targets {st.objectness.shape}")
        term = tsum(bce_with_logits(r[..., 4], st.objectness))
        obj_sum = term if obj_sum is None else obj_sum + term
        n_cells += st.objectness.size
        idx = st.positives()
        if len(idx[0]):
            pos_rows.append(r[idx])
            pos_targets.append(st.boxes[idx])
            pos_cls.append(st.classes[idx])
            s = float(st.stride)
            pos_cells.append(np.stack([idx[3] * s, idx[2] * s, np.full(len(idx[0]), s)], axis=1))
    l_obj = obj_sum * (1.0 / n_cells)
    zero = Tensor(np.zeros((), dtype=raw[0].dtype))
    if pos_rows:
        rows = concat(pos_rows, axis=0) if len(pos_rows) > 1 else pos_rows[0]
        tboxes = np.concatenate(pos_targets)
        tcls = np.concatenate(pos_cls)
        cells = np.concatenate(pos_cells).astype(rows.dtype)
        n_pos = rows.shape[0]
        ox, oy, s = cells[:, 0], cells[:, 1], cells[:, 2]
        cx = sigmoid(rows[:, 0]) * s + ox
        cy = sigmoid(rows[:, 1]) * s + oy
        half_w = exp(minimum(rows[:, 2], 4.0)) * (s / 2)
        half_h = exp(minimum(rows[:, 3], 4.0)) * (s / 2)
        ious = box_iou_tensor((cx - half_w, cy - half_h, cx + half_w, cy + half_h), tboxes.astype(rows.dtype))
        l_box = tsum(1.0 - ious) * (1.0 / n_pos)
        l_cls = tsum(bce_with_logits(rows[:, 5:], tcls)) * (1.0 / n_pos)
    else:
        l_box = l_cls = zero
    total = l_obj * config.lambda_obj + l_cls * config.lambda_cls + l_box * config.lambda_box
    return total, {"obj": float(l_obj.data), "cls": float(l_cls.data), "box": float(l_box.data)}


# ------------------------------------------------------------------ optimiser


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update; increments ``state.step`` once."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimiser state differ in length")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if lr:
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


def cosine_lr(epoch: float, total_epochs: int, lr0: float, eta_min: float) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {total_epochs}]")
    return eta_min + 0.5 * (lr0 - eta_min) * (1 + math.cos(math.pi * epoch / total_epochs))


# ------------------------------------------------------------------ history


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    precision: float
    recall: float
    map50: float
    seconds: float
    lr: float = 0.0


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False

    def __len__(self):
        return len(self.records)

    @property
    def maps(self) -> list[float]:
        return [r.map50 for r in self.records]

    def to_tsv(self, with_time: bool = True) -> str:
        head = "epoch\tloss\tprecision\trecall\tmap50" + ("\tseconds" if with_time else "")
        rows = [head]
        for r in self.records:
            row = f"{r.epoch}\t{r.loss!r}\t{r.precision!r}\t{r.recall!r}\t{r.map50!r}"
            rows.append(row + (f"\t{r.seconds:.3f}" if with_time else ""))
        return "\n".join(rows) + "\n"


def early_stop_check(maps: Sequence[float] | History, patience: int = 10, min_delta: float = 1e-6) -> bool:
    """True once mAP has gone ``patience`` consecutive epochs without beating the best by > min_delta."""
    if isinstance(maps, History):
        maps = maps.maps
    if not maps:
        raise ParameterError("history is empty")
    best, since = -math.inf, 0
    for v in maps:
        if v > best + min_delta:
            best, since = v, 0
        else:
            since += 1
    return since >= patience


# ------------------------------------------------------------------ training loop


def _grids(model: Model, size: int) -> list[tuple[int, int]]:
    return [(size // s, size // s) for s in model.config.strides]


def train_step(model: Model, samples, config: TrainConfig, state: AdamState, lr: float, params=None):
    params = params if params is not None else model.parameters()
    images = stack_images(samples, config.mean, config.std)
    size = images.shape[2]
    targets = assign_targets([s.annotations for s in samples], _grids(model, size), model.config.strides,
                             model.config.num_classes, model.config.anchors_per_cell, config.scale_bands)
    model.train()
    if config.freeze_bn:
        for _, mod in model.named_modules():
            if isinstance(mod, BatchNorm2d):
                mod.eval()
    with Tape() as tape:
        raw = model(images)
        loss, parts = detection_loss(raw, targets, config)
    value = float(loss.data)
    if not math.isfinite(value):
        return value, parts
    grads = tape.backward(loss, sources=params)
    adam_step(params, [grads[id(p)] for p in params], state, lr, config.betas, config.adam_eps)
    return value, parts


def train(model: Model, train_set: Dataset, val_set: Dataset, config: TrainConfig, seed: int = 0,
          out_dir=None, progress=None) -> tuple[Model, History]:
    """Run the epoch loop; the returned model carries the best-mAP weights.

    Each sample's augmentation RNG derives from (seed, epoch, index), so runs
    are reproducible independent of batching.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ParameterError("training and validation sets must be non-empty")
    params = model.parameters()
    state = AdamState.for_params(params)
    history = History()
    best_map, best_state = -math.inf, model.copy_state()
    out = Path(out_dir) if out_dir is not None else None
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, config.epochs, config.lr0, config.eta_min)
        order = train_set.order(seed, epoch)
        losses = []
        for bstart in range(0, len(order), config.batch_size):
            idx = order[bstart : bstart + config.batch_size]
            samples = [augment(train_set[int(i)], config.augment, np.random.default_rng([seed, epoch, int(i)]),
                               train_set.__getitem__, len(train_set)) for i in idx]
            value, parts = train_step(model, samples, config, state, lr, params)
            if not math.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss {value} at epoch {epoch + 1}, batch "
                                         f"{bstart // config.batch_size} (components {parts})")
            losses.append(value)
        report = evaluate(model, val_set, config.conf_threshold, config.nms_iou, mean=config.mean, std=config.std)
        rec = EpochRecord(epoch + 1, float(np.mean(losses)), report.precision, report.recall, report.map50,
                          time.perf_counter() - t0, lr)
        history.records.append(rec)
        log.info("epoch %d loss %.4f P %.3f R %.3f mAP50 %.3f (%.1fs)", rec.epoch, rec.loss, rec.precision,
                 rec.recall, rec.map50, rec.seconds)
        if progress is not None:
            progress(rec)
        if rec.map50 > best_map + 1e-6:
            best_map, best_state = rec.map50, model.copy_state()
            if out is not None:
                save_checkpoint(model, out / "best.ckpt")
        if out is not None:
            (out / "history.tsv").write_text(history.to_tsv())
        if early_stop_check(history, config.patience):
            history.stopped_early = epoch + 1 < config.epochs
            break
    model.load_state(best_state)
    return model, history
