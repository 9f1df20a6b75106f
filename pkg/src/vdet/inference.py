"""Batched prediction and dataset evaluation."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import Dataset, Sample, normalize
from .metrics import EvalReport, GroundTruth, map_at, nms, sort_detections
from .model import DetectionBox, Model, decode_predictions
from .tensor import Tensor


def stack_images(samples: Sequence[Sample], mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)) -> Tensor:
    return Tensor(np.stack([normalize(s.image, mean, std) for s in samples]).astype(np.float32))


def predict(model: Model, images: Tensor, conf_threshold: float = 0.25, nms_iou: float = 0.45,
            max_det: int = 300, pre_nms: int = 1000) -> list[list[DetectionBox]]:
    """Inference-mode forward, decode, per-class NMS."""
    was = model.training
    model.eval()
    try:
        raw = model(images)
    finally:
        model.train(was)
    size = (images.shape[2], images.shape[3])
    out = []
    for dets in decode_predictions(raw, conf_threshold, model.config.strides, size):
        dets = sort_detections(dets)[:pre_nms]
        out.append(nms(dets, nms_iou)[:max_det])
    return out


def ground_truth(sample: Sample) -> list[GroundTruth]:
    gts = []
    for a in sample.annotations:
        if a.ignore:
            gts.append(GroundTruth(-1, a.bbox, ignore=True))
        elif a.class_index >= 0:
            gts.append(GroundTruth(a.class_index, a.bbox))
    return gts


def detect_dataset(model: Model, dataset: Dataset, conf_threshold=0.25, nms_iou=0.45, batch_size=16,
                   mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)):
    """Returns (detections per image, ground truths per image, samples' ids)."""
    dets, gts, ids = [], [], []
    for start in range(0, len(dataset), batch_size):
        batch = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        dets.extend(predict(model, stack_images(batch, mean, std), conf_threshold, nms_iou))
        gts.extend(ground_truth(s) for s in batch)
        ids.extend(s.source_id or str(start + k) for k, s in enumerate(batch))
    return dets, gts, ids


def evaluate(model: Model, dataset: Dataset, conf_threshold: float = 0.25, nms_iou: float = 0.45,
             batch_size: int = 16, ap_conf: float = 0.001, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)) -> EvalReport:
    """AP uses every detection above ``ap_conf``; P/R/F1 and confusion use ``conf_threshold``."""
    dets, gts, _ = detect_dataset(model, dataset, min(ap_conf, conf_threshold), nms_iou, batch_size, mean, std)
    return map_at(dets, gts, model.config.class_names, 0.5, conf_threshold)


def format_detections(dets: Sequence[DetectionBox], class_names: Sequence[str] | None = None) -> str:
    """One ``class conf left top right bottom`` line per box."""
    lines = []
    for d in dets:
        name = class_names[d.class_index] if class_names else str(d.class_index)
        l, t, r, b = d.bbox
        lines.append(f"{name} {d.confidence:.6f} {l:.2f} {t:.2f} {r:.2f} {b:.2f}")
    return "".join(line + "\n" for line in lines)
