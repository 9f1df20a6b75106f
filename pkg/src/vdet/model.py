"""Backbone / neck / head assembly, prediction decoding and checkpoint I/O."""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .blocks import (CBAM, CBS, C2f, C3Ghost, Conv2d, DeformCBS, Module, SPPF)
from .errors import BuildError, FormatError, IntegrityError, ParameterError, ShapeError
from .tensor import Tensor, _sigmoid, concat, reshape, transpose

DEFAULT_CLASSES = ("Car", "Van", "Truck", "Tram")
BASE_PLAN = (16, 32, 64, 128, 256)  # stem, then the four stride-2 stages


@dataclass
class ModelConfig:
    class_names: tuple[str, ...] = DEFAULT_CLASSES
    width: float = 1.0
    depth: float = 1.0
    use_ghost: bool = False
    use_cbam: bool = False
    use_dcn: bool = False
    anchors_per_cell: int = 1
    input_size: int = 640
    strides: tuple[int, ...] = (8, 16, 32)
    cbam_reduction: int = 16
    ghost_ratio: int = 2
    ghost_cheap_kernel: int = 3

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        self.strides = tuple(self.strides)
        if self.input_size % 32:
            raise ParameterError(f"input_size {self.input_size} is not divisible by 32")
        if not self.class_names:
            raise ParameterError("class list is empty")
        if self.anchors_per_cell < 1:
            raise ParameterError("anchors_per_cell must be >= 1")
        if self.strides != (8, 16, 32):
            raise ParameterError(f"strides must be (8, 16, 32), got {self.strides}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(max(4, int(round(c * self.width / 4)) * 4) for c in BASE_PLAN)

    @property
    def bottlenecks(self) -> int:
        return max(1, round(self.depth))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Head(Module):
    """Per-scale 3x3 stem (DCNv2 or CBS) feeding box+objectness and class 1x1 branches."""

    def __init__(self, ch, num_classes, anchors, use_dcn, rng):
        self.stem = DeformCBS(ch, ch, 3, 1, rng=rng) if use_dcn else CBS(ch, ch, 3, 1, rng=rng)
        self.box = Conv2d(ch, anchors * 5, 1, bias=True, rng=rng)
        self.cls = Conv2d(ch, anchors * num_classes, 1, bias=True, rng=rng)
        self.anchors = anchors
        self.num_classes = num_classes

    def forward(self, x):
        f = self.stem(x)
        b, _, h, w = f.shape
        a = self.anchors
        box = reshape(self.box(f), (b, a, 5, h, w))
        cls = reshape(self.cls(f), (b, a, self.num_classes, h, w))
        return transpose(concat([box, cls], axis=2), (0, 1, 3, 4, 2))


class Model(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c0, c1, c2, c3, c4 = config.channels
        n = config.bottlenecks
        self.stem = CBS(3, c0, 3, 2, rng=rng)
        self.down1 = CBS(c0, c1, 3, 2, rng=rng)
        self.stage1 = C2f(c1, c1, n, rng=rng)
        self.down2 = CBS(c1, c2, 3, 2, rng=rng)
        self.stage2 = C2f(c2, c2, n, rng=rng)
        self.down3 = CBS(c2, c3, 3, 2, rng=rng)
        self.stage3 = C2f(c3, c3, n, rng=rng)
        self.down4 = CBS(c3, c4, 3, 2, rng=rng)
        self.stage4 = C2f(c4, c4, n, rng=rng)
        self.sppf = SPPF(c4, c4, rng=rng)

        def neck_block(cin, cout):
            if config.use_ghost:
                return C3Ghost(cin, cout, n, rng=rng)
            return C2f(cin, cout, n, rng=rng)

        self.top4 = neck_block(c4 + c3, c3)
        self.top3 = neck_block(c3 + c2, c2)
        self.pan_down3 = CBS(c2, c2, 3, 2, rng=rng)
        self.bot4 = neck_block(c2 + c3, c3)
        self.pan_down4 = CBS(c3, c3, 3, 2, rng=rng)
        self.bot5 = neck_block(c3 + c4, c4)
        if config.use_cbam:
            r = config.cbam_reduction
            self.att_top4 = CBAM(c3, r, rng=rng)
            self.att_top3 = CBAM(c2, r, rng=rng)
            self.att_bot4 = CBAM(c3, r, rng=rng)
            self.att_bot5 = CBAM(c4, r, rng=rng)
        self.heads = [Head(ch, config.num_classes, config.anchors_per_cell, config.use_dcn, rng)
                      for ch in (c2, c3, c4)]
        self._check_plan()
        self.assign_paths()

    def _check_plan(self):
        c0, c1, c2, c3, c4 = self.config.channels
        expect = {"top4": (c4 + c3, c3), "top3": (c3 + c2, c2), "bot4": (c2 + c3, c3), "bot5": (c3 + c4, c4)}
        for name, (cin, cout) in expect.items():
            block = getattr(self, name)
            first = block.cv1
            got_in = first.conv.spec.in_channels if isinstance(first, CBS) else first.primary.conv.spec.in_channels
            last = block.cv2 if isinstance(block, C2f) else block.cv3
            if got_in != cin or last.out_channels != cout:
                raise BuildError(f"layer {name}: expected {cin}->{cout}, built {got_in}->{last.out_channels}")

    def _att(self, name, x):
        att = getattr(self, name, None)
        return att(x) if att is not None else x

    def forward(self, images: Tensor) -> list[Tensor]:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected images [B,3,H,W], got {images.shape}")
        h, w = images.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"spatial dims {h}x{w} must be divisible by 32")
        x = self.stage1(self.down1(self.stem(images)))
        p3 = self.stage2(self.down2(x))
        p4 = self.stage3(self.down3(p3))
        p5 = self.sppf(self.stage4(self.down4(p4)))

        t4 = self._att("att_top4", self.top4(concat([F.upsample_nearest(p5), p4], axis=1)))
        n3 = self._att("att_top3", self.top3(concat([F.upsample_nearest(t4), p3], axis=1)))
        n4 = self._att("att_bot4", self.bot4(concat([self.pan_down3(n3), t4], axis=1)))
        n5 = self._att("att_bot5", self.bot5(concat([self.pan_down4(n4), p5], axis=1)))
        return [head(f) for head, f in zip(self.heads, (n3, n4, n5))]

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, in registry order."""
        return [(k, v.data) for k, v in self.named_parameters()] + list(self.named_buffers())

    def copy_state(self) -> list[np.ndarray]:
        return [a.copy() for _, a in self.state()]

    def load_state(self, arrays) -> None:
        for (name, dst), src in zip(self.state(), arrays):
            if dst.shape != src.shape:
                raise ShapeError(f"{name}: shape {src.shape} != {dst.shape}")
            dst[...] = src


def build_model(config: ModelConfig, rng_seed: int = 0) -> Model:
    return Model(config, rng_seed)


# ------------------------------------------------------------------ decoding


@dataclass
class DetectionBox:
    class_index: int
    confidence: float
    bbox: tuple[float, float, float, float]
    image_id: str = ""

    @property
    def left(self):
        return self.bbox[0]


def decode_predictions(raw, conf_threshold: float = 0.25, strides=(8, 16, 32),
                       image_size: tuple[int, int] | None = None) -> list[list[DetectionBox]]:
    """Turn raw head outputs into per-image box lists.

    center = (cell + sigmoid(t_xy)) * stride, size = stride * exp(min(t_wh, 4)),
    confidence = sigmoid(obj) * max_c sigmoid(cls_c). Boxes are clipped to the
    image. Returns one list per batch element.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ParameterError(f"conf_threshold must be in [0,1], got {conf_threshold}")
    arrays = [r.data if isinstance(r, Tensor) else np.asarray(r) for r in raw]
    b = arrays[0].shape[0]
    if image_size is None:
        h0, w0 = arrays[0].shape[2:4]
        image_size = (h0 * strides[0], w0 * strides[0])
    ih, iw = image_size
    out: list[list[DetectionBox]] = [[] for _ in range(b)]
    for arr, s in zip(arrays, strides):
        arr = arr.astype(np.float64)
        _, a, h, w, _ = arr.shape
        gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cx = (gx + _sigmoid(arr[..., 0])) * s
        cy = (gy + _sigmoid(arr[..., 1])) * s
        bw = s * np.exp(np.minimum(arr[..., 2], 4.0))
        bh = s * np.exp(np.minimum(arr[..., 3], 4.0))
        cls_p = _sigmoid(arr[..., 5:])
        cls_i = cls_p.argmax(axis=-1)
        conf = _sigmoid(arr[..., 4]) * cls_p.max(axis=-1)
        x1 = np.clip(cx - bw / 2, 0, iw)
        y1 = np.clip(cy - bh / 2, 0, ih)
        x2 = np.clip(cx + bw / 2, 0, iw)
        y2 = np.clip(cy + bh / 2, 0, ih)
        keep = (conf >= conf_threshold) & (conf > 0) & (x2 > x1) & (y2 > y1)
        if conf_threshold >= 1.0:
            keep[...] = False
        for bi, ai, yi, xi in zip(*np.nonzero(keep)):
            out[bi].append(DetectionBox(int(cls_i[bi, ai, yi, xi]), float(conf[bi, ai, yi, xi]),
                                        (float(x1[bi, ai, yi, xi]), float(y1[bi, ai, yi, xi]),
                                         float(x2[bi, ai, yi, xi]), float(y2[bi, ai, yi, xi]))))
    return out


# ------------------------------------------------------------------ checkpoints

MAGIC = b"VDET"
VERSION = 1
_HEADER = struct.Struct("<4sHQ")


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in model.state():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    meta = {"config": model.config.to_dict(), "entries": entries, "payload_bytes": len(payload),
            "crc32": zlib.crc32(payload), "extra": extra or {}}
    text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(_HEADER.pack(MAGIC, VERSION, len(text)) + text + payload)


def read_checkpoint(path) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: file too short for a checkpoint header")
    magic, version, meta_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    start = _HEADER.size + meta_len
    if start > len(blob):
        raise IntegrityError(f"{path}: metadata block truncated")
    try:
        meta = json.loads(blob[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable metadata ({exc})") from None
    payload = blob[start:]
    if len(payload) != meta.get("payload_bytes"):
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, header says {meta.get('payload_bytes')}")
    if zlib.crc32(payload) != meta.get("crc32"):
        raise IntegrityError(f"{path}: payload checksum mismatch")
    return meta, payload


def load_checkpoint(path) -> Model:
    meta, payload = read_checkpoint(path)
    model = Model(ModelConfig.from_dict(meta["config"]))
    state = model.state()
    entries = meta["entries"]
    if [e["name"] for e in entries] != [name for name, _ in state]:
        raise IntegrityError(f"{path}: parameter registry does not match the stored config")
    arrays = []
    for e in entries:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        arrays.append(arr.astype(dt.newbyteorder("="), copy=True))
    for (name, dst), src in zip(state, arrays):
        if dst.dtype != src.dtype:
            _replace_dtype(model, name, src)
    model.load_state(arrays)
    model.eval()
    return model


def _replace_dtype(model: Model, name: str, arr: np.ndarray) -> None:
    params = dict(model.named_parameters())
    if name in params:
        params[name].data = arr.copy()
        return
    path, _, attr = name.rpartition(".")
    mods = dict(model.named_modules())
    setattr(mods[path], attr, arr.copy())
