"""KITTI labels, PPM images, letterboxing, augmentation and the synthetic generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ParameterError, ParseError
from .model import DEFAULT_CLASSES

BBox = tuple[float, float, float, float]


@dataclass
class Annotation:
    class_name: str
    truncated: float
    occluded: int
    bbox: BBox
    class_index: int = -1
    raw: tuple[str, ...] | None = None

    @property
    def dont_care(self) -> bool:
        return self.class_name == "DontCare"

    @property
    def ignore(self) -> bool:
        """Excluded from training targets; acts as an ignore region at evaluation."""
        return self.dont_care or self.truncated > 0.8 or self.occluded == 3

    @property
    def trainable(self) -> bool:
        return self.class_index >= 0 and not self.ignore

    @property
    def area(self) -> float:
        return (self.bbox[2] - self.bbox[0]) * (self.bbox[3] - self.bbox[1])


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    annotations: list[Annotation]
    source_id: str = ""
    transform: "LetterboxTransform | None" = None


# ------------------------------------------------------------------ KITTI text


def parse_kitti_labels(text: str, class_names: Sequence[str] = DEFAULT_CLASSES) -> list[Annotation]:
    index = {name: i for i, name in enumerate(class_names)}
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) < 15:
            raise ParseError(f"expected at least 15 fields, got {len(tokens)}", line=lineno)
        try:
            truncated = float(tokens[1])
            occluded = int(float(tokens[2]))
            bbox = tuple(float(t) for t in tokens[4:8])
        except ValueError as exc:
            raise ParseError(f"non-numeric field ({exc})", line=lineno) from None
        name = tokens[0]
        cls = -1 if name == "DontCare" else index.get(name, -1)
        out.append(Annotation(name, truncated, occluded, bbox, cls, tuple(tokens)))
    return out


def format_kitti_line(ann: Annotation) -> str:
    """Re-serialise an annotation; parsed fields are echoed verbatim when unchanged."""
    if ann.raw is not None:
        tokens = list(ann.raw)
        if tuple(float(t) for t in tokens[4:8]) != tuple(ann.bbox):
            tokens[4:8] = [f"{v:.2f}" for v in ann.bbox]
        tokens[0] = ann.class_name
        return " ".join(tokens)
    l, t, r, b = ann.bbox
    return (f"{ann.class_name} {ann.truncated:.2f} {ann.occluded} -10 {l:.2f} {t:.2f} {r:.2f} {b:.2f} "
            "-1 -1 -1 -1000 -1000 -1000 -10")


# ------------------------------------------------------------------ PPM images


def read_ppm(path) -> np.ndarray:
    """Binary P6, 8-bit. Returns uint8 [H, W, 3]."""
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PPM header")
        tokens.append(blob[start:pos])
    if tokens[0] != b"P6":
        raise ParseError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ParseError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    data = blob[pos + 1 : pos + 1 + w * h * 3]
    if len(data) != w * h * 3:
        raise ParseError(f"{path}: pixel data truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())


def to_chw(pixels: np.ndarray) -> np.ndarray:
    return pixels.transpose(2, 0, 1).astype(np.float32) / 255.0


def to_hwc8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


# ------------------------------------------------------------------ letterbox


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_x: int
    pad_y: int

    def forward_box(self, bbox: BBox) -> BBox:
        l, t, r, b = bbox
        s = self.scale
        return (l * s + self.pad_x, t * s + self.pad_y, r * s + self.pad_x, b * s + self.pad_y)

    def inverse_box(self, bbox: BBox) -> BBox:
        l, t, r, b = bbox
        s = self.scale
        return ((l - self.pad_x) / s, (t - self.pad_y) / s, (r - self.pad_x) / s, (b - self.pad_y) / s)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a [C,H,W] array."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0).astype(image.dtype)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    rows = image[:, y0] * (1 - fy)[None, :, None] + image[:, y1] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def letterbox(image: np.ndarray, annotations: list[Annotation], target: int = 640,
              source_id: str = "") -> tuple[Sample, LetterboxTransform]:
    c, h, w = image.shape
    if h < 1 or w < 1:
        raise ParameterError("image must be non-empty")
    scale = target / max(h, w)
    nh, nw = min(target, round(h * scale)), min(target, round(w * scale))
    tf = LetterboxTransform(scale, (target - nw) // 2, (target - nh) // 2)
    canvas = np.zeros((c, target, target), dtype=np.float32)
    canvas[:, tf.pad_y : tf.pad_y + nh, tf.pad_x : tf.pad_x + nw] = resize_bilinear(image.astype(np.float32), nh, nw)
    anns = []
    for a in annotations:
        l, t, r, b = tf.forward_box(a.bbox)
        box = (min(max(l, 0.0), target), min(max(t, 0.0), target), min(max(r, 0.0), target), min(max(b, 0.0), target))
        if box[2] > box[0] and box[3] > box[1]:
            anns.append(replace(a, bbox=box))
    return Sample(canvas, anns, source_id, tf), tf


# ------------------------------------------------------------------ augmentation


@dataclass
class AugmentConfig:
    flip_p: float = 0.5
    mosaic_p: float = 0.5
    jitter: bool = True
    gain_range: tuple[float, float] = (0.6, 1.4)
    bias_range: tuple[float, float] = (-0.1, 0.1)
    mosaic_center: tuple[float, float] = (0.3, 0.7)
    mosaic_min_area: float = 0.2

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(flip_p=0.0, mosaic_p=0.0, jitter=False)


def hflip(sample: Sample) -> Sample:
    w = sample.image.shape[2]
    anns = [replace(a, bbox=(w - a.bbox[2], a.bbox[1], w - a.bbox[0], a.bbox[3])) for a in sample.annotations]
    return Sample(np.ascontiguousarray(sample.image[:, :, ::-1]), anns, sample.source_id, sample.transform)


def color_jitter(image: np.ndarray, gain, bias) -> np.ndarray:
    gain = np.asarray(gain, dtype=image.dtype).reshape(-1, 1, 1)
    bias = np.asarray(bias, dtype=image.dtype).reshape(-1, 1, 1)
    return np.clip(image * gain + bias, 0.0, 1.0)


def mosaic(samples: Sequence[Sample], center: tuple[int, int], min_area: float = 0.2) -> Sample:
    """Tile four same-size samples around ``center``; each keeps its own pixels in its quadrant.

    Boxes are clipped to their quadrant and dropped when less than
    ``min_area`` of their original area survives.
    """
    c, h, w = samples[0].image.shape
    cx, cy = center
    canvas = np.zeros((c, h, w), dtype=samples[0].image.dtype)
    regions = ((0, 0, cx, cy), (cx, 0, w, cy), (0, cy, cx, h), (cx, cy, w, h))
    anns = []
    for s, (x0, y0, x1, y1) in zip(samples, regions):
        if s.image.shape != (c, h, w):
            raise ParameterError("mosaic needs equally sized images")
        canvas[:, y0:y1, x0:x1] = s.image[:, y0:y1, x0:x1]
        for a in s.annotations:
            l, t, r, b = a.bbox
            cl, ct, cr, cb = max(l, x0), max(t, y0), min(r, x1), min(b, y1)
            if cr <= cl or cb <= ct:
                continue
            if (cr - cl) * (cb - ct) < min_area * a.area:
                continue
            anns.append(replace(a, bbox=(cl, ct, cr, cb)))
    return Sample(canvas, anns, "+".join(s.source_id for s in samples))


def augment(sample: Sample, config: AugmentConfig, rng: np.random.Generator,
            pool: Callable[[int], Sample] | None = None, pool_size: int = 0) -> Sample:
    """Mosaic (p), horizontal flip (p), then colour jitter.

    ``pool(i)`` fetches dataset sample ``i``; mosaic is skipped when fewer
    than four samples are available.
    """
    if config.mosaic_p > 0 and rng.random() < config.mosaic_p and pool is not None and pool_size >= 4:
        others = [pool(int(i)) for i in rng.integers(0, pool_size, size=3)]
        _, h, w = sample.image.shape
        lo, hi = config.mosaic_center
        center = (int(rng.uniform(lo, hi) * w), int(rng.uniform(lo, hi) * h))
        sample = mosaic([sample] + others, center, config.mosaic_min_area)
    if config.flip_p > 0 and rng.random() < config.flip_p:
        sample = hflip(sample)
    if config.jitter:
        gain = rng.uniform(*config.gain_range, size=3)
        bias = rng.uniform(*config.bias_range, size=3)
        sample = Sample(color_jitter(sample.image, gain, bias), sample.annotations, sample.source_id, sample.transform)
    return sample


# ------------------------------------------------------------------ normalisation


def normalize(image: np.ndarray, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)) -> np.ndarray:
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ParameterError(f"std components must be positive, got {std.tolist()}")
    m = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    return ((image - m) / std.reshape(-1, 1, 1)).astype(image.dtype)


def denormalize(image: np.ndarray, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    return (image * s + m).astype(image.dtype)


def dataset_stats(dataset: "Dataset") -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std in one pass (running sums)."""
    total = np.zeros(3)
    sq = np.zeros(3)
    count = 0
    for i in range(len(dataset)):
        img = dataset[i].image.astype(np.float64)
        total += img.sum(axis=(1, 2))
        sq += (img * img).sum(axis=(1, 2))
        count += img.shape[1] * img.shape[2]
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean * mean, 1e-12))
    return tuple(mean.tolist()), tuple(std.tolist())


# ------------------------------------------------------------------ datasets


class Dataset:
    """Ordered collection of samples, held in memory or loaded on demand."""

    def __init__(self, samples: Sequence[Sample] | None = None, loader: Callable[[int], Sample] | None = None,
                 length: int | None = None, class_names: Sequence[str] = DEFAULT_CLASSES):
        if samples is None and loader is None:
            raise ParameterError("Dataset needs samples or a loader")
        self._samples = list(samples) if samples is not None else None
        self._loader = loader
        self._length = len(self._samples) if self._samples is not None else int(length)
        self.class_names = tuple(class_names)

    def __len__(self):
        return self._length

    def __getitem__(self, i: int) -> Sample:
        if i < 0 or i >= self._length:
            raise IndexError(i)
        return self._samples[i] if self._samples is not None else self._loader(i)

    def order(self, seed: int, epoch: int = 0) -> np.ndarray:
        return np.random.default_rng([seed, epoch]).permutation(self._length)

    def subset(self, indices) -> "Dataset":
        idx = [int(i) for i in indices]
        return Dataset(loader=lambda i: self[idx[i]], length=len(idx), class_names=self.class_names)


def read_manifest(path) -> list[tuple[Path, Path]]:
    """Lines of ``image_path<TAB>label_path``; relative paths resolve against the manifest."""
    path = Path(path)
    base = path.parent
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError("expected image_path<TAB>label_path", line=lineno)
        img, lab = (Path(p.strip()) for p in parts)
        pairs.append((img if img.is_absolute() else base / img, lab if lab.is_absolute() else base / lab))
    return pairs


def load_manifest(path, target: int = 640, class_names: Sequence[str] = DEFAULT_CLASSES) -> Dataset:
    pairs = read_manifest(path)
    for img, lab in pairs:
        for p in (img, lab):
            if not p.exists():
                raise FileNotFoundError(p)

    def load(i: int) -> Sample:
        img, lab = pairs[i]
        anns = parse_kitti_labels(lab.read_text(), class_names)
        sample, _ = letterbox(to_chw(read_ppm(img)), anns, target, source_id=img.stem)
        return sample

    return Dataset(loader=load, length=len(pairs), class_names=class_names)


# ------------------------------------------------------------------ synthetic data

PALETTE = np.array([
    (0.90, 0.15, 0.15),  # red
    (0.15, 0.85, 0.20),  # green
    (0.20, 0.30, 0.95),  # blue
    (0.95, 0.90, 0.15),  # yellow
    (0.90, 0.20, 0.90),  # magenta
    (0.15, 0.90, 0.90),  # cyan
    (1.00, 0.55, 0.05),  # orange
    (0.95, 0.95, 0.95),  # white
], dtype=np.float32)


def _overlap_ok(box, others, limit=0.3) -> bool:
    for o in others:
        iw = min(box[2], o[2]) - max(box[0], o[0])
        ih = min(box[3], o[3]) - max(box[1], o[1])
        if iw <= 0 or ih <= 0:
            continue
        inter = iw * ih
        small = min((box[2] - box[0]) * (box[3] - box[1]), (o[2] - o[0]) * (o[3] - o[1]))
        if inter > limit * small:
            return False
    return True


def synth_sample(rng: np.random.Generator, n_classes: int, size: int, class_names, source_id="") -> Sample:
    bg = rng.uniform(0.0, 0.3, size=3).astype(np.float32)
    image = np.broadcast_to(bg.reshape(3, 1, 1), (3, size, size)).copy()
    target = int(rng.integers(1, 6))
    max_side = max(16, size // 2)
    boxes: list[tuple[int, int, int, int]] = []
    anns = []
    for _ in range(200):
        if len(boxes) == target:
            break
        bw, bh = (int(v) for v in rng.integers(16, max_side + 1, size=2))
        x0 = int(rng.integers(0, size - bw + 1))
        y0 = int(rng.integers(0, size - bh + 1))
        box = (x0, y0, x0 + bw, y0 + bh)
        if not _overlap_ok(box, boxes):
            continue
        cls = int(rng.integers(0, n_classes))
        color = np.clip(PALETTE[cls % len(PALETTE)] + rng.uniform(-0.05, 0.05, size=3), 0, 1).astype(np.float32)
        image[:, box[1] : box[3], box[0] : box[2]] = color.reshape(3, 1, 1)
        boxes.append(box)
        anns.append(Annotation(class_names[cls], 0.0, 0, tuple(float(v) for v in box), cls))
    return Sample(image, anns, source_id)


def synth_dataset(n_images: int, n_classes: int = 4, seed: int = 0, image_size: int = 64,
                  class_names: Sequence[str] | None = None) -> Dataset:
    """Solid backgrounds with 1-5 coloured rectangles; class is the colour bucket.

    Rectangles are at least 16x16 and any pair overlaps by at most 30% of the
    smaller one (hence IoU <= 0.3).
    """
    if n_images < 1:
        raise ParameterError("n_images must be >= 1")
    if not 1 <= n_classes <= len(PALETTE):
        raise ParameterError(f"n_classes must be in [1, {len(PALETTE)}]")
    if class_names is None:
        class_names = tuple(DEFAULT_CLASSES[:n_classes]) if n_classes <= len(DEFAULT_CLASSES) else \
            tuple(f"class{i}" for i in range(n_classes))
    if len(class_names) != n_classes:
        raise ParameterError("class_names length must equal n_classes")
    samples = [synth_sample(np.random.default_rng([seed, i]), n_classes, image_size, class_names, f"synth{i:05d}")
               for i in range(n_images)]
    return Dataset(samples, class_names=class_names)


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Materialise a dataset as PPM images, KITTI labels and a manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(dataset)):
        s = dataset[i]
        sid = s.source_id or f"{i:05d}"
        write_ppm(out / "images" / f"{sid}.ppm", to_hwc8(s.image))
        (out / "labels" / f"{sid}.txt").write_text("".join(format_kitti_line(a) + "\n" for a in s.annotations))
        lines.append(f"images/{sid}.ppm\tlabels/{sid}.txt")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
