"""IoU, NMS, detection matching, precision/recall/F1, AP and mAP@0.5."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import DetectionBox


def iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [N,4] and [M,4] boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def _rank_key(d: DetectionBox):
    return (-d.confidence, d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3], d.class_index)


def sort_detections(dets: Sequence[DetectionBox]) -> list[DetectionBox]:
    """Confidence descending; ties broken by left, top, right, bottom, class."""
    return sorted(dets, key=_rank_key)


def nms(boxes: Sequence[DetectionBox], iou_threshold: float = 0.45) -> list[DetectionBox]:
    """Greedy per-class suppression; output is in rank order."""
    ordered = sort_detections(boxes)
    if not ordered:
        return []
    coords = np.array([d.bbox for d in ordered], dtype=np.float64)
    classes = np.array([d.class_index for d in ordered])
    overlaps = iou_matrix(coords, coords)
    suppressed = np.zeros(len(ordered), dtype=bool)
    keep = []
    for i in range(len(ordered)):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= (overlaps[i] >= iou_threshold) & (classes == classes[i])
    return [ordered[i] for i in keep]


@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        return MatchCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass
class GroundTruth:
    class_index: int
    bbox: tuple[float, float, float, float]
    ignore: bool = False


def match_detections(dets: Sequence[DetectionBox], gts: Sequence[GroundTruth], iou_threshold: float = 0.5):
    """Greedy one-to-one matching within each class.

    Each detection, in confidence order, takes the highest-IoU unmatched GT of
    its class when that IoU reaches the threshold. Detections overlapping an
    ignore region at the threshold, and not matched to a real GT, are dropped.
    Returns (labels, counts) where labels holds (detection, is_tp) for the
    detections that count.
    """
    ordered = sort_detections(dets)
    real = [g for g in gts if not g.ignore]
    ignores = [g for g in gts if g.ignore]
    matched = [False] * len(real)
    labels = []
    counts = MatchCounts()
    for d in ordered:
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(real):
            if matched[j] or g.class_index != d.class_index:
                continue
            o = iou(d.bbox, g.bbox)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = j, o
        if best >= 0:
            matched[best] = True
            labels.append((d, True))
            counts.tp += 1
            continue
        if any(iou(d.bbox, g.bbox) >= iou_threshold for g in ignores):
            continue
        labels.append((d, False))
        counts.fp += 1
    counts.fn = matched.count(False)
    return labels, counts


def precision_recall(counts: MatchCounts) -> tuple[float, float]:
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    return p, r


def f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def f1_consistent(p: float, r: float, reported: float, tol: float = 0.01) -> bool:
    """Whether a reported F1 agrees with the harmonic mean of its own P and R."""
    return abs(f1(p, r) - reported) <= tol


def average_precision(labeled: Sequence[tuple[float, bool]], n_gt: int) -> float | None:
    """Area under the monotone precision envelope (all-points).

    ``labeled`` holds (confidence, is_tp). Detections sharing a confidence
    enter the curve together, so the result depends only on confidence ranks.
    Returns None when there is no ground truth.
    """
    if n_gt <= 0:
        return None
    if not labeled:
        return 0.0
    conf = np.array([c for c, _ in labeled], dtype=np.float64)
    tp = np.array([t for _, t in labeled], dtype=np.float64)
    order = np.argsort(-conf, kind="stable")
    conf, tp = conf[order], tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    last = np.r_[conf[1:] != conf[:-1], True]  # final index of each confidence group
    ctp, cfp = ctp[last], cfp[last]
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * envelope))


@dataclass
class EvalReport:
    class_names: tuple[str, ...]
    ap: dict[int, float | None]
    map50: float
    precision: float
    recall: float
    f1: float
    counts: MatchCounts
    confusion: np.ndarray  # rows = ground truth, cols = predicted; last index is background
    iou_threshold: float = 0.5
    conf_threshold: float = 0.25

    def lines(self) -> list[str]:
        """Delimited report followed by a key=value block."""
        out = ["class\tap50"]
        for i, name in enumerate(self.class_names):
            v = self.ap.get(i)
            out.append(f"{name}\t{'nan' if v is None else f'{v:.6f}'}")
        out.append("")
        out.append("confusion (rows=true, cols=pred, last=background)")
        labels = list(self.class_names) + ["background"]
        out.append("\t" + "\t".join(labels))
        for name, row in zip(labels, self.confusion):
            out.append(name + "\t" + "\t".join(str(int(v)) for v in row))
        out.append("")
        out.append(f"precision={self.precision:.6f}")
        out.append(f"recall={self.recall:.6f}")
        out.append(f"f1={self.f1:.6f}")
        out.append(f"map50={self.map50:.6f}")
        out.append(f"tp={self.counts.tp}")
        out.append(f"fp={self.counts.fp}")
        out.append(f"fn={self.counts.fn}")
        out.append(f"iou_threshold={self.iou_threshold}")
        out.append(f"conf_threshold={self.conf_threshold}")
        out.append("flops_convention=2xMACs")
        return out

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def parse_report(text: str) -> dict[str, str]:
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line and "\t" not in line)


def confusion_matrix(dets_per_image, gts_per_image, num_classes: int, iou_threshold=0.5,
                     conf_threshold=0.25) -> np.ndarray:
    """Class-agnostic best-IoU pairing; unmatched GT -> background column, unmatched det -> background row."""
    bg = num_classes
    cm = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    for dets, gts in zip(dets_per_image, gts_per_image):
        dets = [d for d in sort_detections(dets) if d.confidence >= conf_threshold]
        real = [g for g in gts if not g.ignore]
        ignores = [g for g in gts if g.ignore]
        pairs = []
        if dets and real:
            m = iou_matrix([d.bbox for d in dets], [g.bbox for g in real])
            for di, gi in zip(*np.nonzero(m >= iou_threshold)):
                pairs.append((-m[di, gi], int(di), int(gi)))
        pairs.sort()
        used_d, used_g = set(), set()
        for _, di, gi in pairs:
            if di in used_d or gi in used_g:
                continue
            used_d.add(di)
            used_g.add(gi)
            cm[real[gi].class_index, dets[di].class_index] += 1
        for gi, g in enumerate(real):
            if gi not in used_g:
                cm[g.class_index, bg] += 1
        for di, d in enumerate(dets):
            if di in used_d:
                continue
            if any(iou(d.bbox, g.bbox) >= iou_threshold for g in ignores):
                continue
            cm[bg, d.class_index] += 1
    return cm


def map_at(dets_per_image: Sequence[Sequence[DetectionBox]], gts_per_image: Sequence[Sequence[GroundTruth]],
           class_names: Sequence[str], iou_threshold: float = 0.5, conf_threshold: float = 0.25) -> EvalReport:
    """mAP over classes with at least one GT, plus P/R/F1 and confusion at ``conf_threshold``."""
    nc = len(class_names)
    labeled: dict[int, list[tuple[float, bool]]] = {c: [] for c in range(nc)}
    n_gt = [0] * nc
    counts = MatchCounts()
    for dets, gts in zip(dets_per_image, gts_per_image):
        for g in gts:
            if not g.ignore and 0 <= g.class_index < nc:
                n_gt[g.class_index] += 1
        labels, _ = match_detections(dets, gts, iou_threshold)
        for d, is_tp in labels:
            if 0 <= d.class_index < nc:
                labeled[d.class_index].append((d.confidence, is_tp))
        _, c = match_detections([d for d in dets if d.confidence >= conf_threshold], gts, iou_threshold)
        counts = counts + c
    ap = {c: average_precision(labeled[c], n_gt[c]) for c in range(nc)}
    valid = [v for v in ap.values() if v is not None]
    mAP = float(np.mean(valid)) if valid else 0.0
    p, r = precision_recall(counts)
    cm = confusion_matrix(dets_per_image, gts_per_image, nc, iou_threshold, conf_threshold)
    return EvalReport(tuple(class_names), ap, mAP, p, r, f1(p, r), counts, cm, iou_threshold, conf_threshold)
