"""Overlap (Dice, Jaccard) and boundary (95% Hausdorff, average surface distance) metrics.

Distances are exact Euclidean distances in pixel units between boundary
pixels, where a boundary pixel is a foreground pixel with a 4-neighbour in the
background or outside the image. When exactly one mask is empty the distance
metrics return the image diagonal instead of infinity.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .numcore import ShapeError


def _pair(pred, gt):
    p, g = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dsc(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def jaccard(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def boundary(mask) -> np.ndarray:
    """Boolean map of foreground pixels touching background (4-adjacency) or the image edge."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _directed(src_pts: np.ndarray, dst_pts: np.ndarray) -> np.ndarray:
    diff = src_pts[:, None, :] - dst_pts[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1)).min(axis=1)


def surface_distances(pred, gt):
    """Nearest-boundary distances pred->gt and gt->pred, or None if either mask is empty."""
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        return None
    bp = np.argwhere(boundary(p)).astype(np.float64)
    bg = np.argwhere(boundary(g)).astype(np.float64)
    return _directed(bp, bg), _directed(bg, bp)


def _sentinel(shape) -> float:
    return math.hypot(*shape)


def hd95(pred, gt) -> float:
    """95th percentile (nearest rank) of the pooled directed boundary distances."""
    p, g = _pair(pred, gt)
    if not p.any() and not g.any():
        return 0.0
    d = surface_distances(p, g)
    if d is None:
        return _sentinel(p.shape)
    pooled = np.sort(np.concatenate(d))
    rank = math.ceil(0.95 * pooled.size)
    return float(pooled[rank - 1])


def asd(pred, gt) -> float:
    """Mean of the two directed mean boundary distances."""
    p, g = _pair(pred, gt)
    if not p.any() and not g.any():
        return 0.0
    d = surface_distances(p, g)
    if d is None:
        return _sentinel(p.shape)
    return 0.5 * (float(d[0].mean()) + float(d[1].mean()))


@dataclass
class ClassScores:
    dsc: float
    ja: float
    hd95: float
    asd: float


@dataclass
class MetricReport:
    per_class: Dict[int, ClassScores] = field(default_factory=dict)

    def mean(self) -> ClassScores:
        rows = list(self.per_class.values())
        return ClassScores(*(float(np.mean([getattr(r, k) for r in rows]))
                             for k in ("dsc", "ja", "hd95", "asd")))

    @property
    def mean_dsc(self) -> float:
        return self.mean().dsc

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "dsc", "ja", "hd95", "asd"])
        for c, s in self.per_class.items():
            w.writerow([c] + [_fmt(v) for v in (s.dsc, s.ja, s.hd95, s.asd)])
        m = self.mean()
        w.writerow(["mean"] + [_fmt(v) for v in (m.dsc, m.ja, m.hd95, m.asd)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        report = cls()
        for r in rows:
            if r["class"] == "mean":
                continue
            report.per_class[int(r["class"])] = ClassScores(
                float(r["dsc"]), float(r["ja"]), float(r["hd95"]), float(r["asd"]))
        return report


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def _labels(x) -> np.ndarray:
    x = np.asarray(x)
    return x if np.issubdtype(x.dtype, np.integer) else x.astype(np.int64)


def evaluate(pred, gt, num_classes: int, boundary_metrics: bool = True) -> MetricReport:
    """Score label maps ``[H, W]`` (or stacks ``[N, H, W]``) per foreground class.

    Stacks are scored image by image and averaged, so every metric is a mean
    over images for each class.
    """
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ShapeError(f"label maps differ: {p.shape} vs {g.shape}")
    if p.ndim == 2:
        p, g = p[None], g[None]
    if max(p.max(initial=0), g.max(initial=0)) >= num_classes:
        raise ShapeError(f"label values exceed num_classes={num_classes}")
    report = MetricReport()
    for c in range(1, num_classes):
        rows = []
        for pi, gi in zip(p, g):
            pc, gc = pi == c, gi == c
            if boundary_metrics:
                rows.append((dsc(pc, gc), jaccard(pc, gc), hd95(pc, gc), asd(pc, gc)))
            else:
                rows.append((dsc(pc, gc), jaccard(pc, gc), float("nan"), float("nan")))
        report.per_class[c] = ClassScores(*(float(np.mean(col)) for col in zip(*rows)))
    return report


def evaluate_onehot(pred_onehot, gt_onehot) -> MetricReport:
    """Same as :func:`evaluate` for ``[C, H, W]`` / ``[N, C, H, W]`` one-hot inputs."""
    p, g = np.asarray(pred_onehot), np.asarray(gt_onehot)
    if p.shape[-3] != g.shape[-3]:
        raise ShapeError(f"class count mismatch: {p.shape[-3]} vs {g.shape[-3]}")
    return evaluate(p.argmax(axis=-3), g.argmax(axis=-3), p.shape[-3])
