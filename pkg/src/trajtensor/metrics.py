"""Evaluation metrics for the which/when/where tasks.

AP is the non-interpolated step sum over distinct score thresholds. SIOU and
displacement errors are computed per sample and use ground-truth positive
sets only.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor_core import UndefinedCentroidError, center_of_mass

IMAGE_W = 1920
IMAGE_H = 1080


class NoPositivesError(ValueError):
    """The ground truth has no positive entries, so the metric is undefined."""


def _ranked_counts(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.size} vs {labels.size}")
    if scores.size == 0:
        raise ValueError("empty input")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    n_pos = int(np.count_nonzero(labels))
    if n_pos == 0:
        raise NoPositivesError("no positive labels")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(labels[order], dtype=np.int64)
    # last index of every run of equal scores
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = tp[last]
    pp = last + 1
    return s[last], tp, pp, n_pos


def average_precision(scores, labels) -> float:
    _, tp, pp, n_pos = _ranked_counts(scores, labels)
    precision = tp / pp
    d_recall = np.diff(tp, prepend=0) / n_pos
    return float(np.sum(d_recall * precision))


@dataclass(frozen=True)
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def points(self):
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist()))

    def __len__(self):
        return len(self.thresholds)

    def subsample(self, max_points: int) -> "PrCurve":
        """At most ``max_points`` points evenly spaced by rank, always keeping the
        first and last; for plotting curves with millions of thresholds."""
        if len(self) <= max_points:
            return self
        keep = np.unique(np.linspace(0, len(self) - 1, max(max_points, 2)).round().astype(np.int64))
        return PrCurve(self.thresholds[keep], self.precision[keep], self.recall[keep])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["threshold", "precision", "recall"])
            for row in zip(self.thresholds, self.precision, self.recall):
                wr.writerow([repr(float(v)) for v in row])


def pr_curve(scores, labels) -> PrCurve:
    thr, tp, pp, n_pos = _ranked_counts(scores, labels)
    return PrCurve(thr, tp / pp, tp / n_pos)


def _positive_cameras(gt: np.ndarray) -> np.ndarray:
    pos = np.flatnonzero(gt.reshape(gt.shape[0], -1).any(axis=1))
    if pos.size == 0:
        raise NoPositivesError("ground truth has no positive camera")
    return pos


def _masked_ratio(values: np.ndarray, mask: np.ndarray) -> float:
    """sum(values[mask]) / sum(values) with both sums exact, rounded once.

    Floats are dyadic rationals, so they are summed as integers on a common
    exponent and divided with correctly rounded int division. A uniform
    prediction therefore gives exactly |mask| / size. Zero total gives 0.
    """
    mant, exp = np.frexp(np.asarray(values, dtype=np.float64).ravel())
    keep = mant != 0
    if not keep.any():
        return 0.0
    ints = (mant[keep] * 2.0**53).astype(np.int64).tolist()
    exps = exp[keep]
    shifts = (exps - exps.min()).tolist()
    terms = [i << s for i, s in zip(ints, shifts)]
    den = sum(terms)
    if den <= 0:
        return 0.0
    num = sum(t for t, m in zip(terms, np.asarray(mask).ravel()[keep].tolist()) if m)
    return num / den


def siou_when(pred, gt) -> float:
    """Share of predicted temporal mass that falls on ground-truth timesteps,
    averaged over the ground-truth positive cameras."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"expected matching (k, m) arrays, got {pred.shape} and {gt.shape}")
    cams = _positive_cameras(gt)
    ratios = [_masked_ratio(pred[c], gt[c]) for c in cams]
    return math.fsum(ratios) / len(ratios)


def siou_where(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape or pred.ndim != 4:
        raise ValueError(f"expected matching (k, m, w, h) arrays, got {pred.shape} and {gt.shape}")
    cams = _positive_cameras(gt)
    per_cam = []
    for c in cams:
        steps = np.flatnonzero(gt[c].any(axis=(1, 2)))
        per_cam.append(math.fsum(_masked_ratio(pred[c, t], gt[c, t]) for t in steps) / len(steps))
    return math.fsum(per_cam) / len(per_cam)


def displacement_errors(pred, gt, image_w: float = IMAGE_W, image_h: float = IMAGE_H) -> tuple[float, float]:
    """(ADE, FDE) in pixels between heatmap centroids on ground-truth timesteps.

    A prediction slice with no mass is charged the image diagonal.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 4:
        raise ValueError(f"expected matching (k, m, w, h) arrays, got {pred.shape} and {gt.shape}")
    worst = math.hypot(image_w, image_h)
    ades, fdes = [], []
    for c in _positive_cameras(gt):
        dists = []
        for t in np.flatnonzero(gt[c].any(axis=(1, 2))):
            gx, gy = center_of_mass(gt[c, t], image_w, image_h)
            try:
                px, py = center_of_mass(pred[c, t], image_w, image_h)
            except UndefinedCentroidError:
                dists.append(worst)
                continue
            dists.append(math.hypot(px - gx, py - gy))
        ades.append(float(np.mean(dists)))
        fdes.append(dists[-1])
    return float(np.mean(ades)), float(np.mean(fdes))


# --- reports ------------------------------------------------------------------

METRIC_NAMES = ("ap_which", "ap_when", "ap_where", "siou_when", "siou_where", "ade_where", "fde_where")


@dataclass
class FoldMetrics:
    fold: int
    ap_which: Optional[float] = None
    ap_when: Optional[float] = None
    ap_where: Optional[float] = None
    siou_when: Optional[float] = None
    siou_where: Optional[float] = None
    ade_where: Optional[float] = None
    fde_where: Optional[float] = None
    n_samples: int = 0
    skipped: list[str] = field(default_factory=list)


@dataclass
class MetricsReport:
    folds: list[FoldMetrics]
    config: dict = field(default_factory=dict)

    def mean(self, name: str) -> Optional[float]:
        vals = [getattr(f, name) for f in self.folds if getattr(f, name) is not None]
        if not vals:
            return None
        return math.fsum(vals) / len(vals)

    def means(self) -> dict[str, Optional[float]]:
        return {name: self.mean(name) for name in METRIC_NAMES}

    def to_dict(self) -> dict:
        return {"config": self.config, "folds": [asdict(f) for f in self.folds], "mean": self.means()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = []
        for key, val in _flatten("config", self.config):
            lines.append(f"{key} = {val}")
        for f in self.folds:
            for name in METRIC_NAMES:
                val = getattr(f, name)
                if val is not None:
                    lines.append(f"fold{f.fold}.{name} = {val!r}")
            lines.append(f"fold{f.fold}.n_samples = {f.n_samples}")
            for note in f.skipped:
                lines.append(f"fold{f.fold}.skipped = {note}")
        for name, val in self.means().items():
            if val is not None:
                lines.append(f"mean.{name} = {val!r}")
        return "\n".join(lines) + "\n"


def _flatten(prefix: str, obj):
    if isinstance(obj, dict):
        for key in sorted(obj):
            yield from _flatten(f"{prefix}.{key}", obj[key])
    else:
        yield prefix, json.dumps(obj)
