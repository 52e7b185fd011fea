"""Non-learned and lightly learned reference predictors.

Every predictor returns task-shaped scores in [0, 1] so it can be scored with
the same AP pipeline as the learned models. Camera indices are 1-based.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .nn import Adam, Dense, ReLU, Sequential, Sigmoid, bce_loss, gradients, parameters
from .tensor_core import BoundingBox

log = logging.getLogger(__name__)

FEATURE_SIZE = 10


class InsufficientHistoryError(ValueError):
    pass


class FitError(ValueError):
    pass


# --- camera distances -------------------------------------------------------------


def validate_distance_matrix(matrix) -> np.ndarray:
    mat = np.asarray(matrix, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"distance matrix must be square, got shape {mat.shape}")
    if np.any(mat < 0) or np.any(np.diag(mat) != 0):
        raise ValueError("distance matrix must be non-negative with a zero diagonal")
    if not np.allclose(mat, mat.T, rtol=0, atol=1e-9):
        raise ValueError("distance matrix must be symmetric")
    return mat


def read_distance_matrix(path: str | Path) -> np.ndarray:
    """Whitespace-separated k x k text matrix, one row per line."""
    return validate_distance_matrix(np.atleast_2d(np.loadtxt(path, dtype=np.float64)))


def write_distance_matrix(path: str | Path, matrix) -> None:
    np.savetxt(path, validate_distance_matrix(matrix), fmt="%.6f")


def shortest_distance_predict(matrix, departure_camera: int) -> np.ndarray:
    """Which-scores 1/(1+d) to every other camera; the departure camera gets 0."""
    mat = np.asarray(matrix, dtype=np.float64)
    k = mat.shape[0]
    if not 1 <= departure_camera <= k:
        raise ValueError(f"camera {departure_camera} outside 1..{k}")
    scores = 1.0 / (1.0 + mat[departure_camera - 1])
    scores[departure_camera - 1] = 0.0
    return scores


# --- training-set mean --------------------------------------------------------------


@dataclass(frozen=True)
class MeanModel:
    per_camera: dict[int, np.ndarray]
    global_mean: np.ndarray


def mean_fit(departure_cameras: Sequence[int], targets) -> MeanModel:
    """Element-wise target mean per departure camera, plus the global mean."""
    targets = np.asarray(targets, dtype=np.float64)
    cams = np.asarray(departure_cameras)
    if targets.shape[0] == 0:
        raise FitError("mean baseline needs at least one training sample")
    if cams.shape[0] != targets.shape[0]:
        raise FitError(f"{cams.shape[0]} cameras for {targets.shape[0]} targets")
    per_camera = {int(c): targets[cams == c].mean(axis=0) for c in np.unique(cams)}
    return MeanModel(per_camera, targets.mean(axis=0))


def mean_predict(model: MeanModel, departure_camera: int) -> np.ndarray:
    if departure_camera in model.per_camera:
        return model.per_camera[departure_camera].copy()
    log.info("mean baseline: no training samples for camera %d, using global mean", departure_camera)
    return model.global_mean.copy()


# --- most similar trajectory ------------------------------------------------------------


def most_similar_index(pool_tracks, query) -> int:
    pool = np.asarray(pool_tracks, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    d = ((pool.reshape(len(pool), -1) - q.reshape(-1)) ** 2).sum(axis=1)
    return int(np.argmin(d))  # first minimum, so ties go to the lowest index


def most_similar_predict(pool_tracks, pool_targets, query, fallback: Optional[np.ndarray] = None) -> np.ndarray:
    """Target of the training track nearest to ``query`` in flattened L2.

    With an empty pool the ``fallback`` scores (normally the mean baseline) are
    returned and the event is logged.
    """
    if len(pool_tracks) == 0:
        if fallback is None:
            raise FitError("empty similarity pool and no fallback")
        log.warning("most-similar baseline: empty pool, falling back to mean prediction")
        return np.array(fallback, dtype=np.float64)
    i = most_similar_index(pool_tracks, query)
    return np.array(pool_targets[i], dtype=np.float64)


# --- hand-crafted features -------------------------------------------------------------------


def _track_rows(track) -> np.ndarray:
    if isinstance(track, np.ndarray):
        return np.asarray(track, dtype=np.float64)
    rows = [b.as_array() if isinstance(b, BoundingBox) else (np.full(4, np.nan) if b is None else b) for b in track]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def handcrafted_extract(track) -> np.ndarray:
    """10 features: velocity x/y, acceleration x/y, then the last box's
    height, width, x1, y1, x2, y2.

    ``track`` is an (n, 4) array with NaN rows for missing steps, or a
    sequence of optional boxes. Missing steps are skipped, so the velocity is
    the mean first difference of the present centroids.
    """
    rows = _track_rows(track)
    rows = rows[~np.isnan(rows).any(axis=1)]
    if len(rows) < 3:
        raise InsufficientHistoryError(f"need at least 3 present boxes, got {len(rows)}")
    centers = np.stack([(rows[:, 0] + rows[:, 2]) / 2, (rows[:, 1] + rows[:, 3]) / 2], axis=1)
    vel = np.diff(centers, axis=0).mean(axis=0)
    acc = np.diff(centers, n=2, axis=0).mean(axis=0)
    x1, y1, x2, y2 = rows[-1]
    return np.array([vel[0], vel[1], acc[0], acc[1], y2 - y1, x2 - x1, x1, y1, x2, y2])


class HandcraftedClassifier:
    """Dense(10 -> hidden) -> ReLU -> Dense -> sigmoid over standardized features."""

    def __init__(self, out_shape: tuple[int, ...], hidden: int = 64, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.out_shape = tuple(out_shape)
        size = int(np.prod(self.out_shape))
        self.net = Sequential(Dense(FEATURE_SIZE, hidden, rng), ReLU(), Dense(hidden, size, rng), Sigmoid())
        self.shift = np.zeros(FEATURE_SIZE)
        self.scale = np.ones(FEATURE_SIZE)

    def _standardize(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        if f.shape[-1] != FEATURE_SIZE:
            raise ValueError(f"expected {FEATURE_SIZE} features, got shape {f.shape}")
        return (f - self.shift) / self.scale

    def predict(self, features) -> np.ndarray:
        f = np.atleast_2d(self._standardize(features))
        out = self.net.forward(f)
        out = out.reshape((len(f),) + self.out_shape)
        return out[0] if np.ndim(features) == 1 else out

    def fit(self, features, targets, epochs: int = 200, lr: float = 1e-3, batch_size: int = 64, seed: int = 0) -> list[float]:
        f = np.asarray(features, dtype=np.float64)
        if len(f) == 0:
            raise FitError("hand-crafted classifier needs training samples")
        y = np.asarray(targets, dtype=np.float64).reshape(len(f), -1)
        self.shift = f.mean(axis=0)
        std = f.std(axis=0)
        self.scale = np.where(std > 1e-12, std, 1.0)
        x = self._standardize(f)
        rng = np.random.default_rng(seed)
        opt = Adam(lr)
        history = []
        for _ in range(epochs):
            order = rng.permutation(len(x))
            total = 0.0
            for lo in range(0, len(x), batch_size):
                idx = order[lo : lo + batch_size]
                out = self.net.forward(x[idx])
                loss, grad = bce_loss(out, y[idx])
                self.net.backward(grad)
                opt.step(parameters(self.net), gradients(self.net))
                total += loss * len(idx)
            history.append(total / len(x))
        return history


def handcrafted_classify(model: HandcraftedClassifier, feature) -> np.ndarray:
    return model.predict(feature)


@dataclass
class HandcraftedBaseline:
    """One classifier per departure camera; cameras without enough usable
    training tracks fall back to the mean model."""

    classifiers: dict[int, HandcraftedClassifier] = field(default_factory=dict)
    mean: Optional[MeanModel] = None

    def predict(self, departure_camera: int, track) -> np.ndarray:
        clf = self.classifiers.get(departure_camera)
        if clf is not None:
            try:
                return clf.predict(handcrafted_extract(track))
            except InsufficientHistoryError:
                log.info("hand-crafted baseline: short track, using mean prediction")
        return mean_predict(self.mean, departure_camera)


def handcrafted_fit(
    departure_cameras: Sequence[int],
    tracks: Sequence,
    targets,
    epochs: int = 200,
    lr: float = 1e-3,
    seed: int = 0,
) -> HandcraftedBaseline:
    targets = np.asarray(targets, dtype=np.float64)
    baseline = HandcraftedBaseline(mean=mean_fit(departure_cameras, targets))
    by_cam: dict[int, tuple[list, list]] = {}
    for cam, track, tgt in zip(departure_cameras, tracks, targets):
        try:
            feat = handcrafted_extract(track)
        except InsufficientHistoryError:
            continue
        feats, tgts = by_cam.setdefault(int(cam), ([], []))
        feats.append(feat)
        tgts.append(tgt)
    for cam in sorted(by_cam):
        feats, tgts = by_cam[cam]
        clf = HandcraftedClassifier(targets.shape[1:], rng=np.random.default_rng([seed, cam]))
        clf.fit(np.array(feats), np.array(tgts), epochs=epochs, lr=lr, seed=seed + cam)
        baseline.classifiers[cam] = clf
    return baseline
