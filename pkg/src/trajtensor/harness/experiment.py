"""Training loops, day-split cross-validation, sweeps, ablations and
multi-target prediction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..baselines import (
    HandcraftedBaseline,
    MeanModel,
    handcrafted_fit,
    mean_fit,
    mean_predict,
    most_similar_predict,
    shortest_distance_predict,
)
from ..datagen import ConfigError, Dataset, DatasetError, MultiTargetGroup
from ..metrics import (
    FoldMetrics,
    MetricsReport,
    NoPositivesError,
    PrCurve,
    average_precision,
    displacement_errors,
    pr_curve,
    siou_when,
    siou_where,
)
from ..models import MctfModel, ModelRegistry, ModelSpec, build_registry
from ..nn import Adam, bce_loss
from .config import RunConfig

log = logging.getLogger(__name__)


# exported PR curves are thinned to this many points
CURVE_POINTS = 2000


class FoldError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


# --- data ---------------------------------------------------------------------------------


@dataclass
class PreparedData:
    """Dense arrays for one task; row i belongs to ``dataset.samples[i]``."""

    dataset: Dataset
    task: str
    cameras: np.ndarray  # (N,) 1-based departure cameras
    days: np.ndarray
    steps: np.ndarray
    targets: np.ndarray  # uint8, (N,) + task shape
    tracks: np.ndarray  # (N, n, 4) departure-camera boxes, zeros when missing
    present: np.ndarray  # (N, n) bool
    tensors: Optional[np.ndarray] = None  # (N, k, n, w, h)

    def __len__(self):
        return len(self.cameras)

    @property
    def task_shape(self) -> tuple[int, ...]:
        return self.targets.shape[1:]

    def nan_tracks(self, idx) -> np.ndarray:
        out = self.tracks[idx].copy()
        out[~self.present[idx]] = np.nan
        return out


def task_targets(sample, task: str) -> np.ndarray:
    which, when, where = sample.targets()
    return {"which": which, "when": when, "where": where}[task]


def prepare(dataset: Dataset, task: str, heatmap=(16, 9), sigma: float = 0.0, tensors: bool = True) -> PreparedData:
    samples = dataset.samples
    k, n, m = dataset.k, dataset.n, dataset.m
    shape = {"which": (k,), "when": (k, m), "where": (k, m, 16, 9)}[task]
    targets = np.zeros((len(samples),) + shape, dtype=np.uint8)
    tracks = np.zeros((len(samples), n, 4))
    present = np.zeros((len(samples), n), dtype=bool)
    for i, s in enumerate(samples):
        targets[i] = task_targets(s, task)
        for t, box in enumerate(s.inputs[s.departure_camera - 1]):
            if box is not None:
                tracks[i, t] = box.as_array()
                present[i, t] = True
    z = None
    if tensors:
        w, h = heatmap
        z = np.zeros((len(samples), k, n, w, h))
        for i, s in enumerate(samples):
            z[i] = s.input_tensor(w, h, sigma)
    return PreparedData(
        dataset,
        task,
        np.array([s.departure_camera for s in samples], dtype=np.int64),
        np.array([s.day for s in samples], dtype=np.int64),
        np.array([s.departure_step for s in samples], dtype=np.int64),
        targets,
        tracks,
        present,
        z,
    )


def prepare_for(cfg: RunConfig, dataset: Dataset) -> PreparedData:
    return prepare(dataset, cfg.task, cfg.heatmap, cfg.sigma, tensors=not (cfg.is_baseline or cfg.is_coordinate))


# --- folds --------------------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    day_to_fold: dict[int, int]
    n_folds: int

    def test_days(self, fold: int) -> list[int]:
        return sorted(d for d, f in self.day_to_fold.items() if f == fold)

    def train_days(self, fold: int) -> list[int]:
        return sorted(d for d, f in self.day_to_fold.items() if f != fold)

    def split(self, days: np.ndarray, fold: int) -> tuple[np.ndarray, np.ndarray]:
        test = np.isin(days, self.test_days(fold))
        return np.flatnonzero(~test), np.flatnonzero(test)


def make_fold_plan(days: Sequence[int], n_folds: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded day-to-fold assignment; independent of the order ``days`` arrive in."""
    unique = sorted(set(int(d) for d in days))
    if len(unique) < n_folds:
        raise ConfigError(f"need at least {n_folds} distinct days for {n_folds}-fold cross-validation, got {len(unique)}")
    order = np.random.default_rng(seed).permutation(len(unique))
    return FoldPlan({unique[j]: pos % n_folds for pos, j in enumerate(order)}, n_folds)


# --- predictors -----------------------------------------------------------------------------------


@dataclass
class LearnedPredictor:
    registry: ModelRegistry
    fallback: Optional[MeanModel] = None
    histories: dict = field(default_factory=dict)
    optimizers: dict = field(default_factory=dict)

    def predict(self, data: PreparedData, idx, single_view: bool = False) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        out = np.zeros((len(idx),) + data.task_shape)
        if self.registry.is_coordinate:
            for cam in np.unique(data.cameras[idx]):
                sel = np.flatnonzero(data.cameras[idx] == cam)
                model = self.registry.models.get(int(cam))
                if model is None:
                    log.info("camera %d has no trained model, using the training-set mean", cam)
                    out[sel] = mean_predict(self.fallback, int(cam))
                else:
                    out[sel] = model.predict(data.tracks[idx[sel]])
            return out
        x = data.tensors[idx]
        if single_view:
            x = mask_to_departure_camera(x, data.cameras[idx])
        return self.registry.model_for(0).predict(x)

    def weight_blocks(self) -> dict[str, np.ndarray]:
        blocks = dict(self.registry.parameters())
        for cam, opt in sorted(self.optimizers.items(), key=lambda kv: (kv[0] is not None, kv[0] or 0)):
            prefix = "" if cam is None else f"cam{cam}/"
            for name, arr in opt.state_arrays().items():
                blocks[prefix + name] = arr
        return blocks


@dataclass
class BaselinePredictor:
    kind: str
    distances: np.ndarray
    mean: MeanModel
    pool_tracks: Optional[np.ndarray] = None
    pool_targets: Optional[np.ndarray] = None
    pool_cameras: Optional[np.ndarray] = None
    handcrafted: Optional[HandcraftedBaseline] = None

    def predict(self, data: PreparedData, idx, single_view: bool = False) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        out = np.zeros((len(idx),) + data.task_shape)
        for j, i in enumerate(idx):
            cam = int(data.cameras[i])
            if self.kind == "shortest_distance":
                out[j] = shortest_distance_predict(self.distances, cam)
            elif self.kind == "mean":
                out[j] = mean_predict(self.mean, cam)
            elif self.kind == "most_similar":
                pool = np.flatnonzero(self.pool_cameras == cam)
                out[j] = most_similar_predict(
                    self.pool_tracks[pool], self.pool_targets[pool], data.tracks[i], fallback=mean_predict(self.mean, cam)
                )
            else:
                out[j] = self.handcrafted.predict(cam, data.nan_tracks(i))
        return out


def mask_to_departure_camera(x: np.ndarray, cameras: np.ndarray) -> np.ndarray:
    """Batch form of ``single_view_mask``: keep only each sample's departure camera."""
    out = np.zeros_like(x)
    rows = np.arange(len(x))
    out[rows, cameras - 1] = x[rows, cameras - 1]
    return out


# --- training ----------------------------------------------------------------------------------


def model_spec(cfg: RunConfig, dataset: Dataset) -> ModelSpec:
    opts = dict(cfg.model_options)
    if "channels" in opts:
        opts["channels"] = tuple(opts["channels"])
    camera = 1 if cfg.is_coordinate else None
    return ModelSpec(cfg.model, cfg.task, dataset.k, m=dataset.m, n=dataset.n, w=cfg.heatmap[0], h=cfg.heatmap[1], camera=camera, **opts)


def _validation_split(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val >= n:
        return np.arange(n), np.arange(0)
    order = rng.permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _score(model: MctfModel, x, y) -> Optional[float]:
    if len(x) == 0 or not y.any():
        return None
    return average_precision(model.predict(x).ravel(), y.ravel())


def fit_network(
    model: MctfModel,
    x: np.ndarray,
    y: np.ndarray,
    cfg: RunConfig,
    rng: np.random.Generator,
    x_val: Optional[np.ndarray] = None,
    y_val: Optional[np.ndarray] = None,
) -> tuple[list[dict], Adam]:
    """Mini-batch BCE training with Adam and early stopping on validation AP.

    Without usable validation data the end-of-epoch training loss drives
    model selection. The best epoch's parameters are restored at the end.
    """
    opt = Adam(cfg.learning_rate)
    # only the forward network; the autoencoder decoder is trained during pretraining alone
    named = list(model.net.named_parameters())
    params = {n: l.params[k] for n, l, k in named}
    best = {k: v.copy() for k, v in params.items()}
    best_score, stale, history = -math.inf, 0, []
    y = np.asarray(y)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for lo in range(0, len(x), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            out = model.forward(x[idx])
            loss, grad = bce_loss(out, y[idx].astype(np.float64))
            if not math.isfinite(loss):
                raise DivergenceError(f"{model.spec.family}/{model.spec.task}: loss became {loss} at epoch {epoch}")
            model.backward(grad)
            opt.step(params, {n: l.grads[k] for n, l, k in named})
            total += loss * len(idx)
        train_loss = total / len(x)
        val = _score(model, x_val, y_val) if x_val is not None else None
        if val is not None:
            score = val
        else:
            # the running loss predates this epoch's updates; score the weights being kept
            score = -bce_loss(model.predict(x), y.astype(np.float64))[0]
        history.append({"epoch": epoch, "train_loss": train_loss, "val_ap": val, "score": score})
        log.debug("epoch %d loss %.5f val %s", epoch, train_loss, val)
        if score > best_score:
            best_score, stale = score, 0
            best = {k: v.copy() for k, v in params.items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for name, arr in params.items():
        arr[...] = best[name]
    return history, opt


def pretrain_autoencoder(model: MctfModel, x: np.ndarray, cfg: RunConfig, rng, x_val=None) -> list[dict]:
    """Reconstruct every timestep's (k, w, h) slice; stop after ``ae_patience``
    epochs without validation improvement."""

    def frames(z):
        return np.ascontiguousarray(np.swapaxes(z, 1, 2).reshape((-1,) + z.shape[1:2] + z.shape[3:]))

    enc, dec = model.ae_encoder, model.ae_decoder
    f_train = frames(x)
    f_val = frames(x_val) if x_val is not None and len(x_val) else f_train
    named = [(n, l, k) for n, l, k in enc.named_parameters("enc.")] + list(dec.named_parameters("dec."))
    params = {n: l.params[k] for n, l, k in named}
    opt = Adam(cfg.ae_lr)
    best_loss, stale, history = math.inf, 0, []
    best = {k: v.copy() for k, v in params.items()}
    for epoch in range(cfg.ae_max_epochs):
        order = rng.permutation(len(f_train))
        for lo in range(0, len(f_train), cfg.batch_size):
            batch = f_train[order[lo : lo + cfg.batch_size]]
            out = dec.forward(enc.forward(batch))
            loss, grad = bce_loss(out, batch, soft=True)
            if not math.isfinite(loss):
                raise DivergenceError(f"autoencoder loss became {loss} at epoch {epoch}")
            enc.backward(dec.backward(grad))
            opt.step(params, {n: l.grads[k] for n, l, k in named})
        val = 0.0
        for lo in range(0, len(f_val), 256):
            batch = f_val[lo : lo + 256]
            val += bce_loss(dec.forward(enc.forward(batch)), batch, soft=True)[0] * len(batch)
        val /= len(f_val)
        history.append({"epoch": epoch, "val_loss": val})
        if val < best_loss:
            best_loss, stale = val, 0
            best = {k: v.copy() for k, v in params.items()}
        else:
            stale += 1
            if stale >= cfg.ae_patience:
                break
    for name, arr in params.items():
        arr[...] = best[name]
    return history


def train(cfg: RunConfig, data: PreparedData, train_idx, seed: Optional[int] = None):
    """Fit the configured model or baseline on the rows ``train_idx``."""
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if len(train_idx) == 0:
        raise FoldError("training fold is empty")
    seed = cfg.seed if seed is None else seed
    ds = data.dataset
    mean = mean_fit(data.cameras[train_idx], data.targets[train_idx])
    if cfg.is_baseline:
        pred = BaselinePredictor(cfg.model, ds.distances, mean)
        if cfg.model == "most_similar":
            pred.pool_tracks = data.tracks[train_idx]
            pred.pool_targets = data.targets[train_idx]
            pred.pool_cameras = data.cameras[train_idx]
        elif cfg.model == "handcrafted":
            pred.handcrafted = handcrafted_fit(
                data.cameras[train_idx], data.nan_tracks(train_idx), data.targets[train_idx],
                epochs=cfg.baseline_epochs, lr=cfg.learning_rate, seed=seed,
            )
        return pred
    registry = build_registry(model_spec(cfg, ds), seed)
    pred = LearnedPredictor(registry, fallback=mean)
    if registry.is_coordinate:
        for cam in sorted(registry.models):
            rows = train_idx[data.cameras[train_idx] == cam]
            if len(rows) == 0:
                log.info("no training departures from camera %d; it falls back to the training-set mean", cam)
                registry.models[cam] = None
                continue
            pred.histories[cam], pred.optimizers[cam] = _fit_rows(cfg, registry.models[cam], data.tracks, data.targets, rows, seed, cam)
    else:
        model = registry.model_for(0)
        pred.histories[None], pred.optimizers[None] = _fit_rows(cfg, model, data.tensors, data.targets, train_idx, seed, 0)
    return pred


def _fit_rows(cfg: RunConfig, model: MctfModel, x_all, y_all, rows, seed: int, stream: int):
    rng = np.random.default_rng([seed, stream])
    tr, va = _validation_split(len(rows), cfg.val_fraction, rng)
    x, y = x_all[rows[tr]], y_all[rows[tr]]
    x_val, y_val = (x_all[rows[va]], y_all[rows[va]]) if len(va) else (None, None)
    history = {}
    if model.ae_encoder is not None:
        history["autoencoder"] = pretrain_autoencoder(model, x, cfg, rng, x_val)
    history["train"], opt = fit_network(model, x, y, cfg, rng, x_val, y_val)
    return history, opt


# --- evaluation -------------------------------------------------------------------------------------


def score_predictions(pred: np.ndarray, gt: np.ndarray, task: str, fold: int = 0) -> tuple[FoldMetrics, Optional[PrCurve]]:
    """Micro-pooled task AP plus the per-sample overlap and displacement metrics."""
    fm = FoldMetrics(fold=fold, n_samples=len(gt))
    curve = None
    if len(gt) == 0:
        fm.skipped.append("no test samples")
        return fm, None
    try:
        setattr(fm, f"ap_{task}", average_precision(pred.ravel(), gt.ravel()))
        curve = pr_curve(pred.ravel(), gt.ravel()).subsample(CURVE_POINTS)
    except NoPositivesError:
        fm.skipped.append(f"ap_{task}: no positive labels")
    if task == "when":
        fm.siou_when = math.fsum(siou_when(p, g) for p, g in zip(pred, gt)) / len(gt)
    elif task == "where":
        fm.siou_where = math.fsum(siou_where(p, g) for p, g in zip(pred, gt)) / len(gt)
        errs = [displacement_errors(p, g) for p, g in zip(pred, gt)]
        fm.ade_where = math.fsum(e[0] for e in errs) / len(errs)
        fm.fde_where = math.fsum(e[1] for e in errs) / len(errs)
    return fm, curve


def evaluate(predictor, data: PreparedData, test_idx, fold: int = 0, single_view: bool = False):
    test_idx = np.asarray(test_idx, dtype=np.int64)
    if len(test_idx) == 0:
        return score_predictions(np.zeros((0,) + data.task_shape), data.targets[test_idx], data.task, fold)
    pred = predictor.predict(data, test_idx, single_view=single_view)
    return score_predictions(pred, data.targets[test_idx], data.task, fold)


@dataclass
class CrossValResult:
    report: MetricsReport
    curves: dict[int, PrCurve]
    predictors: dict[int, object]
    plan: FoldPlan
    single_view: Optional[MetricsReport] = None


def cross_validate(cfg: RunConfig, data: PreparedData, ablate: bool = False) -> CrossValResult:
    """Train and evaluate every day-split fold; every day is tested exactly once."""
    plan = make_fold_plan(data.days, cfg.folds, cfg.seed)
    folds, single, curves, predictors = [], [], {}, {}
    for fold in range(cfg.folds):
        train_idx, test_idx = plan.split(data.days, fold)
        log.info("fold %d: %d train / %d test samples", fold, len(train_idx), len(test_idx))
        predictor = train(cfg, data, train_idx, seed=cfg.seed + fold)
        fm, curve = evaluate(predictor, data, test_idx, fold)
        folds.append(fm)
        predictors[fold] = predictor
        if curve is not None:
            curves[fold] = curve
        if ablate:
            single.append(evaluate(predictor, data, test_idx, fold, single_view=True)[0])
    config = cfg.to_dict()
    return CrossValResult(
        MetricsReport(folds, config),
        curves,
        predictors,
        plan,
        MetricsReport(single, {**config, "input_view": "single"}) if ablate else None,
    )


def ablate_single_view(cfg: RunConfig, data: PreparedData) -> tuple[MetricsReport, MetricsReport]:
    """(multi-view, single-view) reports for the same trained weights per fold."""
    res = cross_validate(cfg, data, ablate=True)
    return res.report, res.single_view


def sweep(cfg: RunConfig, dataset: Dataset, sizes: Sequence[tuple[int, int]], sigmas: Sequence[float]) -> list[dict]:
    """Cross-validate every (heatmap size, sigma) cell; one row per cell."""
    rows = []
    for size in sizes:
        for sigma in sigmas:
            cell = cfg.replace(heatmap=tuple(size), sigma=float(sigma))
            res = cross_validate(cell, prepare_for(cell, dataset))
            rows.append({"w": cell.heatmap[0], "h": cell.heatmap[1], "sigma": cell.sigma,
                         f"ap_{cfg.task}": res.report.mean(f"ap_{cfg.task}")})
    return rows


# --- multi-target ------------------------------------------------------------------------------------


def _coordinate_forward(registry: ModelRegistry, sample, fallback: Optional[MeanModel]) -> np.ndarray:
    cam = sample.departure_camera
    model = registry.model_for(cam)
    if model is not None:
        return model.forward(sample.departure_track()[None])[0]
    if fallback is None:
        raise FoldError(f"camera {cam} has no trained model and no mean fallback")
    log.info("camera %d has no trained model, using the training-set mean", cam)
    return mean_predict(fallback, cam)


def predict_multi_target(
    registry: ModelRegistry, group: MultiTargetGroup, heatmap=(16, 9), sigma: float = 0.0,
    fallback: Optional[MeanModel] = None,
) -> np.ndarray:
    """Predictions for every target of a group, stacked along the batch axis.

    Tensor models run one batch-stacked forward pass; coordinate models run
    each target through its departure camera's model in turn.
    """
    spec = next(m for m in registry.models.values() if m is not None).spec
    if len(group) == 0:
        return np.zeros((0,) + spec.output_shape())
    if registry.is_coordinate:
        log.info("coordinate family %s: predicting %d targets sequentially", registry.family, len(group))
        return np.stack([_coordinate_forward(registry, s, fallback) for s in group.samples])
    x = group.stacked_inputs(heatmap[0], heatmap[1], sigma)
    return registry.model_for(0).forward(x)


def predict_sequential(
    registry: ModelRegistry, group: MultiTargetGroup, heatmap=(16, 9), sigma: float = 0.0,
    fallback: Optional[MeanModel] = None,
) -> np.ndarray:
    """Reference path: one forward pass per target."""
    spec = next(m for m in registry.models.values() if m is not None).spec
    if len(group) == 0:
        return np.zeros((0,) + spec.output_shape())
    outs = []
    for s in group.samples:
        if registry.is_coordinate:
            outs.append(_coordinate_forward(registry, s, fallback))
        else:
            outs.append(registry.model_for(0).forward(s.input_tensor(heatmap[0], heatmap[1], sigma)[None])[0])
    return np.stack(outs)


def load_predictor(cfg: RunConfig, data: PreparedData, train_idx, blocks: dict[str, np.ndarray]) -> LearnedPredictor:
    """Rebuild a learned predictor from saved weight blocks (optimizer state is ignored)."""
    if cfg.is_baseline:
        raise ConfigError("baselines have no weight files")
    registry = build_registry(model_spec(cfg, data.dataset), cfg.seed)
    mean = mean_fit(data.cameras[train_idx], data.targets[train_idx]) if len(train_idx) else None
    for cam, model in list(registry.models.items()):
        prefix = "" if cam is None else f"cam{cam}/"
        names = model.parameters()
        if not any(prefix + n in blocks for n in names):
            if cam is None:
                raise ConfigError("weight file does not match the configured model")
            registry.models[cam] = None
            continue
        try:
            model.load_parameters({n: blocks[prefix + n] for n in names})
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"weights do not match {cfg.model}/{cfg.task}: {exc}") from None
    return LearnedPredictor(registry, fallback=mean)


def check_dataset(dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise DatasetError("dataset has no samples")
