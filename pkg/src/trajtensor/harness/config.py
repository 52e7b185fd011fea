"""Run configuration: TOML file with ``[run]``, ``[input]``, ``[training]``,
``[model]`` and ``[scenario]`` sections."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..datagen import ConfigError
from ..models import COORDINATE_FAMILIES, FAMILIES, TASKS

BASELINES = ("shortest_distance", "mean", "most_similar", "handcrafted")
HEATMAP_SIZES = ((16, 9), (32, 18), (48, 27))
SIGMA_RANGE = (0.0, 4.0)


@dataclass(frozen=True)
class RunConfig:
    model: str = "cnn3d"
    task: str = "which"
    dataset: str = ""
    seed: int = 0
    folds: int = 5
    heatmap: tuple[int, int] = (16, 9)
    sigma: float = 0.0
    lr: Optional[float] = None
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.1
    ae_max_epochs: int = 50
    ae_patience: int = 5
    ae_lr: float = 1e-3
    baseline_epochs: int = 200
    model_options: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "heatmap", tuple(int(v) for v in self.heatmap))
        if self.model not in FAMILIES + BASELINES:
            raise ConfigError(f"unknown model {self.model!r}; choose from {FAMILIES + BASELINES}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.model == "shortest_distance" and self.task != "which":
            raise ConfigError("the shortest-distance baseline only predicts which")
        if self.heatmap not in HEATMAP_SIZES:
            raise ConfigError(f"heatmap size {self.heatmap} not one of {HEATMAP_SIZES}")
        if not SIGMA_RANGE[0] <= self.sigma <= SIGMA_RANGE[1]:
            raise ConfigError(f"sigma {self.sigma} outside {list(SIGMA_RANGE)}")
        if (self.lr is not None and self.lr < 0) or self.ae_lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size and patience must be positive, max_epochs non-negative")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.folds < 2:
            raise ConfigError("need at least 2 folds")
        unknown = set(self.model_options) - {"channels", "decoder_hidden", "decoder_channels", "code_size", "feature_size"}
        if unknown:
            raise ConfigError(f"unknown model options {sorted(unknown)}")

    @property
    def is_baseline(self) -> bool:
        return self.model in BASELINES

    @property
    def is_coordinate(self) -> bool:
        return self.model in COORDINATE_FAMILIES

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-3 if self.is_coordinate or self.is_baseline else 1e-4

    def replace(self, **changes) -> "RunConfig":
        return RunConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heatmap"] = list(self.heatmap)
        d["lr"] = self.learning_rate
        d["model_options"] = {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.model_options.items())}
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


_SECTIONS = {
    "run": {"model", "task", "dataset", "seed", "folds"},
    "input": {"heatmap", "sigma"},
    "training": {"lr", "batch_size", "max_epochs", "patience", "val_fraction", "ae_max_epochs", "ae_patience", "ae_lr", "baseline_epochs"},
}


TOP_LEVEL = set(_SECTIONS) | {"model", "scenario", "sweep"}


def run_config_from_dict(doc: dict, base_dir: Optional[Path] = None) -> RunConfig:
    unknown = set(doc) - TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    kwargs: dict = {}
    for section, keys in _SECTIONS.items():
        body = doc.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        extra = set(body) - keys
        if extra:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
        kwargs.update(body)
    if "model" in doc:
        if not isinstance(doc["model"], dict):
            raise ConfigError("[model] must be a table")
        opts = dict(doc["model"])
        if "channels" in opts:
            opts["channels"] = tuple(opts["channels"])
        kwargs["model_options"] = opts
    if base_dir is not None and kwargs.get("dataset") and not Path(kwargs["dataset"]).is_absolute():
        kwargs["dataset"] = str((base_dir / kwargs["dataset"]).resolve())
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_run_config(path: str | Path, **overrides) -> RunConfig:
    doc = load_toml(path)
    cfg = run_config_from_dict(doc, Path(path).parent)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**overrides) if overrides else cfg
