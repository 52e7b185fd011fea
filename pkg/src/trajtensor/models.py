"""MCTF architectures: two coordinate-trajectory families (plus an LSTM
variant) and three trajectory-tensor families, each with a which, when or
where head.

Shapes (batch first):

* coordinate input ``(N, n, 4)``: the departure camera's boxes, zeros when missing
* tensor input ``(N, k, n, w, h)``
* outputs ``(N, k)``, ``(N, k, m)`` and ``(N, k, m, 16, 9)``
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .nn import (
    Conv,
    ConvTranspose,
    Crop,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool,
    Recurrent,
    ReLU,
    Repeat,
    Reshape,
    Sequential,
    ShapeError,
    Sigmoid,
    TimeDistributed,
    Transpose,
)

COORDINATE_FAMILIES = ("gru", "lstm", "cnn1d")
TENSOR_FAMILIES = ("cnn2d1d", "cnn3d", "cnn_gru")
FAMILIES = COORDINATE_FAMILIES + TENSOR_FAMILIES
TASKS = ("which", "when", "where")
RECURRENT_DECODER = ("gru", "lstm", "cnn_gru")

TARGET_W, TARGET_H = 16, 9
# per-step where latent: channels x 4 x 3, upsampled x4 then cropped to 16 x 9
STEP_LATENT = (8, 4, 3)
DEFAULT_CHANNELS = {
    "cnn1d": (32, 64, 128),
    "cnn3d": (32, 64, 128, 256),
    "cnn2d1d": (32, 64, 128, 128, 256, 256),
    "cnn_gru": (16, 32),
}


@dataclass(frozen=True)
class ModelSpec:
    family: str
    task: str
    k: int
    m: int = 60
    n: int = 10
    w: int = 16
    h: int = 9
    feature_size: Optional[int] = None
    camera: Optional[int] = None
    channels: Optional[tuple[int, ...]] = None
    decoder_hidden: int = 128
    decoder_channels: int = 32
    code_size: int = 128

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.is_coordinate:
            if self.camera is None or not 1 <= self.camera <= self.k:
                raise ValueError(f"{self.family} models are bound to a departure camera in 1..{self.k}")
        elif self.camera is not None:
            raise ValueError(f"{self.family} is a single unified model; it takes no camera binding")
        if self.m % 4:
            raise ValueError(f"horizon m={self.m} must be a multiple of 4")
        if self.channels is not None:
            object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def is_coordinate(self) -> bool:
        return self.family in COORDINATE_FAMILIES

    @property
    def features(self) -> int:
        if self.feature_size is not None:
            return self.feature_size
        return 128 if self.is_coordinate else 512

    @property
    def widths(self) -> tuple[int, ...]:
        if self.channels is not None:
            return self.channels
        return DEFAULT_CHANNELS.get(self.family, ())

    def input_shape(self) -> tuple[int, ...]:
        if self.is_coordinate:
            return (self.n, 4)
        return (self.k, self.n, self.w, self.h)

    def output_shape(self) -> tuple[int, ...]:
        return {
            "which": (self.k,),
            "when": (self.k, self.m),
            "where": (self.k, self.m, TARGET_W, TARGET_H),
        }[self.task]

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["channels"] is not None:
            d["channels"] = list(d["channels"])
        return d


# --- encoders -------------------------------------------------------------------


def _infer_shape(net: Sequential, shape) -> tuple[int, ...]:
    return net.forward(np.zeros((1,) + tuple(shape))).shape[1:]


def _coordinate_encoder(spec: ModelSpec, rng) -> Sequential:
    f = spec.features
    if spec.family in ("gru", "lstm"):
        return Sequential(Recurrent(spec.family, 4, f, rng=rng))
    c1, c2 = spec.widths[:2]
    return Sequential(
        Transpose(0, 2, 1),
        Conv(1, 4, c1, rng=rng, input_grad=False), ReLU(),
        Conv(1, c1, c2, rng=rng), ReLU(),
        Conv(1, c2, f, rng=rng), ReLU(),
        GlobalAvgPool(),
    )


def _cnn3d_encoder(spec: ModelSpec, rng) -> Sequential:
    layers, c_in = [], spec.k
    for i, c in enumerate(spec.widths):
        layers += [Conv(3, c_in, c, rng=rng, input_grad=i > 0), ReLU(), MaxPool(3)]
        c_in = c
    layers += [GlobalAvgPool(), Dense(c_in, spec.features, rng), ReLU()]
    return Sequential(*layers)


def _cnn2d1d_encoder(spec: ModelSpec, rng) -> Sequential:
    spatial, temporal = spec.widths[:3], spec.widths[3:]
    per_step, c_in = [], spec.k
    for i, c in enumerate(spatial):
        per_step += [Conv(2, c_in, c, rng=rng, input_grad=i > 0), ReLU(), MaxPool(2)]
        c_in = c
    per_step.append(GlobalAvgPool())
    layers = [Transpose(0, 2, 1, 3, 4), TimeDistributed(Sequential(*per_step)), Transpose(0, 2, 1)]
    for c in temporal:
        layers += [Conv(1, c_in, c, rng=rng), ReLU(), MaxPool(1)]
        c_in = c
    layers += [GlobalAvgPool(), Dense(c_in, spec.features, rng), ReLU()]
    return Sequential(*layers)


def autoencoder_parts(spec: ModelSpec, rng) -> tuple[Sequential, Sequential]:
    """Per-timestep convolutional autoencoder ``(k, w, h) -> code -> (k, w, h)``."""
    c1, c2 = spec.widths[:2]
    conv = Sequential(
        Conv(2, spec.k, c1, rng=rng, input_grad=False), ReLU(), MaxPool(2),
        Conv(2, c1, c2, rng=rng), ReLU(), MaxPool(2),
        Flatten(),
    )
    flat = _infer_shape(conv, (spec.k, spec.w, spec.h))[0]
    encoder = Sequential(*conv.layers, Dense(flat, spec.code_size, rng))
    cw, ch = math.ceil(spec.w / 4), math.ceil(spec.h / 4)
    decoder = Sequential(
        Dense(spec.code_size, 8 * cw * ch, rng), ReLU(),
        Reshape(8, cw, ch),
        ConvTranspose(2, 8, 8, 2, 2, rng=rng), ReLU(),
        ConvTranspose(2, 8, spec.k, 2, 2, rng=rng),
        Crop(spec.w, spec.h),
        Sigmoid(),
    )
    return encoder, decoder


def _cnn_gru_encoder(spec: ModelSpec, step_encoder: Sequential, rng) -> Sequential:
    return Sequential(
        Transpose(0, 2, 1, 3, 4),
        TimeDistributed(step_encoder),
        Recurrent("gru", spec.code_size, spec.features, rng=rng),
    )


# --- heads --------------------------------------------------------------------------


def _step_upsampler(spec: ModelSpec, rng) -> TimeDistributed:
    c, _, _ = STEP_LATENT
    return TimeDistributed(
        Sequential(
            Reshape(*STEP_LATENT),
            ConvTranspose(2, c, c, 2, 2, rng=rng), ReLU(),
            ConvTranspose(2, c, spec.k, 2, 2, rng=rng),
            Crop(TARGET_W, TARGET_H),
        )
    )


def _temporal_deconv(spec: ModelSpec, out_channels: int, rng) -> list:
    f, c, q = spec.features, spec.decoder_channels, spec.m // 4
    return [
        Reshape(f, 1),
        ConvTranspose(1, f, c, q, q, rng=rng), ReLU(),
        ConvTranspose(1, c, c, 2, 2, rng=rng), ReLU(),
        ConvTranspose(1, c, c, 2, 2, rng=rng), ReLU(),
        ConvTranspose(1, c, out_channels, 3, 1, 1, rng=rng),
    ]


def _head(spec: ModelSpec, rng) -> Sequential:
    f, k, m = spec.features, spec.k, spec.m
    latent = math.prod(STEP_LATENT)
    if spec.task == "which":
        return Sequential(Dense(f, k, rng), Sigmoid())
    if spec.family in RECURRENT_DECODER:
        cell = "lstm" if spec.family == "lstm" else "gru"
        rnn = [Repeat(m), Recurrent(cell, f, spec.decoder_hidden, return_sequences=True, rng=rng)]
        if spec.task == "when":
            return Sequential(*rnn, Dense(spec.decoder_hidden, k, rng), Transpose(0, 2, 1), Sigmoid())
        return Sequential(
            *rnn,
            Dense(spec.decoder_hidden, latent, rng), ReLU(),
            _step_upsampler(spec, rng),
            Transpose(0, 2, 1, 3, 4),
            Sigmoid(),
        )
    if spec.task == "when":
        return Sequential(*_temporal_deconv(spec, k, rng), Sigmoid())
    if spec.family == "cnn3d":
        c0 = 4
        return Sequential(
            Dense(f, c0 * (m // 4) * 4 * 3, rng), ReLU(),
            Reshape(c0, m // 4, 4, 3),
            ConvTranspose(3, c0, 8, 2, 2, rng=rng), ReLU(),
            ConvTranspose(3, 8, k, 2, 2, rng=rng),
            Crop(m, TARGET_W, TARGET_H),
            Sigmoid(),
        )
    return Sequential(
        *_temporal_deconv(spec, latent, rng), ReLU(),
        Transpose(0, 2, 1),
        _step_upsampler(spec, rng),
        Transpose(0, 2, 1, 3, 4),
        Sigmoid(),
    )


class MctfModel:
    """Encoder + task head. CNN-GRU models also carry an autoencoder decoder."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator | int | None = None):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.spec = spec
        self.ae_encoder = self.ae_decoder = None
        if spec.is_coordinate:
            self.encoder = _coordinate_encoder(spec, rng)
        elif spec.family == "cnn3d":
            self.encoder = _cnn3d_encoder(spec, rng)
        elif spec.family == "cnn2d1d":
            self.encoder = _cnn2d1d_encoder(spec, rng)
        else:
            self.ae_encoder, self.ae_decoder = autoencoder_parts(spec, rng)
            self.encoder = _cnn_gru_encoder(spec, self.ae_encoder, rng)
        self.head = _head(spec, rng)
        self.net = Sequential(self.encoder, self.head)

    def _check(self, x):
        want = self.spec.input_shape()
        if x.ndim != len(want) + 1 or x.shape[1:] != want:
            raise ShapeError(f"{self.spec.family}: expected input (N, {', '.join(map(str, want))}), got {x.shape}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        return self.net.forward(x)

    def backward(self, grad: np.ndarray):
        return self.net.backward(grad)

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        return self.encoder.forward(x)

    def decode(self, feature: np.ndarray) -> np.ndarray:
        return self.head.forward(np.asarray(feature, dtype=np.float64))

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        if len(x) == 0:
            return np.zeros((0,) + self.spec.output_shape())
        return np.concatenate([self.net.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])

    def named_parameters(self, prefix: str = ""):
        yield from self.net.named_parameters(prefix)
        if self.ae_decoder is not None:
            yield from self.ae_decoder.named_parameters(prefix + "ae.")

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: layer.params[key] for name, layer, key in self.named_parameters()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: layer.grads[key] for name, layer, key in self.named_parameters()}

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, arr in params.items():
            src = np.asarray(values[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise ShapeError(f"parameter {name!r}: expected {arr.shape}, got {src.shape}")
            arr[...] = src

    def parameter_count(self) -> int:
        return sum(a.size for a in self.parameters().values())


@dataclass
class ModelRegistry:
    """One model per departure camera for coordinate families, one in total otherwise.

    A camera's entry is None when it had no training departures."""

    family: str
    task: str
    models: dict[Optional[int], Optional[MctfModel]] = field(default_factory=dict)

    @property
    def is_coordinate(self) -> bool:
        return self.family in COORDINATE_FAMILIES

    def model_for(self, camera: int) -> MctfModel:
        return self.models[camera if self.is_coordinate else None]

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for cam, model in self.models.items():
            if model is None:
                continue
            prefix = "" if cam is None else f"cam{cam}/"
            for name, arr in model.parameters().items():
                out[prefix + name] = arr
        return out


def build_registry(spec: ModelSpec, seed: int = 0) -> ModelRegistry:
    """Instantiate the model set for ``spec`` (its ``camera`` field is ignored)."""
    reg = ModelRegistry(spec.family, spec.task)
    ss = np.random.SeedSequence(seed)
    if spec.family in COORDINATE_FAMILIES:
        for cam, child in zip(range(1, spec.k + 1), ss.spawn(spec.k)):
            cam_spec = ModelSpec(**{**spec.to_dict(), "camera": cam})
            reg.models[cam] = MctfModel(cam_spec, np.random.default_rng(child))
    else:
        reg.models[None] = MctfModel(ModelSpec(**{**spec.to_dict(), "camera": None}), np.random.default_rng(ss))
    return reg


def single_view_mask(z: np.ndarray, keep_camera: int) -> np.ndarray:
    """Zero every camera slice of a ``(k, t, w, h)`` tensor except ``keep_camera`` (1-based)."""
    z = np.asarray(z)
    k = z.shape[0]
    if not 1 <= keep_camera <= k:
        raise ValueError(f"keep_camera {keep_camera} outside 1..{k}")
    out = np.zeros_like(z)
    out[keep_camera - 1] = z[keep_camera - 1]
    return out


__all__ = [
    "COORDINATE_FAMILIES", "FAMILIES", "MctfModel", "ModelRegistry", "ModelSpec", "TASKS",
    "TENSOR_FAMILIES", "autoencoder_parts", "build_registry", "single_view_mask",
]
