from __future__ import annotations

import numpy as np

from .layers import ShapeError

BCE_EPS = 1e-7


def bce_loss(pred, target, soft: bool = False) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient with respect to ``pred``.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]`` inside the logarithms;
    the gradient passes straight through the clamp. Targets must be 0/1
    unless ``soft`` is set (autoencoder reconstruction of smoothed maps).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"bce: prediction {pred.shape} vs target {target.shape}")
    if soft:
        if np.any((target < 0) | (target > 1)):
            raise ValueError("bce: soft targets must lie in [0, 1]")
    elif not np.all((target == 0) | (target == 1)):
        raise ValueError("bce: targets must be 0 or 1")
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    loss = -np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    grad = (p - target) / (p * (1.0 - p)) / pred.size
    return float(loss), grad


class Adam:
    """Bias-corrected Adam over a dict of named parameter arrays (updated in place)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"adam: gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"{name}.adam_m"] = self.m[name]
            out[f"{name}.adam_v"] = self.v[name]
        out["adam.step"] = np.array(float(self.step_count))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays.get("adam.step", 0))
        for key, arr in arrays.items():
            if key.endswith(".adam_m"):
                self.m[key[: -len(".adam_m")]] = np.array(arr, dtype=np.float64)
            elif key.endswith(".adam_v"):
                self.v[key[: -len(".adam_v")]] = np.array(arr, dtype=np.float64)


def adam_step(state: Adam, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    state.step(params, grads)
    return params
