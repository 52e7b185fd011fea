from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .layers import Layer
from .optim import bce_loss


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    kinks: int = 0  # entries re-measured at a finer step

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tolerance}

    def __str__(self):
        lines = [
            f"grad_check {'PASS' if self.passed else 'FAIL'} "
            f"(tol {self.tolerance:g}, max {self.max_error:.3g}, kinks {self.kinks})"
        ]
        lines += [f"  {name}: {err:.3g}" for name, err in self.errors.items()]
        return "\n".join(lines)


def _block_error(analytic: np.ndarray, numeric: np.ndarray, scale: float) -> float:
    denom = max(scale, float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / denom


def grad_check(
    network: Layer,
    x: np.ndarray,
    tolerance: float = 1e-4,
    target: Optional[np.ndarray] = None,
    step: float = 1e-4,
    max_entries: Optional[int] = 24,
    check_input: bool = True,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() against central differences.

    The scalar loss is BCE against ``target`` when given, otherwise a fixed
    random projection of the output. Each parameter block's error is the max
    absolute deviation divided by the block's largest gradient magnitude; at
    most ``max_entries`` randomly chosen entries per block are perturbed.

    An entry whose central difference misses and whose two one-sided slopes
    disagree has a ReLU or max-pool switch inside the step; it is measured
    again with a step 1000 times smaller. A wrong analytic gradient still
    fails at the finer step.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    out = network.forward(x)
    if target is None:
        proj = rng.standard_normal(out.shape)

        def loss_fn(y):
            return float(np.sum(y * proj)), proj
    else:

        def loss_fn(y):
            return bce_loss(y, target)

    _, g = loss_fn(out)
    dx = network.backward(g)

    blocks: list[tuple[str, np.ndarray, np.ndarray]] = []
    for name, layer, key in network.named_parameters():
        blocks.append((name, layer.params[key], layer.grads[key].copy()))
    if check_input and dx is not None:  # None when the first layer skips its input gradient
        blocks.append(("input", x, dx.copy()))

    def f() -> float:
        return loss_fn(network.forward(x))[0]

    def central(flat, i, h) -> tuple[float, float]:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        return (fp - fm) / (2 * h), fp + fm

    f0 = f()
    report = GradCheckReport(tolerance)
    for name, arr, analytic in blocks:
        flat = arr.reshape(-1)
        if flat.size == 0:
            continue
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        picked = analytic.reshape(-1)[idx]
        scale = float(np.max(np.abs(analytic)))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            numeric[j], pm_sum = central(flat, i, step)
            denom = max(scale, abs(numeric[j]), 1e-12)
            # one-sided slopes differ by |fp + fm - 2 f0| / step
            if abs(picked[j] - numeric[j]) >= tolerance * denom and abs(pm_sum - 2 * f0) / step >= tolerance * denom:
                numeric[j] = central(flat, i, step * 1e-3)[0]
                report.kinks += 1
        report.errors[name] = _block_error(picked, numeric, scale)
    return report


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of ``f`` with respect to every entry of ``arr``."""
    flat = arr.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(arr.shape)
