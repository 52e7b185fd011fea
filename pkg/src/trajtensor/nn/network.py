from __future__ import annotations

import numpy as np

from .layers import Layer, ShapeError


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
            if grad is None:
                # layers before an input-gradient opt-out must be parameter-free
                break
        return grad

    def named_parameters(self, prefix: str = ""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}{i}.")

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def __repr__(self):
        inner = ",\n  ".join(repr(l) for l in self.layers)
        return f"Sequential(\n  {inner}\n)"


class TimeDistributed(Layer):
    """Apply ``inner`` independently to every step of (N, T, ...)."""

    kind = "time_distributed"

    def __init__(self, inner: Layer):
        super().__init__()
        self.inner = inner

    def forward(self, x):
        if x.ndim < 3:
            raise ShapeError(f"time_distributed: expected (N, T, ...), got {x.shape}")
        n, t = x.shape[:2]
        y = self.inner.forward(x.reshape((n * t,) + x.shape[2:]))
        self._cache = (n, t)
        return y.reshape((n, t) + y.shape[1:])

    def backward(self, grad):
        n, t = self._pop_cache()
        dx = self.inner.backward(grad.reshape((n * t,) + grad.shape[2:]))
        if dx is None:
            return None
        return dx.reshape((n, t) + dx.shape[1:])

    def named_parameters(self, prefix: str = ""):
        yield from self.inner.named_parameters(prefix + "td.")

    def __repr__(self):
        return f"TimeDistributed({self.inner!r})"


def parameters(net: Layer) -> dict[str, np.ndarray]:
    return {name: layer.params[key] for name, layer, key in net.named_parameters()}


def gradients(net: Layer) -> dict[str, np.ndarray]:
    return {name: layer.grads[key] for name, layer, key in net.named_parameters()}


def load_parameters(net: Layer, values: dict[str, np.ndarray], strict: bool = True) -> None:
    """Copy ``values`` into the network's parameter arrays in place."""
    seen = set()
    for name, layer, key in net.named_parameters():
        if name not in values:
            if strict:
                raise KeyError(f"missing parameter {name!r}")
            continue
        target = layer.params[key]
        src = np.asarray(values[name], dtype=np.float64)
        if src.shape != target.shape:
            raise ShapeError(f"parameter {name!r}: expected {target.shape}, got {src.shape}")
        target[...] = src
        seen.add(name)
    if strict:
        extra = set(values) - seen
        if extra:
            raise KeyError(f"unexpected parameters: {sorted(extra)[:5]}")


def parameter_count(net: Layer) -> int:
    return sum(arr.size for arr in parameters(net).values())
