"""Layers with explicit forward/backward passes.

Every layer maps a batch ``(N, ...)`` to a batch ``(N, ...)``. Forward
matmuls are issued as stacked ``(N, P, K) @ (K, M)`` products so a sample's
output does not depend on what else is in the batch.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _pop_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def named_parameters(self, prefix: str = ""):
        for key in self.params:
            yield prefix + key, self, key

    def __repr__(self):
        return f"{type(self).__name__}()"


def _check_ndim(kind: str, x: np.ndarray, ndim: int, what: str):
    if x.ndim != ndim:
        raise ShapeError(f"{kind}: expected {what} (rank {ndim}), got shape {x.shape}")


class Dense(Layer):
    """Affine map over the last axis; leading axes after the batch are kept."""

    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng or np.random.default_rng(0)
        self.params["W"] = glorot_uniform(rng, (n_in, n_out), n_in, n_out)
        self.params["b"] = np.zeros(n_out)

    def forward(self, x):
        if x.ndim < 2 or x.shape[-1] != self.n_in:
            raise ShapeError(f"dense: expected (N, ..., {self.n_in}), got {x.shape}")
        n = x.shape[0]
        x3 = x.reshape(n, -1, self.n_in)
        out = np.matmul(x3, self.params["W"]) + self.params["b"]
        self._cache = x3
        return out.reshape(x.shape[:-1] + (self.n_out,))

    def backward(self, grad):
        x3 = self._pop_cache()
        g2 = grad.reshape(-1, self.n_out)
        self.grads["W"] = x3.reshape(-1, self.n_in).T @ g2
        self.grads["b"] = g2.sum(axis=0)
        return (g2 @ self.params["W"].T).reshape(grad.shape[:-1] + (self.n_in,))

    def __repr__(self):
        return f"Dense({self.n_in}, {self.n_out})"


# --- convolution --------------------------------------------------------------


def _lift(x: np.ndarray, ndim: int) -> np.ndarray:
    """View (N, C, *spatial[ndim]) as (N, C, D, H, W)."""
    return x.reshape(x.shape + (1,) * (3 - ndim))


def _im2col(xp: np.ndarray, k, s, out) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, k, axis=(2, 3, 4))
    win = win[:, :, :: s[0], :: s[1], :: s[2]][:, :, : out[0], : out[1], : out[2]]
    return win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n, out[0] * out[1] * out[2], c * k[0] * k[1] * k[2])


def _col2im(cols: np.ndarray, padded_shape, k, s, out) -> np.ndarray:
    n, c = padded_shape[:2]
    d = cols.reshape(n, out[0], out[1], out[2], c, k[0], k[1], k[2])
    d = np.ascontiguousarray(d.transpose(5, 6, 7, 0, 4, 1, 2, 3))
    xp = np.zeros(padded_shape)
    for a, b, e in itertools.product(range(k[0]), range(k[1]), range(k[2])):
        xp[
            :,
            :,
            a : a + s[0] * (out[0] - 1) + 1 : s[0],
            b : b + s[1] * (out[1] - 1) + 1 : s[1],
            e : e + s[2] * (out[2] - 1) + 1 : s[2],
        ] += d[a, b, e]
    return xp


def _pad(x: np.ndarray, p) -> np.ndarray:
    if not any(p):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((q, q) for q in p))


def _unpad(x: np.ndarray, p) -> np.ndarray:
    return x[:, :, p[0] : x.shape[2] - p[0], p[1] : x.shape[3] - p[1], p[2] : x.shape[4] - p[2]]


class _ConvBase(Layer):
    def __init__(self, ndim, c_in, c_out, kernel, stride, padding):
        super().__init__()
        self.ndim = ndim
        self.c_in, self.c_out = c_in, c_out
        self.kernel = _tuple(kernel, ndim)
        self.stride = _tuple(stride, ndim)
        if padding == "same":
            padding = tuple(k // 2 for k in self.kernel)
        self.padding = _tuple(padding, ndim)
        # 3D-lifted geometry
        self._k = self.kernel + (1,) * (3 - ndim)
        self._s = self.stride + (1,) * (3 - ndim)
        self._p = self.padding + (0,) * (3 - ndim)

    def _check_input(self, x, channels):
        if x.ndim != self.ndim + 2 or x.shape[1] != channels:
            raise ShapeError(
                f"{self.kind}: expected (N, {channels}, <{self.ndim} spatial dims>), got {x.shape}"
            )

    def __repr__(self):
        return (
            f"{type(self).__name__}({self.c_in}, {self.c_out}, kernel={self.kernel}, "
            f"stride={self.stride}, padding={self.padding})"
        )


class Conv(_ConvBase):
    """N-d convolution (cross-correlation) for N in 1..3. Weight shape ``(c_out, c_in, *kernel)``."""

    def __init__(self, ndim, c_in, c_out, kernel=3, stride=1, padding="same", rng=None, input_grad=True):
        super().__init__(ndim, c_in, c_out, kernel, stride, padding)
        self.kind = f"conv{ndim}d"
        # first layers of a network can skip the input gradient; backward then returns None
        self.input_grad = input_grad
        rng = rng or np.random.default_rng(0)
        kvol = math.prod(self.kernel)
        self.params["W"] = glorot_uniform(rng, (c_out, c_in) + self.kernel, c_in * kvol, c_out * kvol)
        self.params["b"] = np.zeros(c_out)

    def output_shape(self, spatial):
        return tuple((d + 2 * p - k) // s + 1 for d, k, s, p in zip(spatial, self.kernel, self.stride, self.padding))

    def forward(self, x):
        self._check_input(x, self.c_in)
        n = x.shape[0]
        sp = x.shape[2:]
        out_sp = self.output_shape(sp)
        if min(out_sp) < 1:
            raise ShapeError(f"{self.kind}: input {x.shape} too small for kernel {self.kernel}")
        out3 = out_sp + (1,) * (3 - self.ndim)
        xp = _pad(_lift(x, self.ndim), self._p)
        cols = _im2col(xp, self._k, self._s, out3)
        wmat = self.params["W"].reshape(self.c_out, -1).T
        y = np.matmul(cols, wmat) + self.params["b"]
        self._cache = (cols, xp.shape, out3, x.shape)
        return y.transpose(0, 2, 1).reshape((n, self.c_out) + out_sp)

    def backward(self, grad):
        cols, xp_shape, out3, x_shape = self._pop_cache()
        n = grad.shape[0]
        g = grad.reshape(n, self.c_out, -1).transpose(0, 2, 1)
        g2 = g.reshape(-1, self.c_out)
        self.grads["W"] = (cols.reshape(g2.shape[0], -1).T @ g2).T.reshape(self.params["W"].shape)
        self.grads["b"] = g2.sum(axis=0)
        if not self.input_grad:
            return None
        if self._s == (1, 1, 1) and all(k - 1 - p >= 0 for k, p in zip(self._k, self._p)):
            # stride 1: the input gradient is a full correlation with the flipped kernel
            lifted = grad.reshape(grad.shape + (1,) * (3 - self.ndim))
            gp = _pad(lifted, tuple(k - 1 - p for k, p in zip(self._k, self._p)))
            in3 = tuple(d - 2 * p for d, p in zip(xp_shape[2:], self._p))
            gcols = _im2col(gp, self._k, (1, 1, 1), in3)
            w = self.params["W"].reshape((self.c_out, self.c_in) + self._k)[:, :, ::-1, ::-1, ::-1]
            wf = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)).reshape(self.c_in, -1)
            dx = np.matmul(gcols, wf.T)
            return dx.transpose(0, 2, 1).reshape(x_shape)
        dcols = g @ self.params["W"].reshape(self.c_out, -1)
        dxp = _col2im(dcols, xp_shape, self._k, self._s, out3)
        return _unpad(dxp, self._p).reshape(x_shape)


class ConvTranspose(_ConvBase):
    """Transposed convolution: the adjoint of :class:`Conv` with the same geometry.

    Weight shape ``(c_in, c_out, *kernel)``; output length per axis is
    ``(d - 1) * stride + kernel - 2 * padding``.
    """

    def __init__(self, ndim, c_in, c_out, kernel=2, stride=2, padding=0, rng=None):
        super().__init__(ndim, c_in, c_out, kernel, stride, padding)
        self.kind = f"tconv{ndim}d"
        rng = rng or np.random.default_rng(0)
        kvol = math.prod(self.kernel)
        self.params["W"] = glorot_uniform(rng, (c_in, c_out) + self.kernel, c_in * kvol, c_out * kvol)
        self.params["b"] = np.zeros(c_out)

    def output_shape(self, spatial):
        return tuple((d - 1) * s + k - 2 * p for d, k, s, p in zip(spatial, self.kernel, self.stride, self.padding))

    def forward(self, x):
        self._check_input(x, self.c_in)
        n = x.shape[0]
        in_sp = x.shape[2:]
        out_sp = self.output_shape(in_sp)
        if min(out_sp) < 1:
            raise ShapeError(f"{self.kind}: output would be empty for input {x.shape}")
        in3 = in_sp + (1,) * (3 - self.ndim)
        padded = (n, self.c_out) + tuple(d + 2 * p for d, p in zip(out_sp + (1,) * (3 - self.ndim), self._p))
        y = x.reshape(n, self.c_in, -1).transpose(0, 2, 1)
        cols = np.matmul(y, self.params["W"].reshape(self.c_in, -1))
        out = _unpad(_col2im(cols, padded, self._k, self._s, in3), self._p)
        out = out + self.params["b"].reshape((1, -1, 1, 1, 1))
        self._cache = (y, padded, in3, x.shape)
        return out.reshape((n, self.c_out) + out_sp)

    def backward(self, grad):
        y, padded, in3, x_shape = self._pop_cache()
        n = grad.shape[0]
        self.grads["b"] = grad.reshape(n, self.c_out, -1).sum(axis=(0, 2))
        gp = _pad(_lift(grad, self.ndim), self._p)
        cols = _im2col(gp, self._k, self._s, in3)
        c2 = cols.reshape(-1, cols.shape[-1])
        self.grads["W"] = (y.reshape(-1, self.c_in).T @ c2).reshape(self.params["W"].shape)
        dy = cols @ self.params["W"].reshape(self.c_in, -1).T
        return dy.transpose(0, 2, 1).reshape(x_shape)


class MaxPool(Layer):
    """Max pooling with kernel 2 / stride 2 on every spatial axis of length >= 2.

    Axes of length 1 pass through; odd remainders are dropped.
    """

    kind = "maxpool"

    def __init__(self, ndim: int):
        super().__init__()
        self.ndim = ndim

    def forward(self, x):
        _check_ndim(self.kind, x, self.ndim + 2, f"(N, C, <{self.ndim} spatial dims>)")
        x3 = _lift(x, self.ndim)
        n, c = x3.shape[:2]
        k = tuple(2 if d >= 2 else 1 for d in x3.shape[2:])
        o = tuple(d // q for d, q in zip(x3.shape[2:], k))
        xc = x3[:, :, : o[0] * k[0], : o[1] * k[1], : o[2] * k[2]]
        r = xc.reshape(n, c, o[0], k[0], o[1], k[1], o[2], k[2]).transpose(0, 1, 2, 4, 6, 3, 5, 7)
        r = r.reshape(n, c, o[0], o[1], o[2], -1)
        idx = r.argmax(axis=-1)
        out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
        self._cache = (idx, k, o, x3.shape, x.shape)
        return out.reshape((n, c) + o[: self.ndim])

    def backward(self, grad):
        idx, k, o, shape3, x_shape = self._pop_cache()
        n, c = shape3[:2]
        onehot = np.zeros(idx.shape + (k[0] * k[1] * k[2],))
        np.put_along_axis(onehot, idx[..., None], grad.reshape(idx.shape)[..., None], axis=-1)
        g = onehot.reshape(n, c, o[0], o[1], o[2], k[0], k[1], k[2]).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        dx = np.zeros(shape3)
        dx[:, :, : o[0] * k[0], : o[1] * k[1], : o[2] * k[2]] = g.reshape(n, c, o[0] * k[0], o[1] * k[1], o[2] * k[2])
        return dx.reshape(x_shape)


# --- elementwise ----------------------------------------------------------------


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._pop_cache(), grad, 0.0)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        out = expit(x)
        self._cache = out
        return out

    def backward(self, grad):
        out = self._pop_cache()
        return grad * out * (1.0 - out)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x):
        out = np.tanh(x)
        self._cache = out
        return out

    def backward(self, grad):
        out = self._pop_cache()
        return grad * (1.0 - out * out)


# --- shape plumbing -----------------------------------------------------------------


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, *shape: int):
        super().__init__()
        self.shape = shape

    def forward(self, x):
        self._cache = x.shape
        try:
            return x.reshape((x.shape[0],) + self.shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {x.shape} as (N, {self.shape})") from None

    def backward(self, grad):
        return grad.reshape(self._pop_cache())


class Flatten(Reshape):
    kind = "flatten"

    def __init__(self):
        super().__init__(-1)


class Transpose(Layer):
    """Permute non-batch axes; ``axes`` are given over the full array and must keep 0 first."""

    kind = "transpose"

    def __init__(self, *axes: int):
        super().__init__()
        if axes[0] != 0:
            raise ValueError("the batch axis must stay first")
        self.axes = axes
        self.inverse = tuple(np.argsort(axes))

    def forward(self, x):
        if x.ndim != len(self.axes):
            raise ShapeError(f"transpose: expected rank {len(self.axes)}, got shape {x.shape}")
        self._cache = True
        return np.ascontiguousarray(x.transpose(self.axes))

    def backward(self, grad):
        self._pop_cache()
        return np.ascontiguousarray(grad.transpose(self.inverse))


class Crop(Layer):
    """Keep the leading ``sizes`` entries of the trailing axes."""

    kind = "crop"

    def __init__(self, *sizes: int):
        super().__init__()
        self.sizes = sizes

    def forward(self, x):
        lead = x.ndim - len(self.sizes)
        if lead < 1 or any(d < s for d, s in zip(x.shape[lead:], self.sizes)):
            raise ShapeError(f"crop: cannot crop {x.shape} to trailing {self.sizes}")
        self._cache = x.shape
        return x[(Ellipsis,) + tuple(slice(0, s) for s in self.sizes)]

    def backward(self, grad):
        shape = self._pop_cache()
        dx = np.zeros(shape)
        dx[(Ellipsis,) + tuple(slice(0, s) for s in self.sizes)] = grad
        return dx


class Repeat(Layer):
    """(N, D) -> (N, T, D) by copying along a new time axis."""

    kind = "repeat"

    def __init__(self, times: int):
        super().__init__()
        self.times = times

    def forward(self, x):
        _check_ndim(self.kind, x, 2, "(N, D)")
        self._cache = True
        return np.repeat(x[:, None, :], self.times, axis=1)

    def backward(self, grad):
        self._pop_cache()
        return grad.sum(axis=1)


class GlobalAvgPool(Layer):
    """Mean over all axes after the channel axis: (N, C, ...) -> (N, C)."""

    kind = "global_avg_pool"

    def forward(self, x):
        if x.ndim < 3:
            raise ShapeError(f"global_avg_pool: expected (N, C, ...), got {x.shape}")
        self._cache = x.shape
        n, c = x.shape[:2]
        return x.reshape(n, c, -1).mean(axis=2)

    def backward(self, grad):
        shape = self._pop_cache()
        count = math.prod(shape[2:])
        return np.broadcast_to((grad / count).reshape(grad.shape + (1,) * (len(shape) - 2)), shape).copy()
