"""GRU (Cho et al. convention) and LSTM cells plus an unrolled sequence layer."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .layers import Layer, ShapeError, glorot_uniform


def _rowmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # (N, K) @ (K, M) as a stacked product, one row per sample
    return np.matmul(a[:, None, :], b)[:, 0, :]


class GRUCell:
    """Parameters ``W`` (D, 3H), ``U`` (H, 3H), ``b`` (3H); gate order z, r, candidate."""

    n_gates = 3

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        d, h = input_size, hidden_size
        self.input_size, self.hidden_size = d, h
        self.params = {
            "W": glorot_uniform(rng, (d, 3 * h), d, h),
            "U": glorot_uniform(rng, (h, 3 * h), h, h),
            "b": np.zeros(3 * h),
        }


class LSTMCell:
    """Parameters ``W`` (D, 4H), ``U`` (H, 4H), ``b`` (4H); gate order i, f, g, o.

    The forget-gate bias starts at 1.
    """

    n_gates = 4

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        d, h = input_size, hidden_size
        self.input_size, self.hidden_size = d, h
        b = np.zeros(4 * h)
        b[h : 2 * h] = 1.0
        self.params = {
            "W": glorot_uniform(rng, (d, 4 * h), d, h),
            "U": glorot_uniform(rng, (h, 4 * h), h, h),
            "b": b,
        }


def _check_step(cell, h_prev, x):
    if x.shape[-1] != cell.input_size or h_prev.shape[-1] != cell.hidden_size:
        raise ShapeError(
            f"expected x (.., {cell.input_size}) and h (.., {cell.hidden_size}), got {x.shape} and {h_prev.shape}"
        )


def gru_step(cell: GRUCell, h_prev: np.ndarray, x: np.ndarray) -> np.ndarray:
    _check_step(cell, h_prev, x)
    h = cell.hidden_size
    h_prev2, x2 = np.atleast_2d(h_prev), np.atleast_2d(x)
    p = cell.params
    xw = _rowmm(x2, p["W"]) + p["b"]
    hu = _rowmm(h_prev2, p["U"][:, : 2 * h])
    z = expit(xw[:, :h] + hu[:, :h])
    r = expit(xw[:, h : 2 * h] + hu[:, h:])
    n = np.tanh(xw[:, 2 * h :] + _rowmm(r * h_prev2, p["U"][:, 2 * h :]))
    out = (1.0 - z) * h_prev2 + z * n
    return out.reshape(np.shape(h_prev))


def lstm_step(cell: LSTMCell, h_prev: np.ndarray, c_prev: np.ndarray, x: np.ndarray):
    """Returns ``(h_next, c_next)``."""
    _check_step(cell, h_prev, x)
    h = cell.hidden_size
    p = cell.params
    h2, c2, x2 = np.atleast_2d(h_prev), np.atleast_2d(c_prev), np.atleast_2d(x)
    a = _rowmm(x2, p["W"]) + _rowmm(h2, p["U"]) + p["b"]
    i, f, o = expit(a[:, :h]), expit(a[:, h : 2 * h]), expit(a[:, 3 * h :])
    g = np.tanh(a[:, 2 * h : 3 * h])
    c = f * c2 + i * g
    hn = o * np.tanh(c)
    return hn.reshape(np.shape(h_prev)), c.reshape(np.shape(c_prev))


class Recurrent(Layer):
    """Unrolled GRU or LSTM over (N, T, D) with zero initial state.

    Returns every hidden state (N, T, H) or only the last one (N, H).
    """

    def __init__(self, cell_type: str, input_size: int, hidden_size: int, return_sequences=False, rng=None):
        super().__init__()
        if cell_type == "gru":
            self.cell = GRUCell(input_size, hidden_size, rng)
        elif cell_type == "lstm":
            self.cell = LSTMCell(input_size, hidden_size, rng)
        else:
            raise ValueError(f"unknown cell type {cell_type!r}")
        self.kind = f"{cell_type}_cell"
        self.cell_type = cell_type
        self.return_sequences = return_sequences
        self.params = self.cell.params

    def __repr__(self):
        return f"Recurrent({self.cell_type!r}, {self.cell.input_size}, {self.cell.hidden_size}, seq={self.return_sequences})"

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.cell.input_size:
            raise ShapeError(f"{self.kind}: expected (N, T, {self.cell.input_size}), got {x.shape}")
        if self.cell_type == "gru":
            hs, cache = self._gru_forward(x)
        else:
            hs, cache = self._lstm_forward(x)
        self._cache = (x, cache)
        return hs if self.return_sequences else hs[:, -1]

    def backward(self, grad):
        x, cache = self._pop_cache()
        n, t, _ = x.shape
        hdim = self.cell.hidden_size
        if self.return_sequences:
            dhs = grad
        else:
            dhs = np.zeros((n, t, hdim))
            dhs[:, -1] = grad
        if self.cell_type == "gru":
            dxw = self._gru_backward(dhs, cache)
        else:
            dxw = self._lstm_backward(dhs, cache)
        p = self.params
        self.grads["W"] = x.reshape(n * t, -1).T @ dxw.reshape(n * t, -1)
        self.grads["b"] = dxw.sum(axis=(0, 1))
        return dxw @ p["W"].T

    # -- GRU

    def _gru_forward(self, x):
        n, t, _ = x.shape
        h = self.cell.hidden_size
        p = self.params
        xw = np.matmul(x, p["W"]) + p["b"]
        u_zr, u_n = p["U"][:, : 2 * h], p["U"][:, 2 * h :]
        hprev = np.zeros((n, h))
        hs = np.empty((n, t, h))
        steps = []
        for i in range(t):
            hu = _rowmm(hprev, u_zr)
            z = expit(xw[:, i, :h] + hu[:, :h])
            r = expit(xw[:, i, h : 2 * h] + hu[:, h:])
            rh = r * hprev
            cand = np.tanh(xw[:, i, 2 * h :] + _rowmm(rh, u_n))
            hnew = (1.0 - z) * hprev + z * cand
            steps.append((hprev, z, r, rh, cand))
            hs[:, i] = hnew
            hprev = hnew
        return hs, steps

    def _gru_backward(self, dhs, steps):
        n, t, h = dhs.shape
        u = self.params["U"]
        u_zr, u_n = u[:, : 2 * h], u[:, 2 * h :]
        dU = np.zeros_like(u)
        dxw = np.empty((n, t, 3 * h))
        dh = np.zeros((n, h))
        for i in reversed(range(t)):
            hprev, z, r, rh, cand = steps[i]
            dh = dh + dhs[:, i]
            dcand = dh * z
            dz = dh * (cand - hprev)
            dhprev = dh * (1.0 - z)
            da_n = dcand * (1.0 - cand * cand)
            drh = da_n @ u_n.T
            dr = drh * hprev
            dhprev += drh * r
            da_z = dz * z * (1.0 - z)
            da_r = dr * r * (1.0 - r)
            da_zr = np.concatenate([da_z, da_r], axis=1)
            dhprev += da_zr @ u_zr.T
            dU[:, : 2 * h] += hprev.T @ da_zr
            dU[:, 2 * h :] += rh.T @ da_n
            dxw[:, i, : 2 * h] = da_zr
            dxw[:, i, 2 * h :] = da_n
            dh = dhprev
        self.grads["U"] = dU
        return dxw

    # -- LSTM

    def _lstm_forward(self, x):
        n, t, _ = x.shape
        h = self.cell.hidden_size
        p = self.params
        xw = np.matmul(x, p["W"]) + p["b"]
        hprev = np.zeros((n, h))
        cprev = np.zeros((n, h))
        hs = np.empty((n, t, h))
        steps = []
        for s in range(t):
            a = xw[:, s] + _rowmm(hprev, p["U"])
            i, f, o = expit(a[:, :h]), expit(a[:, h : 2 * h]), expit(a[:, 3 * h :])
            g = np.tanh(a[:, 2 * h : 3 * h])
            c = f * cprev + i * g
            tc = np.tanh(c)
            hnew = o * tc
            steps.append((hprev, cprev, i, f, g, o, tc))
            hs[:, s] = hnew
            hprev, cprev = hnew, c
        return hs, steps

    def _lstm_backward(self, dhs, steps):
        n, t, h = dhs.shape
        u = self.params["U"]
        dU = np.zeros_like(u)
        dxw = np.empty((n, t, 4 * h))
        dh = np.zeros((n, h))
        dc = np.zeros((n, h))
        for s in reversed(range(t)):
            hprev, cprev, i, f, g, o, tc = steps[s]
            dh = dh + dhs[:, s]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            da = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * cprev * f * (1.0 - f),
                    dc * i * (1.0 - g * g),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            dU += hprev.T @ da
            dxw[:, s] = da
            dh = da @ u.T
            dc = dc * f
        self.grads["U"] = dU
        return dxw
