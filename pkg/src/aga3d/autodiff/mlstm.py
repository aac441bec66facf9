"""Matrix-memory LSTM (mLSTM) cell, layer and stacked blocks.

Recurrence, per step, with scalar gates.  ``i~`` is the log input gate
(a linear projection) and ``f~ = log sigmoid(w_f x + b_f)`` the log forget
gate, so the forget factor stays in (0, 1)::

    m_t = max(f~_t + m_{t-1}, i~_t)
    i'  = exp(i~_t - m_t),  f' = exp(f~_t + m_{t-1} - m_t)
    C_t = f' C_{t-1} + i' v_t k_t^T
    n_t = f' n_{t-1} + i' k_t
    h~_t = C_t q_t / max(|n_t^T q_t|, exp(-m_t))
    h_t = sigmoid(W_o x_t + b_o) * h~_t

The ``exp(-m_t)`` floor makes the stabilized readout identical to the
unstabilized one with floor 1.  The differentiable path uses the equivalent
parallel (quadratic) form in :func:`mlstm_core`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..errors import NumericalError, ShapeError
from . import ops
from ._kinks import record_pattern
from .tensor import Tensor, accumulate, as_tensor

__all__ = [
    "MlstmState",
    "init_mlstm_layer",
    "init_mlstm_stack",
    "mlstm_step",
    "mlstm_core",
    "mlstm_layer",
    "mlstm_block",
    "mlstm_sequence",
]

_PROJ = ("q", "k", "v", "o")


@dataclass
class MlstmState:
    C: np.ndarray
    n: np.ndarray
    m: np.ndarray

    @classmethod
    def zeros(cls, d_h, batch=None):
        lead = () if batch is None else (batch,)
        return cls(np.zeros(lead + (d_h, d_h)), np.zeros(lead + (d_h,)), np.zeros(lead))


def init_mlstm_layer(rng, d_in, d_h, prefix="", layer_norm=True):
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, forget bias +1, input bias -1."""
    bound = 1.0 / math.sqrt(d_in)
    p = {}
    if layer_norm:
        p[prefix + "ln_g"] = np.ones(d_in)
        p[prefix + "ln_b"] = np.zeros(d_in)
    for name in _PROJ:
        p[f"{prefix}W_{name}"] = rng.uniform(-bound, bound, (d_h, d_in))
        p[f"{prefix}b_{name}"] = np.zeros(d_h)
    p[prefix + "w_i"] = rng.uniform(-bound, bound, (1, d_in))
    p[prefix + "b_i"] = np.full(1, -1.0)
    p[prefix + "w_f"] = rng.uniform(-bound, bound, (1, d_in))
    p[prefix + "b_f"] = np.full(1, 1.0)
    return p


def init_mlstm_stack(rng, d_in, d_h, layers, prefix=""):
    p = {}
    for layer in range(layers):
        p.update(init_mlstm_layer(rng, d_in if layer == 0 else d_h, d_h, f"{prefix}l{layer}."))
    return p


def _val(p, key):
    v = p[key]
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


def mlstm_step(x_t, state, p, prefix=""):
    """One recurrent step on plain arrays; returns ``(h_t, new_state)``.

    ``x_t`` is ``(d_in,)`` or ``(B, d_in)``; the state must match.
    """
    x = np.asarray(x_t, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericalError("mlstm_step received non-finite input")
    wq, wk, wv, wo = (_val(p, f"{prefix}W_{n}") for n in _PROJ)
    bq, bk, bv, bo = (_val(p, f"{prefix}b_{n}") for n in _PROJ)
    d_h = wq.shape[0]
    if x.shape[-1] != wq.shape[1] or state.C.shape[-1] != d_h:
        raise ShapeError(f"mlstm_step: input {x.shape} / state {state.C.shape} vs weights {wq.shape}")
    q = x @ wq.T + bq
    k = (x @ wk.T + bk) / math.sqrt(d_h)
    v = x @ wv.T + bv
    ig = (x @ _val(p, prefix + "w_i").T + _val(p, prefix + "b_i"))[..., 0]
    fg = -np.logaddexp(0.0, -(x @ _val(p, prefix + "w_f").T + _val(p, prefix + "b_f"))[..., 0])
    m = np.maximum(fg + state.m, ig)
    i_ = np.exp(ig - m)
    f_ = np.exp(fg + state.m - m)
    C = f_[..., None, None] * state.C + i_[..., None, None] * (v[..., :, None] * k[..., None, :])
    n = f_[..., None] * state.n + i_[..., None] * k
    num = (C @ q[..., :, None])[..., 0]
    with np.errstate(over="ignore"):
        den = np.maximum(np.abs((n * q).sum(axis=-1)), np.exp(-m))
    h = expit(x @ wo.T + bo) * num / den[..., None]
    if not np.all(np.isfinite(h)):
        raise NumericalError("mlstm_step produced non-finite output")
    return h, MlstmState(C, n, m)


def mlstm_core(q, k, v, igate, fgate):
    """Parallel-form mLSTM readout ``h~`` for whole sequences.

    ``q, k, v``: (B, T, d) with ``k`` already scaled; ``igate, fgate``: (B, T)
    log input and log forget gates.
    The stabilizer is treated as a constant in the backward pass, which is
    exact because the output does not depend on it.
    """
    q, k, v, igate, fgate = (as_tensor(t) for t in (q, k, v, igate, fgate))
    if q.ndim != 3 or k.shape != q.shape or v.shape[:2] != q.shape[:2] or igate.shape != q.shape[:2] \
            or fgate.shape != q.shape[:2]:
        raise ShapeError(f"mlstm_core: q{q.shape} k{k.shape} v{v.shape} i{igate.shape} f{fgate.shape}")
    T = q.shape[1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    F = np.cumsum(fgate.data, axis=1)
    log_d = F[:, :, None] - F[:, None, :] + igate.data[:, None, :]
    log_d = np.where(causal, log_d, -np.inf)
    m = np.maximum(F, log_d.max(axis=-1))
    D = np.exp(log_d - m[..., None])
    S = q.data @ np.swapaxes(k.data, 1, 2)
    Ct = S * D
    bsum = Ct.sum(axis=-1)
    with np.errstate(over="ignore"):
        floor = np.exp(-m)
    use_b = np.abs(bsum) > floor
    den = np.where(use_b, np.abs(bsum), floor)
    N = Ct @ v.data
    H = N / den[..., None]
    record_pattern(use_b)

    def bw(g):
        dN = g / den[..., None]
        dden = -(g * H).sum(axis=-1) / den
        db = np.where(use_b, dden * np.sign(bsum), 0.0)
        dCt = dN @ np.swapaxes(v.data, 1, 2) + db[..., None]
        if v.requires_grad:
            accumulate(v, np.swapaxes(Ct, 1, 2) @ dN)
        dS = dCt * D
        if q.requires_grad:
            accumulate(q, dS @ k.data)
        if k.requires_grad:
            accumulate(k, np.swapaxes(dS, 1, 2) @ q.data)
        dlog = dCt * Ct  # d/dlogD of S*exp(logD - m)
        row = dlog.sum(axis=-1)
        col = dlog.sum(axis=-2)
        if igate.requires_grad:
            accumulate(igate, col)
        if fgate.requires_grad:
            dF = row - col
            accumulate(fgate, np.cumsum(dF[:, ::-1], axis=1)[:, ::-1])
    return ops._node(H, (q, k, v, igate, fgate), bw)


def mlstm_layer(x, p, prefix=""):
    """mLSTM over a (B, T, d_in) sequence tensor; returns (B, T, d_h)."""
    d_h = p[prefix + "W_q"].shape[0]
    q = ops.linear(x, p[prefix + "W_q"], p[prefix + "b_q"])
    k = ops.mul(ops.linear(x, p[prefix + "W_k"], p[prefix + "b_k"]), 1.0 / math.sqrt(d_h))
    v = ops.linear(x, p[prefix + "W_v"], p[prefix + "b_v"])
    shape = x.shape[:2]
    ig = ops.reshape(ops.linear(x, p[prefix + "w_i"], p[prefix + "b_i"]), shape)
    fg = ops.log_sigmoid(ops.reshape(ops.linear(x, p[prefix + "w_f"], p[prefix + "b_f"]), shape))
    h = mlstm_core(q, k, v, ig, fg)
    return ops.mul(ops.sigmoid(ops.linear(x, p[prefix + "W_o"], p[prefix + "b_o"])), h)


def mlstm_block(x, p, prefix=""):
    """Pre-layer-norm, mLSTM, and a residual add.

    When the block widens the features the shortcut is the input padded with
    zero channels, so the first block still passes activation magnitudes
    through (the layer norm on the mLSTM path removes them).  A narrowing
    block has no shortcut.
    """
    u = ops.layer_norm(x, p[prefix + "ln_g"], p[prefix + "ln_b"])
    h = mlstm_layer(u, p, prefix)
    d_in, d_h = x.shape[-1], h.shape[-1]
    if d_h == d_in:
        return ops.add(x, h)
    if d_h > d_in:
        pad = np.zeros(x.shape[:-1] + (d_h - d_in,))
        return ops.add(ops.concat([x, pad], axis=-1), h)
    return h


def mlstm_sequence(seq, p, layers=2, prefix=""):
    """Stacked mLSTM blocks over ``seq`` of shape (T, d_in) or (B, T, d_in)."""
    x = as_tensor(seq)
    squeeze = x.ndim == 2
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1] < 1:
        raise ShapeError(f"mlstm_sequence: expected (B, T, d), got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericalError("mlstm_sequence received non-finite input")
    for layer in range(layers):
        x = mlstm_block(x, p, f"{prefix}l{layer}.")
    if squeeze:
        x = ops.reshape(x, x.shape[1:])
    return x
