"""Differentiable operations on :class:`Tensor`.

Every op takes tensors (or array-likes, treated as constants) and returns a
new tensor whose backward closure accumulates into its inputs.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ShapeError
from ._kinks import record_pattern
from .tensor import Tensor, accumulate, as_tensor

__all__ = [
    "add", "sub", "mul", "div", "matmul", "exp", "log", "sigmoid", "log_sigmoid",
    "relu",
    "pow_scalar", "clip", "sum", "mean", "reshape", "transpose", "concat",
    "narrow",     "linear", "conv3d", "adaptive_avg_pool3d", "adaptive_pool_matrix",
    "layer_norm", "logsumexp", "l2_normalize",
]


def _node(data, parents, backward):
    rg = any(p.requires_grad for p in parents)
    if not rg:
        return Tensor(data)
    return Tensor(data, True, parents, backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(-g, b.shape))
    return _node(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(-g * out / b.data, b.shape))
    return _node(out, (a, b), bw)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: accumulate(x, g * out))


def log(x):
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: accumulate(x, g / x.data))


def sigmoid(x):
    x = as_tensor(x)
    out = expit(x.data)
    return _node(out, (x,), lambda g: accumulate(x, g * out * (1.0 - out)))


def log_sigmoid(x):
    """``log(sigmoid(x))`` computed as ``-log(1 + exp(-x))`` without overflow."""
    x = as_tensor(x)
    out = -np.logaddexp(0.0, -x.data)
    return _node(out, (x,), lambda g: accumulate(x, g * expit(-x.data)))


def relu(x):
    """ReLU with subgradient 0 at 0."""
    x = as_tensor(x)
    on = x.data > 0
    record_pattern(on)
    return _node(np.where(on, x.data, 0.0), (x,), lambda g: accumulate(x, g * on))


def pow_scalar(x, p):
    x = as_tensor(x)
    p = float(p)
    if p == 0.0:
        return _node(np.ones_like(x.data), (x,), lambda g: None)
    out = x.data ** p

    def bw(g):
        accumulate(x, g * p * x.data ** (p - 1.0))
    return _node(out, (x,), bw)


def clip(x, lo, hi):
    """Clamp with pass-through gradient strictly inside ``[lo, hi]``."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: accumulate(x, g * inside))


# ------------------------------------------------------------------ reductions

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(x, np.broadcast_to(g, x.shape).copy())
    return _node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(x, np.broadcast_to(g / count, x.shape).copy())
    return _node(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def logsumexp(x, axis=-1, mask=None):
    """Stable log-sum-exp over ``axis``, ignoring entries where ``mask`` is False."""
    x = as_tensor(x)
    keep = np.ones(x.shape, dtype=bool) if mask is None else np.broadcast_to(mask, x.shape)
    shifted_in = np.where(keep, x.data, -np.inf)
    m = np.max(shifted_in, axis=axis, keepdims=True)
    e = np.where(keep, np.exp(shifted_in - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s

    def bw(g):
        accumulate(x, np.expand_dims(g, axis) * soft)
    return _node(out, (x,), bw)


# --------------------------------------------------------------------- shape

def reshape(x, shape):
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: accumulate(x, g.reshape(x.shape)))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: accumulate(x, np.transpose(g, inv)))


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            accumulate(x, part)
    return _node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


def narrow(x, axis, start, length):
    """Slice ``length`` entries of ``axis`` starting at ``start``."""
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros(x.shape)
        full[idx] = g
        accumulate(x, full)
    return _node(x.data[idx], (x,), bw)

# -------------------------------------------------------------------- linear

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
    return _node(a.data @ b.data, (a, b), bw)


def linear(x, w, b=None):
    """``x @ w.T + b`` over the last axis; ``w`` has shape (d_out, d_in)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    out = x.data @ w.data.T
    if b is not None:
        out = out + parents[2].data

    def bw(g):
        if x.requires_grad:
            accumulate(x, g @ w.data)
        if w.requires_grad:
            accumulate(w, g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1]))
        if b is not None:
            accumulate(parents[2], g.reshape(-1, g.shape[-1]).sum(axis=0))
    return _node(out, parents, bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs features {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        if gain.requires_grad:
            accumulate(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            accumulate(bias, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            accumulate(x, dx)
    return _node(xhat * gain.data + bias.data, (x, gain, bias), bw)


def l2_normalize(x, axis=-1, eps=1e-12):
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def bw(g):
        accumulate(x, (g - out * (g * out).sum(axis=axis, keepdims=True)) / norm)
    return _node(out, (x,), bw)


# --------------------------------------------------------------- volumetric

def _triple(v):
    return (v, v, v) if np.isscalar(v) else tuple(v)


def conv3d(x, w, b=None, stride=1, padding=0):
    """3-d cross-correlation with zero padding.

    ``x``: (B, C_in, X, Y, Z); ``w``: (C_out, C_in, kx, ky, kz); ``b``: (C_out,).
    Columns are laid out (B, offset, C_in, voxels) so one batched matmul
    yields channels-first output directly.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with kernel {w.shape}")
    st, pad, ks = _triple(stride), _triple(padding), w.shape[2:]
    bsz, cin = x.shape[:2]
    cout = w.shape[0]
    padded = tuple(x.shape[2 + i] + 2 * pad[i] for i in range(3))
    out_sp = tuple((padded[i] - ks[i]) // st[i] + 1 for i in range(3))
    if any(n < 1 for n in out_sp):
        raise ShapeError(f"conv3d: kernel {ks} larger than padded input {padded}")
    interior = (slice(None), slice(None)) + tuple(slice(pad[i], pad[i] + x.shape[2 + i]) for i in range(3))
    if any(pad):
        xp = np.zeros((bsz, cin) + padded)
        xp[interior] = x.data
    else:
        xp = x.data
    offsets = [(i, j, k) for i in range(ks[0]) for j in range(ks[1]) for k in range(ks[2])]

    def window(i, j, k):
        return (slice(None), slice(None),
                slice(i, i + st[0] * (out_sp[0] - 1) + 1, st[0]),
                slice(j, j + st[1] * (out_sp[1] - 1) + 1, st[1]),
                slice(k, k + st[2] * (out_sp[2] - 1) + 1, st[2]))

    n_vox = out_sp[0] * out_sp[1] * out_sp[2]
    cols = np.empty((bsz, len(offsets), cin) + out_sp)
    for t, off in enumerate(offsets):
        cols[:, t] = xp[window(*off)]
    del xp
    cols = cols.reshape(bsz, len(offsets) * cin, n_vox)
    wmat = w.data.transpose(0, 2, 3, 4, 1).reshape(cout, -1)
    out = np.matmul(wmat, cols)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv3d: bias {b.shape} vs {cout} output channels")
        out += b.data[:, None]
        parents = (x, w, b)
    out = out.reshape((bsz, cout) + out_sp)

    def bw(g):
        g2 = g.reshape(bsz, cout, n_vox)
        if w.requires_grad:
            dw = np.einsum("bon,bkn->ok", g2, cols, optimize=True)
            accumulate(w, dw.reshape((cout,) + tuple(ks) + (cin,)).transpose(0, 4, 1, 2, 3))
        if b is not None and b.requires_grad:
            accumulate(b, g2.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2).reshape((bsz, len(offsets), cin) + out_sp)
            dxp = np.zeros((bsz, cin) + padded)
            for t, off in enumerate(offsets):
                dxp[window(*off)] += dcols[:, t]
            accumulate(x, dxp[interior] if any(pad) else dxp)
    return _node(out, parents, bw)


def adaptive_pool_matrix(n_in, n_out):
    """Averaging matrix (n_out, n_in); bin i spans ``[floor(i n/m), ceil((i+1) n/m))``."""
    p = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        p[i, lo:hi] = 1.0 / (hi - lo)
    return p


def adaptive_avg_pool3d(x, size):
    """Average-pool the last three axes of ``x`` onto a grid of ``size``."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"adaptive_avg_pool3d: need >= 3 axes, got {x.shape}")
    size = _triple(size)
    mats = [adaptive_pool_matrix(n, m) for n, m in zip(x.shape[-3:], size)]
    out = x.data
    for k, p in enumerate(mats):
        axis = x.ndim - 3 + k
        out = np.moveaxis(np.tensordot(out, p, axes=([axis], [1])), -1, axis)

    def bw(g):
        for k, p in enumerate(mats):
            axis = x.ndim - 3 + k
            g = np.moveaxis(np.tensordot(g, p, axes=([axis], [0])), -1, axis)
        accumulate(x, g)
    return _node(out, (x,), bw)
