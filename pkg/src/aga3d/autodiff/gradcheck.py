"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kinks import recording, same_patterns
from .tensor import Tensor

__all__ = ["GradCheckResult", "grad_check", "relative_error"]


@dataclass
class GradCheckResult:
    max_rel_err: float
    checked: int
    skipped_kinks: int

    def passed(self, tol):
        return self.checked > 0 and self.max_rel_err < tol


def relative_error(analytic, numeric, scale_floor=1e-3, abs_floor=1e-10):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``scale_floor`` times the largest numeric magnitude (and at
    least ``abs_floor``) so entries that are zero up to rounding do not blow up.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    floor = max(abs_floor, scale_floor * float(np.max(np.abs(n), initial=0.0)))
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _evaluate(fn, arrays):
    with recording() as patterns:
        out = fn({k: Tensor(v) for k, v in arrays.items()})
    return float(out.data), patterns


def grad_check(fn, params, eps=1e-5, fraction=1.0, max_entries=None, rng=None, keys=None):
    """Compare reverse-mode gradients of scalar ``fn(params)`` with central differences.

    ``params`` maps names to arrays.  A ``fraction`` (or at most
    ``max_entries``) of the entries is sampled.  Coordinates whose +-eps
    perturbation flips any ReLU or max branch are skipped and counted, since
    a finite difference across a kink does not estimate the derivative.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    keys = list(arrays) if keys is None else list(keys)
    tensors = {k: Tensor(v.copy(), requires_grad=k in keys) for k, v in arrays.items()}
    with recording() as base_patterns:
        loss = fn(tensors)
    loss.backward()

    coords = [(k, i) for k in keys for i in range(arrays[k].size)]
    n_pick = max(1, int(round(fraction * len(coords))))
    if max_entries is not None:
        n_pick = min(n_pick, max_entries)
    if n_pick < len(coords):
        picked = rng.choice(len(coords), size=n_pick, replace=False)
        coords = [coords[i] for i in sorted(picked)]

    analytic, numeric, skipped = [], [], 0
    for key, idx in coords:
        base = arrays[key]
        flat = base.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + eps
        f_plus, p_plus = _evaluate(fn, arrays)
        flat[idx] = orig - eps
        f_minus, p_minus = _evaluate(fn, arrays)
        flat[idx] = orig
        if not (same_patterns(p_plus, base_patterns) and same_patterns(p_minus, base_patterns)):
            skipped += 1
            continue
        g = tensors[key].grad
        analytic.append(0.0 if g is None else float(g.reshape(-1)[idx]))
        numeric.append((f_plus - f_minus) / (2 * eps))
    if not analytic:
        return GradCheckResult(float("nan"), 0, skipped)
    err = relative_error(analytic, numeric)
    return GradCheckResult(float(err.max()), len(analytic), skipped)
