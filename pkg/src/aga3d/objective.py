"""Training losses (focal, supervised contrastive, their weighted sum) and
binary classification metrics.

Losses accept :class:`~aga3d.autodiff.Tensor` inputs (or arrays) and return
scalar tensors so they can sit at the end of a training graph.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .autodiff import ops
from .autodiff.tensor import as_tensor
from .errors import ContractError, DegenerateBatch, ShapeError, UndefinedMetric

__all__ = [
    "PROB_EPS",
    "FocalParams",
    "ContrastiveBatch",
    "LossWeights",
    "MetricsReport",
    "focal_loss",
    "supcon_loss",
    "combined_loss",
    "compute_metrics",
    "auc_mann_whitney",
    "metrics_to_csv",
]

PROB_EPS = 1e-7


@dataclass(frozen=True)
class FocalParams:
    """``alpha_f`` weights every sample's term; ``gamma`` is the focusing exponent."""

    alpha_f: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha_f <= 1.0:
            raise ValueError(f"alpha_f must lie in [0, 1], got {self.alpha_f}")
        if not (self.gamma >= 0.0 and math.isfinite(self.gamma)):
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")


@dataclass
class ContrastiveBatch:
    """Unit-norm embeddings (N, D), binary labels (N,), temperature ``tau``."""

    z: object
    labels: np.ndarray
    tau: float = 0.07

    def __post_init__(self):
        self.z = as_tensor(self.z)
        self.labels = np.asarray(self.labels).astype(np.int64).reshape(-1)
        if self.z.ndim != 2 or self.z.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"embeddings {self.z.shape} do not match {self.labels.shape[0]} labels")
        if self.z.shape[0] < 2:
            raise DegenerateBatch("a contrastive batch needs at least two samples")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"temperature must be positive, got {self.tau}")
        norms = np.linalg.norm(self.z.data, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ContractError("contrastive embeddings must be L2-normalized")


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.5

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")


def focal_loss(p, y, fp=FocalParams(), reduction="mean"):
    """``-alpha_f (1 - p_t)^gamma log p_t`` with ``p`` clamped to ``[eps, 1 - eps]``.

    ``p_t`` is ``p`` for positives and ``1 - p`` for negatives.  With
    ``reduction="none"`` the per-sample terms are returned.
    """
    p = as_tensor(p)
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("focal_loss labels must be 0 or 1")
    pc = ops.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    pt = ops.add(ops.mul(pc, y), ops.mul(ops.sub(1.0, pc), 1.0 - y))
    terms = ops.mul(ops.mul(ops.pow_scalar(ops.sub(1.0, pt), fp.gamma), ops.log(pt)), -fp.alpha_f)
    if reduction == "none":
        return terms
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    return ops.mean(terms)


def supcon_loss(b: ContrastiveBatch):
    """Supervised InfoNCE over a batch.

    For anchor ``i`` with positive set ``P(i)`` (same label, not ``i``)::

        -1 / (N_c |P(i)|) * sum_{p in P(i)} log( exp(z_i.z_p / tau) / sum_{a != i} exp(z_i.z_a / tau) )

    summed over anchors.  Anchors without positives are skipped and ``N_c``
    counts the anchors that remain (``N_c = N`` when none are skipped).
    """
    z = b.z
    n = z.shape[0]
    sims = ops.mul(ops.matmul(z, ops.transpose(z, (1, 0))), 1.0 / b.tau)
    not_self = ~np.eye(n, dtype=bool)
    pos = (b.labels[:, None] == b.labels[None, :]) & not_self
    n_pos = pos.sum(axis=1)
    active = n_pos > 0
    if not active.any():
        raise DegenerateBatch("no anchor in the batch has a positive partner")
    weight = np.where(active, 1.0 / (active.sum() * np.maximum(n_pos, 1)), 0.0)
    lse = ops.logsumexp(sims, axis=1, mask=not_self)
    pair_w = pos * weight[:, None]
    attract = ops.sum(ops.mul(sims, pair_w))
    normalizer = ops.sum(ops.mul(lse, weight * n_pos))
    return ops.sub(normalizer, attract)


def combined_loss(focal, supcon, w=LossWeights()):
    """``lam * supcon + focal``; works on tensors or plain floats."""
    if isinstance(focal, (int, float)) and isinstance(supcon, (int, float)):
        return w.lam * supcon + focal
    if w.lam == 0:
        return as_tensor(focal)
    return ops.add(ops.mul(supcon, w.lam), focal)


# ------------------------------------------------------------------ metrics

@dataclass
class MetricsReport:
    acc: float
    auc: float | None
    precision: float
    recall: float
    f1_macro: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float
    auc_defined: bool = True

    @property
    def n(self):
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self):
        d = asdict(self)
        d["n"] = self.n
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def _safe_div(a, b):
    return a / b if b else 0.0


def auc_mann_whitney(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie), via average ranks.

    Returns ``None`` when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(bool).reshape(-1)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_metrics(scores, labels, threshold=0.5):
    """Accuracy, AUC, positive-class precision/recall and macro F1.

    A sample is predicted positive when ``score >= threshold``.  Macro F1 is
    the unweighted mean of both classes' F1, each 0 when undefined.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size == 0 or s.size != y.size:
        raise ShapeError(f"need matching non-empty scores/labels, got {s.size} and {y.size}")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    y = y.astype(bool)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1_pos = _safe_div(2 * tp, 2 * tp + fp + fn)
    f1_neg = _safe_div(2 * tn, 2 * tn + fn + fp)
    auc = auc_mann_whitney(s, y)
    if auc is None:
        warnings.warn("AUC undefined: labels contain a single class", UndefinedMetric, stacklevel=2)
    return MetricsReport(
        acc=(tp + tn) / s.size,
        auc=auc,
        precision=precision,
        recall=recall,
        f1_macro=(f1_pos + f1_neg) / 2.0,
        tp=tp, fp=fp, tn=tn, fn=fn,
        threshold=float(threshold),
        auc_defined=auc is not None,
    )


_CSV_METRICS = ("acc", "auc", "precision", "recall", "f1_macro", "tp", "fp", "tn", "fn", "threshold")


def metrics_to_csv(rows, path=None):
    """One CSV line per ``(keys: dict, MetricsReport)`` pair.

    Key columns come first in the order of the first row.  Returns the text
    and writes it to ``path`` when given.
    """
    rows = list(rows)
    key_cols = list(rows[0][0]) if rows else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(key_cols + list(_CSV_METRICS))
    for keys, rep in rows:
        d = rep.to_dict()
        writer.writerow([keys[k] for k in key_cols] + ["" if d[m] is None else d[m] for m in _CSV_METRICS])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text
