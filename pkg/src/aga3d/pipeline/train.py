"""Input preparation, Adam with cosine annealing, early stopping, evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..autodiff.tensor import Tensor
from ..errors import DegenerateBatch, ShapeError, TrainingDiverged
from ..grounding import DEFAULT_K, build_table_from_registry, ground_phrase
from ..net import NetConfig, forward, init_params
from ..objective import (
    ContrastiveBatch,
    FocalParams,
    LossWeights,
    MetricsReport,
    combined_loss,
    compute_metrics,
    focal_loss,
    supcon_loss,
)
from ..prior import PriorParams, build_prior_channel
from ..volgrid import resample, zscore_normalize

__all__ = [
    "TrainConfig",
    "TrainResult",
    "Adam",
    "cosine_lr",
    "prepare_inputs",
    "predict_scores",
    "train",
    "evaluate",
]

BCE_FOCAL = FocalParams(alpha_f=1.0, gamma=0.0)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 100
    lr_floor: float = 1e-6
    patience: int = 10
    min_delta: float = 1e-4
    fractions: tuple = (0.70, 0.15, 0.15)
    loss: str = "focal"  # "focal" or "bce"
    focal: FocalParams = field(default_factory=FocalParams)
    tau: float = 0.07
    lam: float = 0.5
    use_prior: bool = True
    k: int = DEFAULT_K
    embed_dim: int = 64
    net: NetConfig = field(default_factory=NetConfig)
    prior: PriorParams = field(default_factory=PriorParams)
    eval_batch: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if len(self.fractions) != 3 or min(self.fractions) < 0 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be three non-negative numbers summing to 1, "
                             f"got {self.fractions}")
        if self.loss not in ("focal", "bce"):
            raise ValueError(f"loss must be 'focal' or 'bce', got {self.loss!r}")
        if self.lam > 0 and self.batch_size < 2:
            raise ValueError("the contrastive term needs batch_size >= 2")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, epochs and patience must be >= 1")
        if not (0 < self.lr_floor <= self.lr):
            raise ValueError("need 0 < lr_floor <= lr")
        if not self.tau > 0:
            raise ValueError("temperature must be positive")
        LossWeights(self.lam)

    @property
    def class_params(self):
        """Focal parameters actually used; ``loss="bce"`` pins alpha 1, gamma 0."""
        return BCE_FOCAL if self.loss == "bce" else self.focal

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        nested = {"focal": FocalParams, "net": NetConfig, "prior": PriorParams}
        for key, typ in nested.items():
            if isinstance(d.get(key), dict):
                d[key] = typ(**d[key])
        return cls(**d)

    def with_(self, **kw):
        return replace(self, **kw)


class Adam:
    """Adam with bias correction; the learning rate is passed per step."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(epoch, cfg):
    """``floor + (lr - floor)(1 + cos(pi e / (E - 1))) / 2``; epoch 0 gets ``lr``."""
    if cfg.epochs == 1:
        return cfg.lr
    return cfg.lr_floor + (cfg.lr - cfg.lr_floor) * (1.0 + math.cos(math.pi * epoch / (cfg.epochs - 1))) / 2.0


def _ground_labels(scan, cfg, tables):
    key = id(scan.labels)
    if key not in tables:
        tables[key] = build_table_from_registry(scan.labels, d=cfg.embed_dim)
    table = tables[key]
    k = min(cfg.k, len(table.label_ids))
    ids = []
    for phrase in scan.phrases:
        ids.extend(ground_phrase(phrase, table, k).label_ids)
    return tuple(dict.fromkeys(ids))


def prepare_inputs(scans, cfg: TrainConfig):
    """Stack ``(N, 2, X, Y, Z)`` float32 inputs and ``(N,)`` labels.

    Channel 0 is the z-scored MRI, channel 1 the phrase-grounded prior, or
    zeros when ``cfg.use_prior`` is off.  Priors are cached per label map
    and grounded label set.
    """
    dims = cfg.net.input_dims
    x = np.zeros((len(scans), 2) + dims, dtype=np.float32)
    y = np.zeros(len(scans), dtype=np.int64)
    tables, priors = {}, {}
    for i, sc in enumerate(scans):
        vol = sc.volume if sc.volume.dims == dims else resample(sc.volume, dims)
        x[i, 0] = zscore_normalize(vol).data
        y[i] = sc.label
        if not cfg.use_prior:
            continue
        ids = _ground_labels(sc, cfg, tables)
        key = (id(sc.labels), ids)
        if key not in priors:
            pv = build_prior_channel(sc.labels, ids, cfg.prior)
            priors[key] = pv.data if pv.dims == dims else resample(pv, dims).data
        x[i, 1] = priors[key]
    return x, y


def _as_tensors(params, requires_grad=False):
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def predict_scores(params, x, net_cfg, batch=8):
    """Sigmoid probabilities for prepared inputs ``x`` (N, 2, X, Y, Z)."""
    tensors = _as_tensors(params)
    out = []
    for s in range(0, len(x), batch):
        prob = forward(x[s:s + batch].astype(np.float64), tensors, net_cfg)[0]
        out.append(prob.data)
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(params, x, y, cfg: TrainConfig, threshold=0.5):
    """``(MetricsReport, scores)`` on prepared inputs."""
    scores = predict_scores(params, x, cfg.net, cfg.eval_batch)
    return compute_metrics(scores, y, threshold), scores


@dataclass
class TrainResult:
    params: dict
    log: list
    best_epoch: int
    best_val_auc: float
    stopped_early: bool


def batch_loss(params_t, xb, yb, cfg: TrainConfig):
    """Per-batch objective on tensors; returns ``(loss, used_contrastive)``."""
    prob, _, z_unit = forward(xb, params_t, cfg.net)
    focal = focal_loss(prob, yb, cfg.class_params)
    if cfg.lam == 0 or len(yb) < 2:
        return focal, False
    try:
        sc = supcon_loss(ContrastiveBatch(z_unit, yb, cfg.tau))
    except DegenerateBatch:
        return focal, False
    return combined_loss(focal, sc, LossWeights(cfg.lam)), True


def _auc_value(rep: MetricsReport):
    return rep.auc if rep.auc is not None else -math.inf


def train(cfg: TrainConfig, train_data, val_data, log_path=None, params=None, progress=None):
    """Train on prepared ``(x, y)`` pairs; returns a :class:`TrainResult`.

    Every epoch is scored on the validation set.  The returned parameters
    come from the epoch with the highest validation AUC.  Training stops when
    AUC has not risen by more than ``cfg.min_delta`` for ``cfg.patience``
    epochs.
    """
    x_tr, y_tr = train_data
    x_va, y_va = val_data
    if x_tr.shape[2:] != cfg.net.input_dims:
        raise ShapeError(f"inputs {x_tr.shape[2:]} do not match network dims {cfg.net.input_dims}")
    params = {k: np.array(v, dtype=np.float64) for k, v in (params or init_params(cfg.net)).items()}
    opt = Adam(params)
    log = []
    best = None
    best_auc = -math.inf
    plateau_ref, wait = -math.inf, 0
    stopped = False
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(y_tr))
            losses = []
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                tensors = _as_tensors(params, requires_grad=True)
                loss, _ = batch_loss(tensors, x_tr[idx].astype(np.float64), y_tr[idx], cfg)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(epoch, b)
                loss.backward()
                grads = {k: t.grad for k, t in tensors.items()}
                if any(g is not None and not np.all(np.isfinite(g)) for g in grads.values()):
                    raise TrainingDiverged(epoch, b, "gradient became non-finite")
                opt.step(params, grads, lr)
                losses.append(value)
            rep, _ = evaluate(params, x_va, y_va, cfg)
            auc = _auc_value(rep)
            record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val": rep.to_dict()}
            log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if progress:
                progress(record)
            if best is None or auc > best_auc:
                best_auc, best = auc, (epoch, {k: v.copy() for k, v in params.items()})
            if auc > plateau_ref + cfg.min_delta:
                plateau_ref, wait = auc, 0
            else:
                wait += 1
                if wait >= cfg.patience:
                    stopped = True
                    break
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(best[1], log, best[0], best_auc, stopped)
