"""End-to-end phantom runs and the loss/prior ablation grid."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autodiff.checkpoint import store_params
from ..objective import MetricsReport, metrics_to_csv
from .phantom import PhantomSpec, generate_phantoms
from .split import patient_split
from .train import TrainConfig, TrainResult, evaluate, prepare_inputs, train

__all__ = [
    "ABLATION_ROWS",
    "ExperimentResult",
    "row_config",
    "prepare_splits",
    "run_experiment",
    "run_ablation",
    "summarize_ablation",
]

# Rows of the ablation grid, keyed by which components are switched on.
# The first four build up from focal loss alone to the full objective; the
# last one keeps the full objective and removes only the prior.
ABLATION_ROWS = (
    {"name": "focal", "bce": False, "focal": True, "contrastive": False, "gaussian": False},
    {"name": "bce+gaussian", "bce": True, "focal": False, "contrastive": False, "gaussian": True},
    {"name": "focal+gaussian", "bce": False, "focal": True, "contrastive": False, "gaussian": True},
    {"name": "full", "bce": False, "focal": True, "contrastive": True, "gaussian": True},
    {"name": "full-no-prior", "bce": False, "focal": True, "contrastive": True, "gaussian": False},
)


def row_config(base: TrainConfig, row):
    """Config for one ablation row; the contrastive weight comes from ``base``."""
    if row["bce"] == row["focal"]:
        raise ValueError(f"row {row.get('name')} must pick exactly one of BCE and focal")
    return base.with_(
        loss="bce" if row["bce"] else "focal",
        lam=base.lam if row["contrastive"] else 0.0,
        use_prior=bool(row["gaussian"]),
    )


@dataclass
class ExperimentResult:
    test: MetricsReport
    test_scores: np.ndarray
    training: TrainResult
    split_sizes: tuple


def prepare_splits(cfg: TrainConfig, spec: PhantomSpec):
    """Generate, split by patient and stack inputs: three ``(x, y)`` pairs."""
    scans = generate_phantoms(spec)
    parts = patient_split(scans, cfg.fractions, cfg.seed)
    return tuple(prepare_inputs(p, cfg) for p in parts)


def _without_prior(data):
    x, y = data
    x = x.copy()
    x[:, 1] = 0.0
    return x, y


def run_experiment(cfg: TrainConfig, spec: PhantomSpec, out_dir=None, data=None, progress=None):
    """Train on a phantom cohort and score the held-out test split.

    With ``out_dir`` the epoch log (``train_log.jsonl``), the best
    checkpoint (``model.agap``) and the test report (``metrics.json``) are
    written there.
    """
    if data is None:
        data = prepare_splits(cfg, spec)
    if not cfg.use_prior:
        data = tuple(_without_prior(d) for d in data)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, data[0], data[1], log_path=out / "train_log.jsonl" if out else None,
                   progress=progress)
    report, scores = evaluate(result.params, *data[2], cfg)
    if out is not None:
        store_params(result.params, out / "model.agap")
        (out / "metrics.json").write_text(report.to_json(indent=1) + "\n")
    return ExperimentResult(report, scores, result, tuple(len(d[1]) for d in data))


def run_ablation(base: TrainConfig, spec: PhantomSpec, seeds=(0, 1, 2), rows=ABLATION_ROWS,
                 out_dir=None, progress=None):
    """Train every row for every seed; returns ``[(keys, MetricsReport), ...]``.

    Each seed regenerates the cohort and the split, and seeds the network.
    The prior-off rows see the same scans with an all-zero second channel.
    Writes ``ablation.csv`` and ``ablation.json`` when ``out_dir`` is given.
    """
    results = []
    for seed in seeds:
        seeded = base.with_(seed=seed, use_prior=True)
        data = prepare_splits(seeded, PhantomSpec.from_dict({**spec.to_dict(), "seed": seed}))
        for row in rows:
            cfg = row_config(seeded, row)
            res = run_experiment(cfg, spec, data=data)
            keys = {"row": row["name"], "seed": seed, "bce": int(row["bce"]), "focal": int(row["focal"]),
                    "contrastive": int(row["contrastive"]), "gaussian": int(row["gaussian"])}
            results.append((keys, res.test))
            if progress:
                progress(keys, res)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_to_csv(results, out / "ablation.csv")
        payload = [{**k, "metrics": r.to_dict()} for k, r in results]
        (out / "ablation.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return results


def summarize_ablation(results, metric="auc"):
    """Median of ``metric`` per row name across seeds."""
    by_row = {}
    for keys, rep in results:
        value = getattr(rep, metric)
        by_row.setdefault(keys["row"], []).append(np.nan if value is None else value)
    return {name: float(np.median(v)) for name, v in by_row.items()}
