"""Phantom cohort, patient split, training loop and ablation runner."""

from .experiment import (
    ABLATION_ROWS,
    ExperimentResult,
    prepare_splits,
    row_config,
    run_ablation,
    run_experiment,
    summarize_ablation,
)
from .phantom import PhantomScan, PhantomSpec, generate_phantoms, load_phantoms, store_phantoms
from .split import patient_split, split_counts
from .train import Adam, TrainConfig, TrainResult, cosine_lr, evaluate, predict_scores, prepare_inputs, train

__all__ = [
    "ABLATION_ROWS",
    "Adam",
    "ExperimentResult",
    "PhantomScan",
    "PhantomSpec",
    "TrainConfig",
    "TrainResult",
    "cosine_lr",
    "evaluate",
    "generate_phantoms",
    "load_phantoms",
    "patient_split",
    "predict_scores",
    "prepare_inputs",
    "prepare_splits",
    "row_config",
    "run_ablation",
    "run_experiment",
    "split_counts",
    "store_phantoms",
    "summarize_ablation",
    "train",
]
