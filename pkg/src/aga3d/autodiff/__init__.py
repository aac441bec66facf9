"""Minimal reverse-mode autodiff with the layers the classifier needs."""

from . import ops
from .checkpoint import load_params, store_params
from .gradcheck import GradCheckResult, grad_check
from .mlstm import (
    MlstmState,
    init_mlstm_layer,
    init_mlstm_stack,
    mlstm_block,
    mlstm_core,
    mlstm_layer,
    mlstm_sequence,
    mlstm_step,
)
from .suite import MODEL_TOL, OP_TOL, run_suite
from .tensor import Tensor, as_tensor, backward

__all__ = [
    "ops",
    "Tensor",
    "as_tensor",
    "backward",
    "GradCheckResult",
    "grad_check",
    "MlstmState",
    "init_mlstm_layer",
    "init_mlstm_stack",
    "mlstm_block",
    "mlstm_core",
    "mlstm_layer",
    "mlstm_sequence",
    "mlstm_step",
    "load_params",
    "store_params",
    "OP_TOL",
    "MODEL_TOL",
    "run_suite",
]
