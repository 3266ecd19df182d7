"""Bayesian tensor-train factorization and completion with automatic rank selection."""
from .model import ModelState, PriorHyper, load_state, save_state
from .tensor import TensorTrain, kron, masked_residual_norm, tt_contract, unfold
from .ttsvd import InitConfig, init_state, max_ranks, tt_svd
from .vi import FitError, FitOptions, FitReport, fit, reconstruct

__all__ = [
    "FitError",
    "FitOptions",
    "FitReport",
    "InitConfig",
    "ModelState",
    "PriorHyper",
    "TensorTrain",
    "fit",
    "init_state",
    "kron",
    "load_state",
    "masked_residual_norm",
    "max_ranks",
    "reconstruct",
    "save_state",
    "tt_contract",
    "tt_svd",
    "unfold",
]

__version__ = "0.1.0"
