"""Gradient-based weighted particle filters for order-robust sequential learning."""

from permfilter.errors import (
    ContractError,
    DegenerateEnsembleError,
    FormatError,
    InvalidConfigError,
    InvalidInputError,
    NumericalFailureError,
    PermFilterError,
)
from permfilter.filter import (
    Ensemble,
    EnsembleConfig,
    Particle,
    effective_sample_size,
    init_ensemble,
    normalize_weights,
    weighted_statistic,
    wpf_run,
    wpf_step,
)

__all__ = [
    "ContractError",
    "DegenerateEnsembleError",
    "Ensemble",
    "EnsembleConfig",
    "FormatError",
    "InvalidConfigError",
    "InvalidInputError",
    "NumericalFailureError",
    "Particle",
    "PermFilterError",
    "effective_sample_size",
    "init_ensemble",
    "normalize_weights",
    "weighted_statistic",
    "wpf_run",
    "wpf_step",
]

__version__ = "0.1.0"
