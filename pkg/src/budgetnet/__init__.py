"""Budget-constrained residual networks for CIFAR-10, built on numpy."""

from budgetnet.errors import (
    BudgetNetError,
    ConfigError,
    DataError,
    DegenerateError,
    FormatError,
    NumericError,
    UsageError,
)
from budgetnet.rng import RngStream
from budgetnet.tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "BudgetNetError",
    "ConfigError",
    "DataError",
    "DegenerateError",
    "FormatError",
    "NumericError",
    "RngStream",
    "Tensor",
    "UsageError",
]
