class BudgetNetError(Exception):
    pass


class ConfigError(BudgetNetError, ValueError):
    """Invalid hyperparameters or mismatched shapes."""


class DataError(BudgetNetError, ValueError):
    pass


class DegenerateError(BudgetNetError, ValueError):
    """Statistics are undefined (zero variance, single-element batch)."""


class FormatError(BudgetNetError, ValueError):
    """Malformed CIFAR-10 batch file or checkpoint."""


class NumericError(BudgetNetError, ArithmeticError):
    pass


class UsageError(BudgetNetError, ValueError):
    pass
