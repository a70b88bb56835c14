"""Exception hierarchy shared by every module."""


class StochformerError(Exception):
    """Base class for all package errors."""


class ConfigError(StochformerError, ValueError):
    pass


class DimensionError(StochformerError, ValueError):
    pass


class ContractError(StochformerError, ValueError):
    pass


class InputError(StochformerError, ValueError):
    pass


class NumericError(StochformerError, ArithmeticError):
    pass


class DataLoadError(StochformerError):
    """Raised while reading a corpus, an index row, or a feature file."""
