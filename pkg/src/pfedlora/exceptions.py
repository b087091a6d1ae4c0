"""Error categories. The CLI maps each one to its own exit code."""


class PfedloraError(Exception):
    exit_code = 1


class ConfigError(PfedloraError, ValueError):
    exit_code = 2


class DataError(PfedloraError, ValueError):
    exit_code = 3


class NumericError(PfedloraError, ArithmeticError):
    exit_code = 4


class StorageError(PfedloraError, OSError):
    exit_code = 5


class ProtocolError(PfedloraError, RuntimeError):
    """Server/client disagreement (shapes, registry state)."""

    exit_code = 6


class TapeReuseError(PfedloraError, RuntimeError):
    exit_code = 7


class NotFittedError(PfedloraError, AttributeError):
    exit_code = 8
