"""Exception types shared across the package.

Each carries the process exit code the CLI maps it to.
"""


class CisrError(Exception):
    exit_code = 1


class ConfigError(CisrError, ValueError):
    exit_code = 2


class ShapeError(CisrError, ValueError):
    exit_code = 2


class DataError(CisrError):
    exit_code = 3


class NumericError(CisrError, ArithmeticError):
    """NaN/Inf in activations, gradients or losses."""

    exit_code = 4
