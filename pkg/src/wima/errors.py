"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: usage errors exit 1, numeric
divergence exits 2, I/O failures exit 3.
"""


class UsageError(ValueError):
    """A caller violated a documented precondition."""


class DimensionError(UsageError):
    """Two parameter vectors (or a vector and a model) disagree on layout."""


class NumericDivergenceError(ArithmeticError):
    """Training produced NaN or Inf values."""

    def __init__(self, message: str, step: int | None = None, round: int | None = None):
        super().__init__(message)
        self.step = step
        self.round = round


class DataFormatError(OSError):
    """An input file could not be parsed. Carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line
