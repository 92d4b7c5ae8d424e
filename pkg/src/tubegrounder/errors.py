"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, DataError exits 2,
NumericError exits 3.
"""


class DataError(ValueError):
    """An input sample, file, or annotation violates an invariant."""


class NumericError(RuntimeError):
    """A numeric quantity (loss, gradient, feature) became non-finite."""
