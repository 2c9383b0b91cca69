"""Error taxonomy shared across the package.

DataError maps to CLI exit code 2, NumericalError to exit code 3.
"""


class DataError(Exception):
    """Unusable input data: missing files, empty results, bad schemas."""


class NumericalError(Exception):
    """Non-finite values where finite numbers are required."""
