"""Exception types shared across the package.

The CLI maps these onto process exit codes (DataError -> 3, NumericalError -> 4),
so library code should raise the most specific one that applies.
"""


class AeroMvsError(Exception):
    """Base class for errors raised by this package."""


class DataError(AeroMvsError):
    """Malformed or inconsistent input data (files, datasets, shapes at the IO boundary)."""


class NumericalError(AeroMvsError):
    """Numerical failure: non-finite values, divergence, or a failed determinism check."""
