"""Aerial multi-view stereo with adaptive per-pixel depth ranges."""

from .errors import AeroMvsError, DataError, NumericalError

__version__ = "0.1.0"

__all__ = ["AeroMvsError", "DataError", "NumericalError", "__version__"]
