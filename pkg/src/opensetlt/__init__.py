"""Open-set semi-supervised classification for long-tailed data."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DatasetError,
    DimensionError,
    MismatchError,
    NonFiniteLossError,
    OpenSetLTError,
)
from .etf import SimplexETF, make_rotation, make_simplex_etf, verify_etf  # noqa: E402

__all__ = [
    "ConfigError",
    "DatasetError",
    "DimensionError",
    "MismatchError",
    "NonFiniteLossError",
    "OpenSetLTError",
    "SimplexETF",
    "make_rotation",
    "make_simplex_etf",
    "verify_etf",
]
