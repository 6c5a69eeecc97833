"""Input validation helpers shared across the package.

Two error families: configuration problems (bad worlds, bad start specs,
bad files) and usage problems (calling an operation outside its contract).
Both derive from ValueError so callers can catch broadly.
"""

from __future__ import annotations

import numpy as np


class ConfigurationError(ValueError):
    """A world, start spec, or config file violates its invariants."""


class UsageError(ValueError):
    """An operation was called outside its documented contract."""


class SchemaError(ValueError):
    """A persisted file has the wrong schema or format_version."""


def require(condition: bool, message: str, exc: type = UsageError) -> None:
    if not condition:
        raise exc(message)


def as_float_array(value, name: str, shape: tuple | None = None) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise UsageError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise UsageError(f"{name} contains non-finite entries")
    return arr
