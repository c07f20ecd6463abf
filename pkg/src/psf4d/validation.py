"""Input validation helpers shared by the public entry points.

Mirrors the flavor of sklearn's check_* utilities but raises this
package's ParameterError / ShapeError so the CLI can map validation
failures onto its own exit code.
"""

from __future__ import annotations

import numbers

import numpy as np

from .exceptions import ParameterError, ShapeError


def check_unit_halfopen(value, name: str) -> float:
    """Coerce to float and require 0 <= value < 1.

    Zero is the documented degenerate setting (correlation switched
    off); one would make recursions non-contracting and is rejected.
    """
    if not isinstance(value, numbers.Real) or isinstance(value, bool):
        raise ParameterError(f"{name} must be a real number, got {value!r}")
    value = float(value)
    if not np.isfinite(value) or not 0.0 <= value < 1.0:
        raise ParameterError(f"{name}={value} outside [0, 1)")
    return value


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ParameterError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < 1:
        raise ParameterError(f"{name}={value} must be >= 1")
    return value


def check_nonnegative_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ParameterError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < 0:
        raise ParameterError(f"{name}={value} must be >= 0")
    return value


def check_positive_float(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or isinstance(value, bool):
        raise ParameterError(f"{name} must be a real number, got {value!r}")
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ParameterError(f"{name}={value} must be finite and > 0")
    return value


def check_finite_float(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or isinstance(value, bool):
        raise ParameterError(f"{name} must be a real number, got {value!r}")
    value = float(value)
    if not np.isfinite(value):
        raise ParameterError(f"{name}={value} must be finite")
    return value


def check_array(x, name: str, *, ndim=None, shape=None, finite: bool = True) -> np.ndarray:
    """Coerce to a float64 C-order array and check structure."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must have {ndim} axes, got shape {arr.shape}")
    if shape is not None:
        if len(shape) != arr.ndim or any(
            want is not None and want != got for want, got in zip(shape, arr.shape)
        ):
            raise ShapeError(f"{name} must have shape {shape}, got {arr.shape}")
    if finite and arr.size and not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    return np.ascontiguousarray(arr)


def check_choice(value, name: str, choices) -> str:
    if value not in choices:
        raise ParameterError(
            f"{name}={value!r} not one of {sorted(choices)}"
        )
    return value
