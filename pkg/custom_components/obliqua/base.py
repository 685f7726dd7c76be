import math
from typing import Sequence, Union

import numpy as np
import numpy.typing as npt

FloatArray = npt.NDArray[np.float64]
PointLike = Union[Sequence[float], FloatArray]

TWO_PI = 2.0 * math.pi


class ObliquaError(Exception):
    pass


class ScenarioError(ObliquaError):
    """A scenario or polygon file could not be loaded or is inconsistent."""

    pass


def as_point(x: PointLike) -> FloatArray:
    """Coerce `x` to a float64 array of shape (2,)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (2,):
        raise ValueError(f"Expected a 2-D point, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"Point must be finite, got {arr.tolist()}")
    return arr


def as_points(xs: npt.ArrayLike) -> FloatArray:
    """Coerce `xs` to a float64 array of shape (n, 2)."""
    arr = np.asarray(xs, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"Expected points of shape (n, 2), got {arr.shape}")
    return arr


def unit(v: PointLike) -> FloatArray:
    arr = np.asarray(v, dtype=np.float64)
    norm = float(np.hypot(arr[0], arr[1]))
    if norm == 0.0:
        raise ValueError("Cannot normalize the zero vector")
    return arr / norm


def unit_rows(vs: FloatArray) -> FloatArray:
    """Row-wise normalization; zero rows become NaN."""
    norms = np.hypot(vs[:, 0], vs[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        return vs / norms[:, None]


def angle_of(v: PointLike) -> float:
    return math.atan2(float(v[1]), float(v[0]))


def direction(angle: float) -> FloatArray:
    return np.array([math.cos(angle), math.sin(angle)])


def point_key(x: PointLike) -> str:
    """Stable text label for a point, used as report subject."""
    return f"({float(x[0]):.12g}, {float(x[1]):.12g})"


def rowdot(a: FloatArray, b: FloatArray) -> FloatArray:
    """Row-wise dot product of (n, 2) arrays, elementwise so each row is independent of the batch."""
    return a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]
