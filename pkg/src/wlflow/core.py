"""Shared raster and geometry types with their invariants.

Pixel convention used everywhere: x grows rightward (columns), y grows
downward (rows), origin at the top-left pixel center. Raster arrays are
indexed ``[y, x]``; displacement channels are ordered ``(dx, dy)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, ValidationError

# Confidence floor applied where keypoints enter matching/interpolation;
# distance-over-confidence scores degenerate at c = 0.
EPS_CONF = 1e-3

# Displacements with norm below this (pixels) count as static.
EPS_VEC = 1e-6

N_JOINTS = 17


def worker_count() -> int:
    """Worker cap for internally parallel operations.

    Reads the HMORE_THREADS environment variable; defaults to the hardware
    parallelism. Results of parallel operations never depend on this value.
    """
    raw = os.environ.get("HMORE_THREADS", "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ValidationError(f"HMORE_THREADS must be an integer, got {raw!r}") from exc
        if n < 1:
            raise ValidationError("HMORE_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _as_readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _require_finite(arr: np.ndarray, name: str) -> None:
    if arr.size and not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class Vec2:
    """Displacement in pixels."""

    dx: float
    dy: float

    def __post_init__(self):
        if not (np.isfinite(self.dx) and np.isfinite(self.dy)):
            raise ValidationError("Vec2 components must be finite")
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "dy", float(self.dy))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy], dtype=np.float64)

    @property
    def norm(self) -> float:
        return float(np.hypot(self.dx, self.dy))


@dataclass(frozen=True)
class FlowMap:
    """Dense per-pixel displacement field, stored as (height, width, 2) float64."""

    vectors: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.vectors, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValidationError(f"flow must have shape (h, w, 2), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"flow dimensions must be >= 1, got {arr.shape[:2]}")
        _require_finite(arr, "flow")
        object.__setattr__(self, "vectors", _as_readonly(arr))

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowMap":
        return cls(np.zeros((height, width, 2), dtype=np.float64))

    @classmethod
    def constant(cls, width: int, height: int, v: Vec2) -> "FlowMap":
        arr = np.empty((height, width, 2), dtype=np.float64)
        arr[..., 0] = v.dx
        arr[..., 1] = v.dy
        return cls(arr)


@dataclass(frozen=True)
class Keypoint:
    """A joint detection: image position plus visibility/confidence in [0, 1]."""

    x: float
    y: float
    c: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y) and np.isfinite(self.c)):
            raise ValidationError("Keypoint fields must be finite")
        if not 0.0 <= self.c <= 1.0:
            raise ValidationError(f"keypoint confidence must lie in [0, 1], got {self.c}")


@dataclass(frozen=True)
class KeypointFrame:
    """Per-person arrays of exactly 17 COCO-ordered keypoints, rows (x, y, c)."""

    persons: tuple

    def __post_init__(self):
        checked = []
        for i, person in enumerate(self.persons):
            arr = np.asarray(person, dtype=np.float64)
            if arr.shape != (N_JOINTS, 3):
                raise ValidationError(
                    f"person {i} must have shape ({N_JOINTS}, 3), got {arr.shape}"
                )
            _require_finite(arr, f"person {i}")
            if (arr[:, 2] < 0.0).any() or (arr[:, 2] > 1.0).any():
                raise ValidationError(f"person {i} has confidence outside [0, 1]")
            checked.append(_as_readonly(arr))
        object.__setattr__(self, "persons", tuple(checked))

    def __len__(self) -> int:
        return len(self.persons)


@dataclass(frozen=True)
class SubjectMask:
    """Per-pixel instance labels: 0 is background, subjects are 1..k contiguous."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"mask must be a (h, w) array, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValidationError(f"mask labels must be integers, got dtype {arr.dtype}")
        arr = arr.astype(np.int32, copy=True)
        if (arr < 0).any():
            raise ValidationError("mask labels must be non-negative")
        present = np.unique(arr)
        subjects = present[present > 0]
        if subjects.size and not np.array_equal(subjects, np.arange(1, subjects.size + 1)):
            raise ValidationError(
                f"subject labels must form a contiguous range 1..k, got {subjects.tolist()}"
            )
        object.__setattr__(self, "labels", _as_readonly(arr))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def subject_ids(self) -> tuple[int, ...]:
        present = np.unique(self.labels)
        return tuple(int(v) for v in present[present > 0])


@dataclass(frozen=True)
class PointSet:
    """Discrete (x, y) points on the pixel grid; may be empty."""

    points: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.points, dtype=np.float64)
        if arr.size == 0:
            arr = arr.reshape(0, 2)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValidationError(f"points must have shape (n, 2), got {arr.shape}")
        _require_finite(arr, "points")
        object.__setattr__(self, "points", _as_readonly(arr))

    def __len__(self) -> int:
        return self.points.shape[0]

    def translated(self, v: Vec2) -> "PointSet":
        return PointSet(self.points + v.as_array())


@dataclass(frozen=True)
class Hyperparams:
    """Constraint weights and thresholds.

    Defaults: alpha 0.1, beta 0.01, angle threshold 15 degrees, magnitude
    band [0.8, 1.2], edge thresholds 0.5 px / 30 degrees, patch scales
    {8, 16, 32}.
    """

    alpha: float = 0.1
    beta: float = 0.01
    theta_a: float = 15.0
    theta_il: float = 0.8
    theta_ih: float = 1.2
    edge_theta_i: float = 0.5
    edge_theta_a: float = 30.0
    scales: tuple = (8, 16, 32)

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValidationError("alpha and beta must be positive")
        if not 0 < self.theta_il < self.theta_ih:
            raise ValidationError("need 0 < theta_il < theta_ih")
        if not 0 < self.theta_a < 90:
            raise ValidationError("theta_a must lie in (0, 90) degrees")
        if not (self.edge_theta_i > 0 and self.edge_theta_a > 0):
            raise ValidationError("edge thresholds must be positive")
        scales = tuple(int(s) for s in self.scales)
        if not scales or any(s < 2 for s in scales):
            raise ValidationError("scales must be nonempty with every entry >= 2")
        object.__setattr__(self, "scales", scales)


def validate_pairing(flow: FlowMap, mask: SubjectMask) -> None:
    """Raise DimensionMismatch unless flow and mask cover the same raster."""
    if (flow.height, flow.width) != (mask.height, mask.width):
        raise DimensionMismatch(
            f"flow is {flow.width}x{flow.height} but mask is {mask.width}x{mask.height}"
        )
