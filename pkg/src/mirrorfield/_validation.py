"""Input validation helpers shared by the estimators and value types."""
from __future__ import annotations

import numpy as np

from .exceptions import ValidationError

ORTHO_TOL = 1e-9


def as_vector(x, size, name="vector"):
    arr = np.asarray(x, dtype=float)
    if arr.shape != (size,):
        raise ValidationError(f"{name} must have shape ({size},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def as_points(x, dim, name="points", min_count=0):
    arr = np.asarray(x, dtype=float)
    if arr.size == 0:
        arr = arr.reshape(0, dim)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValidationError(f"{name} must have shape (N, {dim}), got {arr.shape}")
    if len(arr) < min_count:
        raise ValidationError(f"{name} needs at least {min_count} rows, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_rotation(R, det=1.0, name="rotation", tol=ORTHO_TOL):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValidationError(f"{name} must be 3x3, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise ValidationError(f"{name} is not orthonormal")
    if abs(np.linalg.det(R) - det) > tol:
        raise ValidationError(f"{name} must have determinant {det:+.0f}")
    return R


def check_positive(value, name, strict=True):
    value = float(value)
    if not np.isfinite(value) or (value <= 0 if strict else value < 0):
        bound = "> 0" if strict else ">= 0"
        raise ValidationError(f"{name} must be {bound}, got {value}")
    return value


def check_in_range(value, lo, hi, name):
    value = float(value)
    if not (lo <= value <= hi):
        raise ValidationError(f"{name} must lie in [{lo}, {hi}], got {value}")
    return value


def check_increasing(values, name):
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise ValidationError(f"{name} must not be empty")
    if np.any(arr <= 0):
        raise ValidationError(f"{name} must all be > 0")
    if np.any(np.diff(arr) <= 0):
        raise ValidationError(f"{name} must be strictly increasing")
    return arr


def signed_area_2d(pts):
    """Shoelace signed area; positive for counter-clockwise order."""
    pts = np.asarray(pts, dtype=float)
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def is_convex_ccw(pts, tol=0.0):
    pts = np.asarray(pts, dtype=float)
    if len(pts) < 3 or signed_area_2d(pts) <= 0:
        return False
    e = np.roll(pts, -1, axis=0) - pts
    cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
    return bool(np.all(cross > -tol))
