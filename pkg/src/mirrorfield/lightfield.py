"""Rectified camera-grid model and the decoded 4D light field container."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .exceptions import ValidationError

# mirror images are left-right reversed; flipping camera x restores handedness
FLIP = np.diag([-1.0, 1.0, 1.0])


@dataclass(frozen=True, eq=False)
class ViewModel:
    mirror_index: int
    grid_index: tuple  # (s, t)
    center: np.ndarray  # actual virtual center, m
    fitted_center: np.ndarray
    residual_translation: np.ndarray  # reported only, never compensated
    rectifying_rotation: np.ndarray  # view frame (after flip) -> target frame
    virtual_orientation: np.ndarray  # det -1
    flip_axis: str = "x"

    def to_dict(self):
        return {
            "mirror_index": self.mirror_index,
            "grid_index": list(self.grid_index),
            "center": self.center.tolist(),
            "fitted_center": self.fitted_center.tolist(),
            "residual_translation": self.residual_translation.tolist(),
            "rectifying_rotation": self.rectifying_rotation.tolist(),
            "virtual_orientation": self.virtual_orientation.tolist(),
            "flip_axis": self.flip_axis,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            int(d["mirror_index"]), tuple(d["grid_index"]), np.array(d["center"]), np.array(d["fitted_center"]),
            np.array(d["residual_translation"]), np.array(d["rectifying_rotation"]),
            np.array(d["virtual_orientation"]), d.get("flip_axis", "x"),
        )


@dataclass(frozen=True, eq=False)
class RectifiedGridModel:
    """Nearest grid of parallel cameras sharing the central view's orientation."""

    views: tuple
    target_rotation: np.ndarray  # target camera-to-world, det +1
    target_intrinsics: geo.CameraIntrinsics
    x_step: np.ndarray  # per +s
    y_step: np.ndarray  # per +t
    shape: tuple  # (S, T)
    central: tuple  # (s, t) of the central view

    def __post_init__(self):
        geo.check_rotation(self.target_rotation, 1.0, "target_rotation")
        n_identity = 0
        for v in self.views:
            geo.check_rotation(v.rectifying_rotation, 1.0, "rectifying_rotation", tol=1e-8)
            if tuple(v.grid_index) == tuple(self.central):
                if np.max(np.abs(v.rectifying_rotation - np.eye(3))) > 1e-9:
                    raise ValidationError("central view must have identity rectifying rotation")
                n_identity += 1
        if n_identity != 1:
            raise ValidationError("exactly one view must sit at the central grid index")
        if self.target_intrinsics.has_distortion:
            raise ValidationError("target intrinsics must be distortion free")

    def view(self, s, t):
        for v in self.views:
            if tuple(v.grid_index) == (s, t):
                return v
        raise KeyError((s, t))

    def view_for_mirror(self, k):
        for v in self.views:
            if v.mirror_index == k:
                return v
        raise KeyError(k)

    @property
    def step_lengths(self):
        return float(np.linalg.norm(self.x_step)), float(np.linalg.norm(self.y_step))

    def target_pose(self, view):
        return geo.Pose(self.target_rotation, view.center)

    def project(self, view, points):
        """Rectified pixel of world points in one view (no translation compensation)."""
        return geo.project_points(self.target_intrinsics, self.target_pose(view), points, distort=False)

    def to_dict(self):
        return {
            "views": [v.to_dict() for v in self.views],
            "target_rotation": self.target_rotation.tolist(),
            "target_intrinsics": self.target_intrinsics.to_dict(),
            "x_step": self.x_step.tolist(),
            "y_step": self.y_step.tolist(),
            "shape": list(self.shape),
            "central": list(self.central),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(ViewModel.from_dict(v) for v in d["views"]), np.array(d["target_rotation"]),
            geo.CameraIntrinsics.from_dict(d["target_intrinsics"]), np.array(d["x_step"]),
            np.array(d["y_step"]), tuple(d["shape"]), tuple(d["central"]),
        )


@dataclass(eq=False)
class LightField4D:
    """Views indexed ``views[s, t]`` as V x U images (rows are v)."""

    views: np.ndarray  # (S, T, V, U)
    masks: np.ndarray  # (S, T, V, U) True = valid
    grid: RectifiedGridModel
    source: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.views.ndim != 4 or self.views.shape != self.masks.shape:
            raise ValidationError("views and masks must share an (S, T, V, U) shape")

    @property
    def dims(self):
        S, T, V, U = self.views.shape
        return S, T, U, V

    @property
    def central(self):
        return tuple(self.grid.central)

    def view(self, s, t):
        return self.views[s, t], self.masks[s, t]

    def tile(self, fill=0.0):
        """Views laid out as a T x S mosaic (t down, s across)."""
        S, T, V, U = self.views.shape
        out = np.full((T * V, S * U), fill)
        for s in range(S):
            for t in range(T):
                out[t * V:(t + 1) * V, s * U:(s + 1) * U] = np.where(self.masks[s, t], self.views[s, t], fill)
        return out
