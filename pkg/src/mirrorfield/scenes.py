"""Ready-made synthetic scenes placed in a design's evaluation frame."""
from __future__ import annotations

import numpy as np

from . import geometry as geo
from .exceptions import ValidationError
from .simulate import Checkerboard, PointTarget, Scene


def frame_point(state, depth, offset=(0.0, 0.0)):
    """World point at ``depth`` along the central view with an in-plane offset."""
    f = state.eval_frame
    return f.origin(depth) + np.asarray(offset, dtype=float) @ f.axes2d


def board_pose(state, depth, offset=(0.0, 0.0), tilt=(0.0, 0.0)):
    """Board facing the central virtual camera, optionally tilted (radians)."""
    f = state.eval_frame
    e1, e2 = f.axes2d
    R = np.column_stack([e1, e2, f.axis])
    ax, ay = tilt
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    return geo.Pose(R @ rx @ ry, frame_point(state, depth, offset))


def checkerboard_scene(state, depths=(0.5,), rows=8, cols=10, square_size=0.012, tilts=None, background=0.5):
    tilts = tilts or [(0.0, 0.0)] * len(depths)
    boards = [Checkerboard(board_pose(state, d, tilt=t), rows, cols, square_size) for d, t in zip(depths, tilts)]
    return Scene(checkerboards=tuple(boards), background_intensity=background)


def calibration_scene(state, depths=(0.3, 0.5), tilts=((0.2, 0.1), (-0.15, 0.2))):
    """Two tilted 8x10 boards spanning the working range, seen through every mirror."""
    return checkerboard_scene(state, depths=depths, tilts=list(tilts))


def _worst_separation(state, points, cameras):
    """Smallest pixel distance between two targets over all virtual views."""
    worst = np.inf
    iu = np.triu_indices(len(points), 1)
    for vc in cameras:
        local = (points - vc.center) @ vc.orientation
        xn = local[:, :2] / local[:, 2:3]
        d = np.linalg.norm(xn[:, None] - xn[None], axis=2)[iu]
        worst = min(worst, float(d.min()) if d.size else np.inf)
    return worst * state.spec.camera.fx


def point_target_scene(state, count=20, depth_range=(0.35, 0.6), spread=0.035, radius=None, seed=0,
                       background=0.1, angle=float(np.arctan2(1.0, 2.0)), min_separation_px=16.0,
                       tries=2000, size_range=(0.7, 1.4)):
    """``count`` spheres with distinct intensities on a jittered, rotated lattice.

    The lattice is rotated by ``angle`` so that no two targets share a row
    or column of the view grid.  Radii scale with depth, times a factor
    drawn without repetition from ``size_range``, so apparent size does not
    depend on depth but still differs between targets.  Intensities are
    evenly spaced.  Size and intensity together keep descriptors distinct.

    Targets at different depths slide past each other from view to view, so
    the depth assignment and jitter are redrawn (up to ``tries`` times) until
    every pair stays ``min_separation_px`` apart in every virtual view.  The
    best draw is kept if none reaches the threshold.
    """
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(count)))
    grid = np.linspace(-spread, spread, side)
    ca, sa = np.cos(angle), np.sin(angle)
    rot = np.array([[ca, -sa], [sa, ca]])
    cells = np.array([rot @ np.array([x, y]) for y in grid for x in grid][:count])
    pose = state.spec.camera_pose
    cameras = [geo.virtual_camera(pose, m, k) for k, m in enumerate(state.mirrors)]
    step = 2 * spread / max(side - 1, 1)
    best, best_sep = None, -np.inf
    for _ in range(max(int(tries), 1)):
        depths = rng.permutation(np.linspace(depth_range[0], depth_range[1], count))
        jitter = rng.uniform(-0.2, 0.2, size=(count, 2)) * step
        pos = np.array([frame_point(state, d, (xy + j) * d / depth_range[1])
                        for xy, j, d in zip(cells, jitter, depths)]).reshape(-1, 3)
        sep = _worst_separation(state, pos, cameras)
        if sep > best_sep:
            best, best_sep = (pos, depths), sep
        if sep >= min_separation_px:
            break
    pos, depths = best
    levels = rng.permutation(np.linspace(0.45, 1.0, count))
    sizes = rng.permutation(np.linspace(size_range[0], size_range[1], count))
    targets = []
    for p, d, level, size in zip(pos, depths, levels, sizes):
        r = radius if radius is not None else 0.0018 * d / 0.5 * size
        targets.append(PointTarget(tuple(float(v) for v in p), float(r), float(level)))
    return Scene(point_targets=tuple(targets), background_intensity=background)


def scene_from_dict(state, d):
    """Explicit scene dictionary, or a preset resolved against ``state``.

    Presets: ``{"preset": "checkerboard", ...}``, ``{"preset": "calibration"}`` and
    ``{"preset": "points", ...}``
    with keyword arguments of :func:`checkerboard_scene` and
    :func:`point_target_scene`; ``{"preset": "empty"}`` gives a bare background.
    """
    d = dict(d)
    preset = d.pop("preset", None)
    if preset is None:
        return Scene.from_dict(d)
    if preset == "checkerboard":
        if "depths" in d:
            d["depths"] = tuple(d["depths"])
        if "tilts" in d:
            d["tilts"] = [tuple(t) for t in d["tilts"]]
        return checkerboard_scene(state, **d)
    if preset == "calibration":
        return calibration_scene(state, **{k: tuple(v) for k, v in d.items()})
    if preset == "points":
        for key in ("depth_range", "size_range"):
            if key in d:
                d[key] = tuple(d[key])
        return point_target_scene(state, **d)
    if preset == "empty":
        return Scene(background_intensity=float(d.get("background", 0.5)))
    raise ValidationError(f"unknown scene preset {preset!r}")
