"""Synthetic imagery through the mirror array.

Stands in for the physical adapter: ideal first-surface mirrors, no direct
view past the mirrors, grayscale shading.  Checkerboard corners are
identified by ``(board, row, col)`` so calibration needs no detector.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import geometry as geo
from ._validation import check_in_range, check_positive
from .exceptions import MirrorfieldError, NotVisibleError, ValidationError

__all__ = [
    "Checkerboard",
    "Observation",
    "PointTarget",
    "RawImage",
    "Scene",
    "SubImageMap",
    "corner_points",
    "project_via_mirror",
    "render",
    "subimage_map",
    "synth_observations",
    "trace_pixel",
]

WHITE, BLACK = 0.95, 0.05


@dataclass(frozen=True, eq=False)
class Checkerboard:
    """``rows`` x ``cols`` squares centered on ``pose``; inner corners are the targets."""

    pose: geo.Pose
    rows: int
    cols: int
    square_size: float

    def __post_init__(self):
        check_positive(self.square_size, "square_size")
        if self.rows < 2 or self.cols < 2:
            raise ValidationError("a checkerboard needs at least 2x2 squares")

    @property
    def size(self):
        return self.cols * self.square_size, self.rows * self.square_size

    def corner_local(self):
        """Inner-corner coordinates in the board plane, ids in row-major order."""
        w, h = self.size
        ids, pts = [], []
        for r in range(self.rows - 1):
            for c in range(self.cols - 1):
                ids.append((r, c))
                pts.append(((c + 1) * self.square_size - w / 2, (r + 1) * self.square_size - h / 2, 0.0))
        return ids, np.array(pts)

    def to_dict(self):
        return {"pose": self.pose.to_dict(), "rows": self.rows, "cols": self.cols, "square_size": self.square_size}

    @classmethod
    def from_dict(cls, d):
        return cls(geo.Pose.from_dict(d["pose"]), int(d["rows"]), int(d["cols"]), float(d["square_size"]))


@dataclass(frozen=True)
class PointTarget:
    position: tuple
    radius: float
    intensity: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(x) for x in self.position))
        check_positive(self.radius, "radius")
        check_in_range(self.intensity, 0.0, 1.0, "intensity")

    def to_dict(self):
        return {"position": list(self.position), "radius": self.radius, "intensity": self.intensity}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["position"]), float(d["radius"]), float(d.get("intensity", 1.0)))


@dataclass(frozen=True, eq=False)
class Scene:
    checkerboards: tuple = ()
    point_targets: tuple = ()
    background_intensity: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "checkerboards", tuple(self.checkerboards))
        object.__setattr__(self, "point_targets", tuple(self.point_targets))
        check_in_range(self.background_intensity, 0.0, 1.0, "background_intensity")

    def to_dict(self):
        return {
            "checkerboards": [b.to_dict() for b in self.checkerboards],
            "point_targets": [p.to_dict() for p in self.point_targets],
            "background_intensity": self.background_intensity,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(Checkerboard.from_dict(b) for b in d.get("checkerboards", [])),
            tuple(PointTarget.from_dict(p) for p in d.get("point_targets", [])),
            float(d.get("background_intensity", 0.5)),
        )


@dataclass(eq=False)
class RawImage:
    """Grayscale frame; ``mask`` (True = valid) is optional."""

    width: int
    height: int
    pixels: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image must have non-zero size")
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(self.height, self.width)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool).reshape(self.height, self.width)

    @property
    def valid(self):
        return np.ones((self.height, self.width), dtype=bool) if self.mask is None else self.mask


@dataclass(frozen=True, eq=False)
class SubImageMap:
    """Per-mirror sub-image polygons in raw (distorted) pixel coordinates."""

    width: int
    height: int
    entries: tuple  # ((mirror_index, (N, 2) polygon), ...)

    def polygon(self, mirror_index):
        for k, poly in self.entries:
            if k == mirror_index:
                return poly
        raise KeyError(mirror_index)

    @property
    def mirror_indices(self):
        return [k for k, _ in self.entries]

    def to_dict(self):
        return {
            "width": self.width,
            "height": self.height,
            "subimages": [{"mirror_index": k, "polygon": np.asarray(p).tolist()} for k, p in self.entries],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            int(d["width"]), int(d["height"]),
            tuple((int(e["mirror_index"]), np.array(e["polygon"], dtype=float)) for e in d["subimages"]),
        )


class Observation(NamedTuple):
    mirror_index: int
    corner_id: tuple  # (board, row, col)
    pixel: np.ndarray


# ---------------------------------------------------------------------------
# Ray tracing
# ---------------------------------------------------------------------------


def _first_mirror(mirrors, origins, dirs):
    """Nearest mirror hit per ray: (index or -1, ray parameter)."""
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_k = np.full(n, -1)
    for k, m in enumerate(mirrors):
        t, local = geo.ray_plane_hits(origins, dirs, m)
        hit = (t > 1e-12) & np.isfinite(t) & m.contains_local(local)
        closer = hit & (t < best_t)
        best_t = np.where(closer, t, best_t)
        best_k = np.where(closer, k, best_k)
    return best_k, best_t


def _shade_scene(scene, origins, dirs):
    """Intensity of the first scene surface along each ray (background on miss)."""
    n = len(dirs)
    best_t = np.full(n, np.inf)
    value = np.full(n, scene.background_intensity)
    for board in scene.checkerboards:
        R, c = board.pose.rotation, board.pose.center
        nb = R[:, 2]
        den = dirs @ nb
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - origins) @ nb) / den
        ok = np.isfinite(t) & (t > 1e-9) & (t < best_t)
        if not np.any(ok):
            continue
        p = origins + np.where(ok, t, 0.0)[:, None] * dirs - c
        x, y = p @ R[:, 0], p @ R[:, 1]
        w, h = board.size
        inside = ok & (np.abs(x) <= w / 2) & (np.abs(y) <= h / 2)
        i = np.floor((x + w / 2) / board.square_size).astype(int)
        j = np.floor((y + h / 2) / board.square_size).astype(int)
        shade = np.where((i + j) % 2 == 0, WHITE, BLACK)
        best_t = np.where(inside, t, best_t)
        value = np.where(inside, shade, value)
    for tgt in scene.point_targets:
        oc = origins - np.asarray(tgt.position)
        b = np.einsum("ij,ij->i", oc, dirs)
        cc = np.einsum("ij,ij->i", oc, oc) - tgt.radius**2
        a = np.einsum("ij,ij->i", dirs, dirs)
        disc = b * b - a * cc
        with np.errstate(invalid="ignore"):
            sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
        t = np.where(t0 > 1e-9, t0, t1)
        hit = (disc >= 0) & (t > 1e-9) & (t < best_t)
        best_t = np.where(hit, t, best_t)
        # smooth radial falloff from the center ray toward the background at the rim
        rho2 = np.clip(1.0 - disc / (a * tgt.radius**2), 0.0, 1.0)
        shade = scene.background_intensity + (tgt.intensity - scene.background_intensity) * (1.0 - rho2) ** 2
        value = np.where(hit, shade, value)
    return value


def trace_pixels(state, scene, pixels, return_mirror=False):
    """Vectorized :func:`trace_pixel` over an (N, 2) array of pixel positions."""
    intr, pose = state.spec.camera, state.spec.camera_pose
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    xn = geo.undistort_pixels(intr, pixels, domain=None, raise_on_fail=False)
    good = np.all(np.isfinite(xn), axis=1)
    xn = np.where(good[:, None], xn, 0.0)
    dirs = np.concatenate([xn, np.ones((len(xn), 1))], axis=1) @ pose.rotation.T
    origins = np.broadcast_to(pose.center, dirs.shape)
    k, t = _first_mirror(state.mirrors, origins, dirs)
    k = np.where(good, k, -1)
    out = np.full(len(pixels), scene.background_intensity)
    for m_idx, m in enumerate(state.mirrors):
        sel = k == m_idx
        if not np.any(sel):
            continue
        hit = origins[sel] + t[sel, None] * dirs[sel]
        out[sel] = _shade_scene(scene, hit, geo.reflect_directions(m, dirs[sel]))
    return (out, k) if return_mirror else out


def trace_pixel(state, scene, pixel):
    """Intensity seen at one (sub)pixel position of the base camera."""
    return float(trace_pixels(state, scene, np.asarray(pixel, dtype=float)[None, :])[0])


def _splitmix(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _hash_uniform(seed, counters):
    """Counter-based uniforms in [0, 1): independent of evaluation order."""
    with np.errstate(over="ignore"):
        h = _splitmix(counters.astype(np.uint64) ^ _splitmix(np.uint64(seed) + np.zeros(1, np.uint64)))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def render(state, scene, supersample=1, seed=0, jitter=True, chunk_rows=64):
    """Render the raw base-camera frame.

    Each pixel averages ``supersample**2`` stratified samples; with
    ``jitter`` each sample is displaced within its stratum by a hash of
    (seed, pixel, sample) so results are order independent.
    """
    if int(supersample) < 1:
        raise ValidationError("supersample must be >= 1")
    ss = int(supersample)
    intr = state.spec.camera
    W, H = intr.width, intr.height
    if W <= 0 or H <= 0:
        raise ValidationError("zero-size image")
    img = np.empty((H, W))
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    sy, sx = np.meshgrid(sub, sub, indexing="ij")
    sx, sy = sx.ravel(), sy.ravel()
    ns = ss * ss
    for r0 in range(0, H, chunk_rows):
        r1 = min(H, r0 + chunk_rows)
        vv, uu = np.meshgrid(np.arange(r0, r1), np.arange(W), indexing="ij")
        pix_idx = (vv * W + uu).ravel()
        u = uu.ravel()[:, None] + sx[None, :]
        v = vv.ravel()[:, None] + sy[None, :]
        if jitter:
            ctr = (pix_idx[:, None].astype(np.uint64) * np.uint64(ns) + np.arange(ns, dtype=np.uint64)) * np.uint64(2)
            u = u + (_hash_uniform(seed, ctr) - 0.5) / ss
            v = v + (_hash_uniform(seed, ctr + np.uint64(1)) - 0.5) / ss
        vals = trace_pixels(state, scene, np.stack([u.ravel(), v.ravel()], axis=1))
        img[r0:r1] = vals.reshape(-1, ns).mean(axis=1).reshape(r1 - r0, W)
    return RawImage(W, H, img)


# ---------------------------------------------------------------------------
# Analytic forward model
# ---------------------------------------------------------------------------


def _check_visible(pose, mirror, point, extent_tol=0.0):
    if mirror.signed_distance(point) <= 0:
        raise NotVisibleError("point lies behind the mirror")
    hp = geo.reflect_points(mirror, point)
    t, local = geo.ray_plane_hits(pose.center[None, :], (hp - pose.center)[None, :], mirror)
    if not (0 < t[0] < 1) or not mirror.contains_local(local, extent_tol)[0]:
        raise NotVisibleError("line of sight misses the mirror extent")
    return hp


def project_via_mirror(state, mirror_index, point, check=True, extent_tol=0.0):
    """Pixel where ``point`` appears via one mirror.

    Projecting the reflected point with the real camera is optically the
    same as viewing the real point through the mirror.
    """
    mirror = state.mirrors[mirror_index]
    pose = state.spec.camera_pose
    point = np.asarray(point, dtype=float)
    if check:
        hp = _check_visible(pose, mirror, point, extent_tol)
    else:
        hp = geo.reflect_points(mirror, point)
    return geo.project(state.spec.camera, pose, hp)


def corner_points(scene):
    """World positions of all inner checkerboard corners, keyed by (board, row, col)."""
    ids, pts = [], []
    for b, board in enumerate(scene.checkerboards):
        cid, local = board.corner_local()
        ids.extend((b, r, c) for r, c in cid)
        pts.append(board.pose.to_world(local))
    return ids, (np.vstack(pts) if pts else np.zeros((0, 3)))


def synth_observations(state, scene, noise_px=0.0, seed=0):
    """Corner observations via every mirror with isotropic Gaussian pixel noise.

    Output is sorted by (mirror_index, corner_id); the noise stream is
    drawn in that order from ``numpy.random.default_rng(seed)``.
    """
    if not scene.checkerboards:
        raise ValidationError("scene has no checkerboards")
    intr, pose = state.spec.camera, state.spec.camera_pose
    ids, pts = corner_points(scene)
    clean = []
    for k, m in enumerate(state.mirrors):
        for cid, p in zip(ids, pts):
            try:
                hp = _check_visible(pose, m, p)
                px = geo.project(intr, pose, hp)
            except MirrorfieldError:
                continue
            if not (0 <= px[0] <= intr.width - 1 and 0 <= px[1] <= intr.height - 1):
                continue
            first, _ = _first_mirror(state.mirrors, pose.center[None, :], (hp - pose.center)[None, :])
            if first[0] != k:
                continue
            clean.append((k, cid, px))
    if not clean:
        warnings.warn("no checkerboard corner is visible through any mirror", RuntimeWarning, stacklevel=2)
        return []
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_px, size=(len(clean), 2)) if noise_px > 0 else np.zeros((len(clean), 2))
    return [Observation(k, cid, px + e) for (k, cid, px), e in zip(clean, noise)]


def subimage_map(state, margin=2.0):
    """Raw-image polygon of each mirror, inset by ``margin`` pixels."""
    intr, pose = state.spec.camera, state.spec.camera_pose
    frame = np.array([[-0.5, -0.5], [intr.width - 0.5, -0.5], [intr.width - 0.5, intr.height - 0.5],
                      [-0.5, intr.height - 0.5]])
    entries = []
    for k, m in enumerate(state.mirrors):
        try:
            px = geo.project_points(intr, pose, m.world_vertices)
        except MirrorfieldError:
            warnings.warn(f"mirror {k} is not in front of the camera; excluded", RuntimeWarning, stacklevel=2)
            continue
        poly = geo.shrink_polygon_2d(geo.ccw(px), margin)
        if len(poly):
            poly = geo.clip_polygon_2d(poly, frame)
        if len(poly) < 3 or geo.signed_area_2d(poly) <= 0:
            warnings.warn(f"mirror {k} falls outside the image; excluded", RuntimeWarning, stacklevel=2)
            continue
        entries.append((k, poly))
    return SubImageMap(intr.width, intr.height, tuple(entries))


def mirror_index_image(state):
    """Index of the mirror each pixel center sees (-1 where none)."""
    intr = state.spec.camera
    vv, uu = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
    scene = Scene()
    _, k = trace_pixels(state, scene, np.stack([uu.ravel(), vv.ravel()], axis=1), return_mirror=True)
    return k.reshape(intr.height, intr.width)


def subimage_coverage(state, submap):
    """Fraction of mirror-seeing pixels that fall inside their own sub-image polygon."""
    kimg = mirror_index_image(state)
    vv, uu = np.meshgrid(np.arange(submap.height), np.arange(submap.width), indexing="ij")
    pts = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(float)
    covered = np.zeros(kimg.size, dtype=bool)
    flat = kimg.ravel()
    for k, poly in submap.entries:
        sel = flat == k
        covered[sel] = geo.inside_convex_2d(pts[sel], poly)
    seen = flat >= 0
    return float(covered[seen].mean()) if seen.any() else 0.0
