"""Plane reflection algebra, the pinhole camera model and convex polygons.

Conventions used throughout the package:

* World points are 3-vectors in meters.
* ``Pose.rotation`` maps camera coordinates to world coordinates; camera
  axes follow the computer-vision convention (+x right, +y down, +z
  forward).
* Pixel ``(u, v)`` addresses the *center* of array element ``[v, u]``.
* A mirror is the plane ``{x : normal . x = offset}``; its reflective
  extent is a convex polygon stored in a 2D frame attached to the plane.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import (
    ORTHO_TOL,
    as_points,
    as_vector,
    check_positive,
    check_rotation,
    is_convex_ccw,
    signed_area_2d,
)
from .exceptions import (
    BehindCameraError,
    DivergenceError,
    GeometryError,
    InvalidPlaneError,
    ValidationError,
)

__all__ = [
    "CameraIntrinsics",
    "ConvexPolygon3D",
    "MirrorPlane",
    "Pose",
    "VirtualCamera",
    "clip_convex",
    "polygon_area",
    "project",
    "project_points",
    "reflection_matrix",
    "undistort_pixel",
    "undistort_pixels",
    "virtual_camera",
]

COPLANAR_TOL = 1e-7


def _tangent_basis(normal, hint=None):
    """Two orthonormal vectors spanning the plane orthogonal to ``normal``."""
    n = np.asarray(normal, dtype=float)
    if hint is None:
        hint = np.eye(3)[int(np.argmin(np.abs(n)))]
    e1 = np.asarray(hint, dtype=float) - np.dot(hint, n) * n
    norm = np.linalg.norm(e1)
    if norm < 1e-9:
        e1 = np.eye(3)[int(np.argmin(np.abs(n)))]
        e1 = e1 - np.dot(e1, n) * n
        norm = np.linalg.norm(e1)
    e1 = e1 / norm
    e2 = np.cross(n, e1)
    return e1, e2 / np.linalg.norm(e2)


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    """Pinhole intrinsics with two-term radial distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    width: int = 1920
    height: int = 1080

    def __post_init__(self):
        for name in ("fx", "fy"):
            check_positive(getattr(self, name), name)
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("sensor size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie on the sensor")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def has_distortion(self):
        return self.k1 != 0.0 or self.k2 != 0.0

    @property
    def diagonal(self):
        return float(np.hypot(self.width, self.height))

    def without_distortion(self):
        return replace(self, k1=0.0, k2=0.0)

    def scaled(self, factor):
        """Same optics sampled at ``factor`` times the pixel density."""
        return replace(
            self,
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5,
            cy=(self.cy + 0.5) * factor - 0.5,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )

    @classmethod
    def from_fov(cls, width, height, hfov_deg, k1=0.0, k2=0.0):
        f = (width / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, k1, k2, width, height)

    def to_dict(self):
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "k1", "k2", "width", "height")}

    @classmethod
    def from_dict(cls, d):
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            float(d.get("k1", 0.0)), float(d.get("k2", 0.0)),
            int(d["width"]), int(d["height"]),
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera (or board) pose: ``rotation`` is local-to-world."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation, 1.0).copy())
        object.__setattr__(self, "center", as_vector(self.center, 3, "center").copy())
        self.rotation.flags.writeable = False
        self.center.flags.writeable = False

    def to_local(self, points):
        return (np.asarray(points, dtype=float) - self.center) @ self.rotation

    def to_world(self, points):
        return np.asarray(points, dtype=float) @ self.rotation.T + self.center

    @classmethod
    def looking_at(cls, center, target, up=(0.0, 0.0, 1.0)):
        """Camera at ``center`` whose optical axis points at ``target``."""
        center = np.asarray(center, dtype=float)
        z = np.asarray(target, dtype=float) - center
        z = z / np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, (0.0, 1.0, 0.0))
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        return cls(np.column_stack([x, y, z]), center)

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "center": self.center.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["rotation"], dtype=float), np.array(d["center"], dtype=float))


@dataclass(frozen=True, eq=False)
class VirtualCamera:
    """A camera seen through a mirror: reflected center, left-handed frame."""

    center: np.ndarray
    orientation: np.ndarray
    mirror_index: int = -1

    def __post_init__(self):
        object.__setattr__(self, "center", as_vector(self.center, 3, "center"))
        object.__setattr__(self, "orientation", check_rotation(self.orientation, -1.0, "orientation"))

    @property
    def axis(self):
        return self.orientation[:, 2]


@dataclass(frozen=True, eq=False)
class MirrorPlane:
    """Oriented mirror plane with a convex polygonal extent.

    ``extent`` holds counter-clockwise 2D vertices in the frame spanned by
    ``frame_axes`` around ``frame_origin``; planarity of the physical
    mirror therefore holds by construction.
    """

    normal: np.ndarray
    offset: float
    extent: np.ndarray
    frame_origin: np.ndarray
    frame_axes: np.ndarray

    def __post_init__(self):
        n = as_vector(self.normal, 3, "normal")
        if abs(np.linalg.norm(n) - 1.0) > ORTHO_TOL:
            raise InvalidPlaneError(f"mirror normal must be unit length, |n| = {np.linalg.norm(n)!r}")
        origin = as_vector(self.frame_origin, 3, "frame_origin")
        axes = np.asarray(self.frame_axes, dtype=float)
        if axes.shape != (2, 3):
            raise InvalidPlaneError("frame_axes must be two 3-vectors")
        if abs(n @ origin - float(self.offset)) > ORTHO_TOL:
            raise InvalidPlaneError("frame_origin does not lie on the plane")
        gram = axes @ axes.T
        if np.max(np.abs(gram - np.eye(2))) > ORTHO_TOL or np.max(np.abs(axes @ n)) > ORTHO_TOL:
            raise InvalidPlaneError("frame_axes must be orthonormal and in-plane")
        ext = as_points(self.extent, 2, "extent", min_count=3)
        if not is_convex_ccw(ext, tol=1e-15):
            raise InvalidPlaneError("extent must be a convex counter-clockwise polygon")
        for name, val in (("normal", n), ("frame_origin", origin), ("frame_axes", axes), ("extent", ext)):
            val = val.copy()
            val.flags.writeable = False
            object.__setattr__(self, name, val)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_point_normal(cls, point, normal, extent=None, axis_hint=None):
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        p = np.asarray(point, dtype=float)
        e1, e2 = _tangent_basis(n, axis_hint)
        if extent is None:
            extent = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
        return cls(n, float(n @ p), extent, p, np.vstack([e1, e2]))

    @property
    def world_vertices(self):
        return self.frame_origin + self.extent @ self.frame_axes

    @property
    def centroid(self):
        return self.world_vertices.mean(axis=0)

    def to_local(self, points):
        """In-plane 2D coordinates of world points (their projection onto the plane)."""
        return (np.asarray(points, dtype=float) - self.frame_origin) @ self.frame_axes.T

    def to_world(self, pts2d):
        return self.frame_origin + np.asarray(pts2d, dtype=float) @ self.frame_axes

    def contains_local(self, pts2d, tol=0.0):
        return inside_convex_2d(pts2d, self.extent, tol)

    def signed_distance(self, points):
        return np.asarray(points, dtype=float) @ self.normal - self.offset

    def with_plane(self, normal, offset):
        """Same extent carried onto a new plane.

        The frame origin moves to its orthogonal projection onto the new
        plane and the frame axes are re-orthogonalized against the new
        normal, so small plane updates move the extent smoothly.
        """
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        origin = self.frame_origin - (n @ self.frame_origin - offset) * n
        e1, e2 = _tangent_basis(n, self.frame_axes[0])
        return MirrorPlane(n, float(n @ origin), self.extent, origin, np.vstack([e1, e2]))

    def with_extent(self, extent):
        return replace(self, extent=np.asarray(extent, dtype=float))

    def to_dict(self):
        return {
            "normal": self.normal.tolist(),
            "offset": self.offset,
            "extent": self.extent.tolist(),
            "frame_origin": self.frame_origin.tolist(),
            "frame_axes": self.frame_axes.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.array(d["normal"], dtype=float), float(d["offset"]),
            np.array(d["extent"], dtype=float), np.array(d["frame_origin"], dtype=float),
            np.array(d["frame_axes"], dtype=float),
        )


@dataclass(frozen=True, eq=False)
class ConvexPolygon3D:
    """Planar convex polygon in 3D; zero vertices denotes the empty set."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.size == 0:
            v = v.reshape(0, 3)
        v = as_points(v, 3, "vertices")
        if len(v) >= 3:
            n, d = _fit_plane(v)
            if np.max(np.abs(v @ n - d)) > COPLANAR_TOL:
                raise GeometryError("polygon vertices are not coplanar")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "vertices", v)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)))

    @property
    def is_empty(self):
        return len(self.vertices) < 3

    @property
    def area(self):
        return polygon_area(self)

    def __len__(self):
        return len(self.vertices)


# ---------------------------------------------------------------------------
# Reflection
# ---------------------------------------------------------------------------


def _check_unit(plane):
    n = np.asarray(plane.normal, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > ORTHO_TOL:
        raise InvalidPlaneError("mirror normal must be unit length")
    return n


def reflection_matrix(plane):
    """4x4 homogeneous reflection through ``plane`` (an involution)."""
    n = _check_unit(plane)
    H = np.eye(4)
    H[:3, :3] -= 2.0 * np.outer(n, n)
    H[:3, 3] = 2.0 * plane.offset * n
    return H


def reflect_points(plane, points):
    n = np.asarray(plane.normal, dtype=float)
    p = np.asarray(points, dtype=float)
    return p - 2.0 * (p @ n - plane.offset)[..., None] * n


def reflect_directions(plane, dirs):
    n = np.asarray(plane.normal, dtype=float)
    d = np.asarray(dirs, dtype=float)
    return d - 2.0 * (d @ n)[..., None] * n


def virtual_camera(real, plane, mirror_index=-1):
    """Reflection of the real camera through a mirror."""
    H = reflection_matrix(plane)
    center = H[:3, :3] @ real.center + H[:3, 3]
    return VirtualCamera(center, H[:3, :3] @ real.rotation, mirror_index)


# ---------------------------------------------------------------------------
# Projection and distortion
# ---------------------------------------------------------------------------


def distort_normalized(intr, xy):
    xy = np.asarray(xy, dtype=float)
    r2 = np.sum(xy * xy, axis=-1, keepdims=True)
    return xy * (1.0 + intr.k1 * r2 + intr.k2 * r2 * r2)


def normalized_to_pixel(intr, xy, distort=True):
    xy = distort_normalized(intr, xy) if distort else np.asarray(xy, dtype=float)
    return np.stack([intr.fx * xy[..., 0] + intr.cx, intr.fy * xy[..., 1] + intr.cy], axis=-1)


def project_points(intr, pose, points, distort=True):
    """Vectorized :func:`project`; raises if any point is not in front."""
    pc = pose.to_local(points)
    z = pc[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point at or behind the camera plane")
    return normalized_to_pixel(intr, pc[..., :2] / z[..., None], distort)


def project(intr, pose, point):
    """Pixel location of a world point seen by a distorted pinhole camera."""
    return project_points(intr, pose, np.asarray(point, dtype=float)[None, :])[0]


def undistort_pixels(intr, pixels, max_iter=20, tol=1e-10, domain=1.5, raise_on_fail=True):
    """Normalized undistorted coordinates of distorted pixels.

    Inverts ``r (1 + k1 r^2 + k2 r^4) = r_d`` for the radius by damped
    Newton iteration; the direction is unchanged by radial distortion.
    With ``raise_on_fail=False`` failed entries come back as NaN.
    """
    px = np.asarray(pixels, dtype=float)
    off = px - np.array([intr.cx, intr.cy])
    if domain is not None and np.any(np.hypot(off[..., 0], off[..., 1]) > domain * intr.diagonal):
        raise ValidationError(f"pixel farther than {domain} sensor diagonals from the principal point")
    xd = np.stack([off[..., 0] / intr.fx, off[..., 1] / intr.fy], axis=-1)
    if not intr.has_distortion:
        return xd
    rd = np.hypot(xd[..., 0], xd[..., 1])
    k1, k2 = intr.k1, intr.k2

    def f(r):
        r2 = r * r
        return r * (1.0 + k1 * r2 + k2 * r2 * r2) - rd

    r = rd.copy()
    fr = f(r)
    done = np.abs(fr) <= tol
    for _ in range(max_iter):
        if np.all(done):
            break
        r2 = r * r
        deriv = 1.0 + 3.0 * k1 * r2 + 5.0 * k2 * r2 * r2
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(done, 0.0, fr / deriv)
        step = np.where(np.isfinite(step), step, 0.0)
        lam = np.ones_like(r)
        new = r - step
        fnew = f(new)
        for _ in range(8):
            worse = (np.abs(fnew) > np.abs(fr)) & ~done
            if not np.any(worse):
                break
            lam = np.where(worse, lam * 0.5, lam)
            new = np.where(worse, r - lam * step, new)
            fnew = np.where(worse, f(new), fnew)
        r, fr = new, fnew
        done = np.abs(fr) <= tol
    ok = done & (r >= 0)
    if raise_on_fail and not np.all(ok):
        raise DivergenceError("radial undistortion did not converge")
    # one undamped polish step: Newton is quadratic here, so this takes the
    # stopping tolerance down to rounding level
    r2 = r * r
    with np.errstate(divide="ignore", invalid="ignore"):
        polish = fr / (1.0 + 3.0 * k1 * r2 + 5.0 * k2 * r2 * r2)
    r = np.where(ok & np.isfinite(polish), r - polish, r)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(rd > 0, r / rd, 1.0)
    out = xd * scale[..., None]
    if not raise_on_fail:
        out = np.where(ok[..., None], out, np.nan)
    return out


def undistort_pixel(intr, pixel, max_iter=20, tol=1e-10, domain=1.5):
    """Normalized undistorted coordinates of one distorted pixel."""
    return undistort_pixels(intr, np.asarray(pixel, dtype=float)[None, :], max_iter, tol, domain)[0]


def pixel_rays(intr, pose, pixels, **kw):
    """World-frame unit ray directions through distorted pixels."""
    xn = undistort_pixels(intr, pixels, **kw)
    d = np.concatenate([xn, np.ones(xn.shape[:-1] + (1,))], axis=-1) @ pose.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Planar polygons
# ---------------------------------------------------------------------------


def _fit_plane(v):
    """Plane through a polygon by Newell's method: (unit normal, offset)."""
    nxt = np.roll(v, -1, axis=0)
    n = np.cross(v, nxt).sum(axis=0)
    norm = np.linalg.norm(n)
    if norm < 1e-300:
        # collinear or degenerate: fall back to SVD
        _, _, vt = np.linalg.svd(v - v.mean(axis=0))
        n = vt[-1]
    else:
        n = n / norm
    return n, float(n @ v.mean(axis=0))


def polygon_area(p):
    """Area of a planar polygon (m^2); zero when it has fewer than 3 vertices."""
    v = p.vertices if isinstance(p, ConvexPolygon3D) else np.asarray(p, dtype=float)
    if len(v) < 3:
        return 0.0
    if v.shape[1] == 2:
        return abs(signed_area_2d(v))
    return 0.5 * float(np.linalg.norm(np.cross(v, np.roll(v, -1, axis=0)).sum(axis=0)))


def inside_convex_2d(pts, poly, tol=0.0):
    """Mask of points inside a CCW convex polygon (boundary inclusive)."""
    pts = np.asarray(pts, dtype=float)
    poly = np.asarray(poly, dtype=float)
    x, y = pts[..., 0], pts[..., 1]
    inside = np.ones(pts.shape[:-1], dtype=bool)
    # one half-plane per edge; polygons have few edges, frames have many points
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        e = b - a
        elen = np.hypot(e[0], e[1])
        inside &= (e[0] * (y - a[1]) - e[1] * (x - a[0])) / elen >= -tol
    return inside


def clip_polygon_2d(subject, clip):
    """Sutherland-Hodgman clip of ``subject`` by the convex CCW ``clip``."""
    out = [np.asarray(p, dtype=float) for p in subject]
    clip = np.asarray(clip, dtype=float)
    for i in range(len(clip)):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % len(clip)]
        edge = b - a
        inp, out = out, []

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        s = inp[-1]
        ss = side(s)
        for p in inp:
            sp = side(p)
            if sp >= 0:
                if ss < 0:
                    out.append(s + (p - s) * (ss / (ss - sp)))
                out.append(p)
            elif ss >= 0:
                out.append(s + (p - s) * (ss / (ss - sp)))
            s, ss = p, sp
    if not out:
        return np.zeros((0, 2))
    res = np.array(out)
    keep = np.ones(len(res), dtype=bool)
    for i in range(len(res)):
        if np.all(np.abs(res[i] - res[i - 1]) <= 1e-15 * (1 + np.abs(res[i]))) and len(res) > 1:
            keep[i] = False
    return res[keep] if keep.any() else res[:1]


def ccw(poly):
    poly = np.asarray(poly, dtype=float)
    return poly[::-1].copy() if signed_area_2d(poly) < 0 else poly


def _plane_frame(normal, offset):
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    e1, e2 = _tangent_basis(n)
    return n, offset * n, np.vstack([e1, e2])


def clip_convex(a, b, shared_plane=None):
    """Intersection of two coplanar convex polygons.

    ``shared_plane`` is an optional ``(normal, offset)`` pair or
    :class:`MirrorPlane`; by default the plane is fitted to ``a``.
    """
    if a.is_empty or b.is_empty:
        return ConvexPolygon3D.empty()
    if shared_plane is None:
        n, d = _fit_plane(a.vertices)
    elif isinstance(shared_plane, MirrorPlane):
        n, d = shared_plane.normal, shared_plane.offset
    else:
        n, d = shared_plane
    n, origin, axes = _plane_frame(n, d)
    d = float(n @ origin)
    for poly in (a, b):
        if np.max(np.abs(poly.vertices @ n - d)) > COPLANAR_TOL:
            raise GeometryError("clip_convex inputs are not coplanar")
    a2 = ccw((a.vertices - origin) @ axes.T)
    b2 = ccw((b.vertices - origin) @ axes.T)
    res = clip_polygon_2d(a2, b2)
    ref = max(abs(signed_area_2d(a2)), abs(signed_area_2d(b2)))
    if len(res) < 3 or abs(signed_area_2d(res)) <= 1e-14 * ref:
        return ConvexPolygon3D.empty()
    return ConvexPolygon3D(origin + res @ axes)


def polygon_distance_2d(p, q):
    """Euclidean distance between two convex 2D polygons.

    Overlapping polygons get a negative value: minus the smallest
    separating-axis penetration.
    """
    p = ccw(p)
    q = ccw(q)
    sep = -np.inf
    for poly, other in ((p, q), (q, p)):
        e = np.roll(poly, -1, axis=0) - poly
        nrm = np.stack([e[:, 1], -e[:, 0]], axis=1)
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        # outward normals for CCW order; separation along each
        proj_self = np.einsum("ij,ij->i", nrm, poly)
        proj_other = (other @ nrm.T).min(axis=0)
        sep = max(sep, float(np.max(proj_other - proj_self)))
    if sep < 0:
        return sep
    best = np.inf
    for poly, other in ((p, q), (q, p)):
        a = poly
        b = np.roll(poly, -1, axis=0)
        ab = b - a
        for pt in other:
            t = np.clip(np.einsum("ij,ij->i", pt - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
            best = min(best, float(np.min(np.linalg.norm(a + t[:, None] * ab - pt, axis=1))))
    return best


def shrink_polygon_2d(poly, margin):
    """Inset a convex CCW polygon by ``margin``; empty if it vanishes."""
    poly = ccw(poly)
    if margin == 0:
        return poly.copy()
    n = len(poly)
    e = np.roll(poly, -1, axis=0) - poly
    inward = np.stack([-e[:, 1], e[:, 0]], axis=1)
    inward /= np.linalg.norm(inward, axis=1, keepdims=True)
    a = poly + margin * inward
    out = []
    for i in range(n):
        p0, d0 = a[i - 1], e[i - 1]
        p1, d1 = a[i], e[i]
        den = d0[0] * d1[1] - d0[1] * d1[0]
        if abs(den) < 1e-15:
            out.append(p1)
            continue
        t = ((p1[0] - p0[0]) * d1[1] - (p1[1] - p0[1]) * d1[0]) / den
        out.append(p0 + t * d0)
    out = np.array(out)
    if signed_area_2d(out) <= 0 or not is_convex_ccw(out, tol=1e-12):
        return np.zeros((0, 2))
    return out


def ray_plane_hits(origins, dirs, plane):
    """Ray parameters and in-plane coordinates where rays cross a mirror plane.

    Returns ``(t, local)``; ``t`` is ``inf`` for rays parallel to the plane.
    """
    o = np.asarray(origins, dtype=float)
    d = np.asarray(dirs, dtype=float)
    den = d @ plane.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (plane.offset - o @ plane.normal) / den
    t = np.where(np.abs(den) > 1e-15, t, np.inf)
    hit = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
    return t, plane.to_local(hit)


def segment_hits_polygon(starts, ends, plane, tol=0.0):
    """Mask of segments crossing a mirror's extent strictly between endpoints."""
    d = np.asarray(ends, dtype=float) - np.asarray(starts, dtype=float)
    t, local = ray_plane_hits(starts, d, plane)
    eps = 1e-9
    return (t > eps) & (t < 1.0 - eps) & plane.contains_local(local, tol)
