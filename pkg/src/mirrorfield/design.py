"""Mirror-array design: faceted-parabola start, overlap/grid scoring and
constrained derivative-free refinement.

The array is a rows x cols grid of planar facets; mirror ``k`` sits at row
``k // cols`` and column ``k % cols``.  Each facet's virtual camera is
the reflection of the real camera, and the design trades the closeness of
those virtual centers to an affine grid against the area of the region
seen by every mirror at a set of evaluation depths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from . import geometry as geo
from ._validation import (
    check_in_range,
    check_increasing,
    check_positive,
    is_convex_ccw,
)
from .exceptions import (
    FootprintUnboundedError,
    GeometryError,
    InfeasibleSpacingError,
    InfeasibleStartError,
    MirrorfieldError,
    UnderdeterminedError,
    ValidationError,
)

__all__ = [
    "DesignReport",
    "DesignSpec",
    "DesignState",
    "MirrorArrayDesigner",
    "OptimizationTrace",
    "Violation",
    "check_constraints",
    "default_camera_pose",
    "default_intrinsics",
    "default_spec",
    "design_cost",
    "fov_footprint",
    "full_overlap",
    "grid_fit_error",
    "init_faceted_parabola",
    "optimize",
]

FEASIBILITY_TOL = 1e-6
N_PARAMS = 11  # tilt (2), offset (1), vertex displacements (8)


def default_intrinsics():
    """Stand-in for a 1080p webcam: 70 degree horizontal FOV, mild barrel."""
    return geo.CameraIntrinsics.from_fov(1920, 1080, 70.0, k1=-0.1, k2=0.02)


def default_camera_pose(height=0.09):
    """Camera on the +z axis looking straight down at the array."""
    return geo.Pose(np.diag([1.0, -1.0, -1.0]), np.array([0.0, 0.0, height]))


@dataclass(frozen=True, eq=False)
class DesignSpec:
    rows: int = 3
    cols: int = 3
    scale: float = 0.06
    focal_hint: float = 0.06
    eval_depths: tuple = (0.3, 0.5)
    # the scale-normalized grid error is ~1e-4 while the overlap deficit is
    # ~1e-1, so alpha sits close to 1 to give both terms a comparable pull
    alpha: float = 0.999
    min_gap: float = 0.002
    camera: geo.CameraIntrinsics = field(default_factory=default_intrinsics)
    camera_pose: geo.Pose = field(default_factory=default_camera_pose)

    def __post_init__(self):
        if int(self.rows) < 1 or int(self.cols) < 1 or int(self.rows) * int(self.cols) < 2:
            raise ValidationError("rows*cols must be at least 2")
        object.__setattr__(self, "rows", int(self.rows))
        object.__setattr__(self, "cols", int(self.cols))
        check_positive(self.scale, "scale")
        check_positive(self.focal_hint, "focal_hint")
        depths = check_increasing(self.eval_depths, "eval_depths")
        object.__setattr__(self, "eval_depths", tuple(float(d) for d in depths))
        check_in_range(self.alpha, 0.0, 1.0, "alpha")
        check_positive(self.min_gap, "min_gap", strict=False)

    @property
    def n_mirrors(self):
        return self.rows * self.cols

    @property
    def central_index(self):
        return (self.rows // 2) * self.cols + self.cols // 2

    def grid_index(self, k):
        """(column, row) of mirror ``k``."""
        return k % self.cols, k // self.cols

    def to_dict(self):
        return {
            "rows": self.rows,
            "cols": self.cols,
            "scale": self.scale,
            "focal_hint": self.focal_hint,
            "eval_depths": list(self.eval_depths),
            "alpha": self.alpha,
            "min_gap": self.min_gap,
            "camera": self.camera.to_dict(),
            "camera_pose": self.camera_pose.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        kw = {k: d[k] for k in ("rows", "cols", "scale", "focal_hint", "alpha", "min_gap") if k in d}
        if "eval_depths" in d:
            kw["eval_depths"] = tuple(d["eval_depths"])
        if "camera" in d:
            kw["camera"] = geo.CameraIntrinsics.from_dict(d["camera"])
        if "camera_pose" in d:
            kw["camera_pose"] = geo.Pose.from_dict(d["camera_pose"])
        return cls(**kw)


def default_spec(**overrides):
    return DesignSpec(**overrides)


@dataclass(frozen=True, eq=False)
class EvalFrame:
    """Evaluation planes: orthogonal to ``axis`` at ``depth`` from ``center``."""

    center: np.ndarray
    axis: np.ndarray
    axes2d: np.ndarray

    def plane(self, depth):
        return self.axis, float(self.axis @ self.center + depth)

    def origin(self, depth):
        return self.center + depth * self.axis

    def to_dict(self):
        return {"center": self.center.tolist(), "axis": self.axis.tolist(), "axes2d": self.axes2d.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["center"]), np.array(d["axis"]), np.array(d["axes2d"]))


@dataclass(frozen=True, eq=False)
class DesignState:
    """Mirror array (row-major) plus the fixed evaluation frame.

    ``reference_areas`` normalizes the overlap deficit: one area per
    evaluation depth, taken from the central footprint of the starting
    design so that shrinking the central mirror cannot fake overlap.
    """

    mirrors: tuple
    spec: DesignSpec
    eval_frame: EvalFrame
    reference_areas: tuple

    def __post_init__(self):
        mirrors = tuple(self.mirrors)
        if len(mirrors) != self.spec.n_mirrors:
            raise ValidationError(f"expected {self.spec.n_mirrors} mirrors, got {len(mirrors)}")
        for m in mirrors:
            if len(m.extent) != 4:
                raise ValidationError("mirror extents must be quadrilaterals")
        object.__setattr__(self, "mirrors", mirrors)
        if len(self.reference_areas) != len(self.spec.eval_depths):
            raise ValidationError("one reference area per evaluation depth is required")
        object.__setattr__(self, "reference_areas", tuple(float(a) for a in self.reference_areas))

    @property
    def n_mirrors(self):
        return len(self.mirrors)

    def virtual_cameras(self):
        return [geo.virtual_camera(self.spec.camera_pose, m, k) for k, m in enumerate(self.mirrors)]

    def virtual_centers(self):
        return np.array([v.center for v in self.virtual_cameras()])

    def with_mirrors(self, mirrors):
        return replace(self, mirrors=tuple(mirrors))

    def with_spec(self, spec):
        return replace(self, spec=spec)

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "mirrors": [m.to_dict() for m in self.mirrors],
            "eval_frame": self.eval_frame.to_dict(),
            "reference_areas": list(self.reference_areas),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(geo.MirrorPlane.from_dict(m) for m in d["mirrors"]),
            DesignSpec.from_dict(d["spec"]),
            EvalFrame.from_dict(d["eval_frame"]),
            tuple(d["reference_areas"]),
        )


@dataclass(frozen=True)
class Violation:
    kind: str
    mirrors: tuple
    magnitude: float


@dataclass(frozen=True, eq=False)
class DesignReport:
    cost_total: float
    cost_grid: float
    cost_overlap: float
    overlap_area_per_depth: list
    virtual_centers: np.ndarray
    fitted_grid: tuple
    constraint_violations: list

    def overlap_area(self, depth):
        for d, area, _ in self.overlap_area_per_depth:
            if abs(d - depth) < 1e-12:
                return area
        raise KeyError(depth)

    def to_dict(self):
        origin, xs, ys = self.fitted_grid
        return {
            "cost_total": self.cost_total,
            "cost_grid": self.cost_grid,
            "cost_overlap": self.cost_overlap,
            "overlap": [
                {"depth": d, "area": a, "polygon": p.vertices.tolist()} for d, a, p in self.overlap_area_per_depth
            ],
            "virtual_centers": np.asarray(self.virtual_centers).tolist(),
            "fitted_grid": {"origin": origin.tolist(), "x_step": xs.tolist(), "y_step": ys.tolist()},
            "constraint_violations": [
                {"kind": v.kind, "mirrors": list(v.mirrors), "magnitude": v.magnitude}
                for v in self.constraint_violations
            ],
        }


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _base_frame(pose):
    """Array frame: camera x/y axes and the viewing direction."""
    R = pose.rotation
    return R[:, 0], R[:, 1], R[:, 2]


def init_faceted_parabola(spec):
    """Tangent-plane facets of ``z = (x^2 + y^2) / (4 f)`` tiled over the aperture.

    The parabola lives in the array frame whose z axis points back at the
    camera and whose apex sits where the optical axis meets the world
    plane ``z = 0`` (the default camera looks straight down, so that is
    the world origin).
    """
    pose = spec.camera_pose
    cw, ch = spec.scale / spec.cols, spec.scale / spec.rows
    if spec.min_gap >= min(cw, ch):
        raise InfeasibleSpacingError(
            f"min_gap {spec.min_gap} m leaves no room in a {min(cw, ch):.4g} m cell"
        )
    ax_x, ax_y, view = _base_frame(pose)
    up = -view
    # apex: optical axis meets z = 0; fall back to 'scale' ahead for tilted poses
    if abs(view[2]) > 1e-9 and (0.0 - pose.center[2]) / view[2] > 0:
        apex = pose.center + ((0.0 - pose.center[2]) / view[2]) * view
    else:
        apex = pose.center + spec.scale * view
    f = spec.focal_hint
    half = spec.min_gap / 2.0
    mirrors = []
    for r in range(spec.rows):
        for c in range(spec.cols):
            x0 = -spec.scale / 2 + (c + 0.5) * cw
            y0 = -spec.scale / 2 + (r + 0.5) * ch
            z0 = (x0 * x0 + y0 * y0) / (4 * f)
            # tangent plane z = z0 + gx (x - x0) + gy (y - y0), local frame
            gx, gy = x0 / (2 * f), y0 / (2 * f)
            n_loc = np.array([-gx, -gy, 1.0])
            n_loc /= np.linalg.norm(n_loc)
            corners = []
            for dx, dy in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
                x = x0 + dx * (cw / 2 - half)
                y = y0 + dy * (ch / 2 - half)
                corners.append((x, y, z0 + gx * (x - x0) + gy * (y - y0)))
            corners = np.array(corners)

            def to_world(p):
                p = np.atleast_2d(p)
                return apex + p[:, :1] * ax_x + p[:, 1:2] * ax_y + p[:, 2:3] * up

            center_w = to_world([x0, y0, z0])[0]
            normal_w = n_loc[0] * ax_x + n_loc[1] * ax_y + n_loc[2] * up
            normal_w /= np.linalg.norm(normal_w)
            corners_w = to_world(corners)
            e1, e2 = geo._tangent_basis(normal_w, ax_x)
            origin = center_w
            ext = (corners_w - origin) @ np.vstack([e1, e2]).T
            ext = geo.ccw(ext)
            mirrors.append(geo.MirrorPlane(normal_w, float(normal_w @ origin), ext, origin, np.vstack([e1, e2])))
    return _new_state(tuple(mirrors), spec)


def _make_eval_frame(spec, mirrors):
    vc = geo.virtual_camera(spec.camera_pose, mirrors[spec.central_index], spec.central_index)
    axis = vc.axis / np.linalg.norm(vc.axis)
    e1, e2 = geo._tangent_basis(axis, vc.orientation[:, 0])
    return EvalFrame(vc.center.copy(), axis, np.vstack([e1, e2]))


def _new_state(mirrors, spec, reference_areas=None):
    frame = _make_eval_frame(spec, mirrors)
    if reference_areas is None:
        placeholder = tuple(1.0 for _ in spec.eval_depths)
        tmp = DesignState(mirrors, spec, frame, placeholder)
        reference_areas = tuple(
            geo.polygon_area(_footprint_2d(tmp, spec.central_index, d)) for d in spec.eval_depths
        )
    return DesignState(mirrors, spec, frame, reference_areas)


def state_from_mirrors(mirrors, spec, reference_areas=None):
    """Wrap an arbitrary mirror tuple as a design state."""
    return _new_state(tuple(mirrors), spec, reference_areas)


# ---------------------------------------------------------------------------
# Footprints and overlap
# ---------------------------------------------------------------------------


def _footprint_2d(state, k, depth):
    m = state.mirrors[k]
    cam = state.spec.camera_pose.center
    verts = m.world_vertices
    inc = verts - cam
    refl = geo.reflect_directions(m, inc)
    frame = state.eval_frame
    n, d = frame.plane(depth)
    den = refl @ n
    if np.any(np.abs(den) < 1e-12):
        raise FootprintUnboundedError(f"mirror {k}: reflected ray parallel to evaluation plane", k)
    t = (d - verts @ n) / den
    if np.any(t <= 0):
        raise FootprintUnboundedError(f"mirror {k}: reflected ray never reaches depth {depth}", k)
    hits = verts + t[:, None] * refl
    return geo.ccw((hits - frame.origin(depth)) @ frame.axes2d.T)


def _lift(state, pts2d, depth):
    frame = state.eval_frame
    if len(pts2d) == 0:
        return geo.ConvexPolygon3D.empty()
    return geo.ConvexPolygon3D(frame.origin(depth) + np.asarray(pts2d) @ frame.axes2d)


def fov_footprint(state, mirror_index, depth):
    """Region of the evaluation plane at ``depth`` seen through one mirror."""
    check_positive(depth, "depth")
    return _lift(state, _footprint_2d(state, mirror_index, depth), depth)


def _overlap_2d(polys):
    acc = polys[0]
    for p in polys[1:]:
        if len(acc) < 3:
            return np.zeros((0, 2))
        acc = geo.clip_polygon_2d(acc, p)
    if len(acc) < 3 or geo.signed_area_2d(acc) <= 0:
        return np.zeros((0, 2))
    return acc


def full_overlap(state, depth):
    """Region seen through every mirror at ``depth`` and its area."""
    polys = []
    for k in range(state.n_mirrors):
        try:
            polys.append(_footprint_2d(state, k, depth))
        except FootprintUnboundedError as exc:
            raise FootprintUnboundedError(f"footprint of mirror {k}: {exc}", k) from exc
    acc = _overlap_2d(polys)
    return _lift(state, acc, depth), geo.polygon_area(acc)


# ---------------------------------------------------------------------------
# Grid fit
# ---------------------------------------------------------------------------


def grid_fit_error(centers, rows, cols):
    """Least-squares affine grid through row-major centers.

    Model: ``p(c, r) = origin + c * x_step + r * y_step`` where ``c`` is
    the column and ``r`` the row.  Returns ``(mean squared residual,
    origin, x_step, y_step)``.
    """
    P = np.asarray(centers, dtype=float)
    if P.shape != (rows * cols, 3):
        raise ValidationError(f"expected {rows * cols} centers of dimension 3, got {P.shape}")
    if rows < 2 or cols < 2:
        raise UnderdeterminedError("grid fit needs at least 3 non-collinear grid positions")
    idx = np.arange(rows * cols)
    A = np.column_stack([np.ones(rows * cols), idx % cols, idx // cols])
    coef, *_ = np.linalg.lstsq(A, P, rcond=None)
    resid = P - A @ coef
    err = float(np.sum(resid * resid) / len(P))
    return err, coef[0], coef[1], coef[2]


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------


def _sample_points(m, pull=0.98):
    v = m.extent
    c = v.mean(axis=0)
    mids = 0.5 * (v + np.roll(v, -1, axis=0))
    local = np.vstack([c + pull * (v - c), c + pull * (mids - c), c[None, :]])
    return m.to_world(local)


def _ray_segments(state, k):
    m = state.mirrors[k]
    cam = state.spec.camera_pose.center
    pts = _sample_points(m)
    refl = geo.reflect_directions(m, pts - cam)
    n, d = state.eval_frame.plane(max(state.spec.eval_depths))
    den = refl @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (d - pts @ n) / den
    # rays that never reach the far plane are checked over one meter
    t = np.where(np.isfinite(t) & (t > 0), t, 1.0 / np.maximum(np.linalg.norm(refl, axis=1), 1e-12))
    ends = pts + t[:, None] * refl
    return pts, ends


def _occlusion_fraction(state, i, j, segs=None):
    pts, ends = segs if segs is not None else _ray_segments(state, i)
    cam = np.broadcast_to(state.spec.camera_pose.center, pts.shape)
    other = state.mirrors[j]
    blocked = geo.segment_hits_polygon(cam, pts, other) | geo.segment_hits_polygon(pts, ends, other)
    return float(np.mean(blocked))


def _base_polygon(state, k):
    ax_x, ax_y, _ = _base_frame(state.spec.camera_pose)
    w = state.mirrors[k].world_vertices
    return geo.ccw(np.column_stack([w @ ax_x, w @ ax_y]))


def _neighbours(spec):
    pairs = []
    for k in range(spec.n_mirrors):
        c, r = spec.grid_index(k)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if (dr or dc) and 0 <= rr < spec.rows and 0 <= cc < spec.cols:
                    j = rr * spec.cols + cc
                    if j > k:
                        pairs.append((k, j))
    return pairs


def _spacing_shortfall(state, i, j):
    dist = geo.polygon_distance_2d(_base_polygon(state, i), _base_polygon(state, j))
    short = state.spec.min_gap - dist
    return short if short > 1e-12 else 0.0


def _visibility_excess(state, k, margin=0.0):
    intr = state.spec.camera
    try:
        px = geo.project_points(intr, state.spec.camera_pose, state.mirrors[k].world_vertices)
    except MirrorfieldError:
        return float(intr.width)
    lo = -0.5 + margin
    over = np.concatenate(
        [lo - px[:, 0], px[:, 0] - (intr.width - 0.5 - margin), lo - px[:, 1], px[:, 1] - (intr.height - 0.5 - margin)]
    )
    excess = float(np.max(over))
    return excess if excess > 0 else 0.0


def _degenerate(state, k):
    m = state.mirrors[k]
    if not is_convex_ccw(m.extent, tol=1e-15):
        return True
    return bool(m.signed_distance(state.spec.camera_pose.center) <= 0)


def check_constraints(state):
    """Occlusion, spacing, degeneracy and sensor-visibility violations."""
    out = []
    n = state.n_mirrors
    bad = set()
    for k in range(n):
        if _degenerate(state, k):
            bad.add(k)
            out.append(Violation("degenerate", (k,), 1.0))
    for i in range(n):
        if i in bad:
            continue
        segs = _ray_segments(state, i)
        for j in range(n):
            if j == i or j in bad:
                continue
            frac = _occlusion_fraction(state, i, j, segs)
            if frac > 0:
                out.append(Violation("occlusion", (i, j), frac))
    for i, j in _neighbours(state.spec):
        short = _spacing_shortfall(state, i, j)
        if short > 0:
            out.append(Violation("spacing", (i, j), short))
    for k in range(n):
        ex = _visibility_excess(state, k)
        if ex > 0:
            out.append(Violation("visibility", (k,), ex))
    return out


# ---------------------------------------------------------------------------
# Cost
# ---------------------------------------------------------------------------


def _cost_terms(state, footprints):
    spec = state.spec
    err, origin, xs, ys = grid_fit_error(state.virtual_centers(), spec.rows, spec.cols)
    cost_grid = err / spec.scale**2
    per_depth = []
    deficits = []
    for di, depth in enumerate(spec.eval_depths):
        acc = _overlap_2d([fp[di] for fp in footprints])
        area = geo.polygon_area(acc)
        per_depth.append((depth, area, acc))
        deficits.append(min(1.0, max(0.0, 1.0 - area / state.reference_areas[di])))
    cost_overlap = float(np.mean(deficits))
    total = spec.alpha * cost_grid + (1.0 - spec.alpha) * cost_overlap
    return total, cost_grid, cost_overlap, per_depth, (origin, xs, ys)


def design_cost(state):
    """Grid and overlap costs of a design (constraints listed, not folded in)."""
    footprints = []
    for k in range(state.n_mirrors):
        footprints.append([_footprint_2d(state, k, d) for d in state.spec.eval_depths])
    total, cg, co, per_depth, grid = _cost_terms(state, footprints)
    return DesignReport(
        cost_total=total,
        cost_grid=cg,
        cost_overlap=co,
        overlap_area_per_depth=[(d, a, _lift(state, p, d)) for d, a, p in per_depth],
        virtual_centers=state.virtual_centers(),
        fitted_grid=grid,
        constraint_violations=check_constraints(state),
    )


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

# normalizers applied to violation magnitudes inside the penalty
_PENALTY_UNITS = {"occlusion": 1.0, "spacing": 1e-3, "visibility": 10.0, "degenerate": 1.0}
_STEP = np.array([0.01, 0.01, 5e-4] + [5e-4] * 8)


def _mirror_from_params(base, p):
    e1, e2 = base.frame_axes
    n = base.normal + p[0] * e1 + p[1] * e2
    n = n / np.linalg.norm(n)
    origin = base.frame_origin + p[2] * base.normal
    a1 = e1 - (e1 @ n) * n
    a1 /= np.linalg.norm(a1)
    a2 = np.cross(n, a1)
    ext = base.extent + p[3:].reshape(4, 2)
    if not is_convex_ccw(ext, tol=1e-15):
        raise GeometryError("extent no longer convex")
    return geo.MirrorPlane(n, float(n @ origin), ext, origin, np.vstack([a1, a2]))


class _IncrementalEvaluator:
    """Penalized cost with per-mirror caches; a move touches one mirror."""

    def __init__(self, state):
        self.state = state
        spec = state.spec
        self.n = state.n_mirrors
        self.depths = spec.eval_depths
        self.pairs = _neighbours(spec)
        self.fp = [[_footprint_2d(state, k, d) for d in self.depths] for k in range(self.n)]
        self.segs = [_ray_segments(state, k) for k in range(self.n)]
        self.occ = np.zeros((self.n, self.n))
        for i in range(self.n):
            for j in range(self.n):
                if i != j:
                    self.occ[i, j] = _occlusion_fraction(state, i, j, self.segs[i])
        self.space = {p: _spacing_shortfall(state, *p) for p in self.pairs}
        self.vis = np.array([_visibility_excess(state, k) for k in range(self.n)])

    def penalty_terms(self, occ, space, vis):
        u = _PENALTY_UNITS
        return (
            float(np.sum((occ / u["occlusion"]) ** 2))
            + sum((s / u["spacing"]) ** 2 for s in space.values())
            + float(np.sum((vis / u["visibility"]) ** 2))
        )

    def max_violation(self, occ, space, vis):
        vals = [float(occ.max()), float(vis.max())] + list(space.values())
        return max(vals) if vals else 0.0

    def evaluate(self, state, k):
        """Cost pieces for ``state``, which differs from the cached one in mirror ``k``."""
        if _degenerate(state, k):
            return None
        fp_k = [_footprint_2d(state, k, d) for d in self.depths]
        segs_k = _ray_segments(state, k)
        occ = self.occ.copy()
        for j in range(self.n):
            if j != k:
                occ[k, j] = _occlusion_fraction(state, k, j, segs_k)
                occ[j, k] = _occlusion_fraction(state, j, k, self.segs[j])
        space = dict(self.space)
        for p in self.pairs:
            if k in p:
                space[p] = _spacing_shortfall(state, *p)
        vis = self.vis.copy()
        vis[k] = _visibility_excess(state, k)
        fps = list(self.fp)
        fps[k] = fp_k
        total, cg, co, _, _ = _cost_terms(state, fps)
        return {
            "state": state, "k": k, "fp_k": fp_k, "segs_k": segs_k, "occ": occ,
            "space": space, "vis": vis, "total": total, "grid": cg, "overlap": co,
            "penalty": self.penalty_terms(occ, space, vis),
            "max_violation": self.max_violation(occ, space, vis),
        }

    def accept(self, ev):
        self.state = ev["state"]
        k = ev["k"]
        self.fp[k] = ev["fp_k"]
        self.segs[k] = ev["segs_k"]
        self.occ, self.space, self.vis = ev["occ"], ev["space"], ev["vis"]

    def current(self):
        total, cg, co, _, _ = _cost_terms(self.state, self.fp)
        return {
            "state": self.state, "total": total, "grid": cg, "overlap": co,
            "penalty": self.penalty_terms(self.occ, self.space, self.vis),
            "max_violation": self.max_violation(self.occ, self.space, self.vis),
        }


@dataclass
class OptimizationTrace:
    """Accepted iterates of the pattern search.

    Each row holds the round, the penalty weight in force, and the
    penalized and unpenalized costs after the accepted move.
    """

    method: str
    converged: bool
    rows: list = field(default_factory=list)
    evaluations: int = 0
    initial_report: DesignReport | None = None
    final_report: DesignReport | None = None

    def penalized(self, round_index=None):
        return [r["penalized"] for r in self.rows if round_index is None or r["round"] == round_index]


def optimize(state, rounds=3, initial_weight=10.0, max_sweeps=8, min_step_fraction=1 / 32, max_evals=None):
    """Constrained compass search over per-mirror tilt, offset and extent.

    Each of the ``rounds`` outer rounds minimizes
    ``cost_total + weight * penalty`` by coordinate pattern search with
    step halving, multiplying ``weight`` by 10 between rounds.  Only
    strictly improving moves are accepted, so the penalized cost never
    increases within a round.  The best feasible accepted iterate is
    returned.
    """
    violations = check_constraints(state)
    worst = max((v.magnitude for v in violations), default=0.0)
    if worst > FEASIBILITY_TOL:
        raise InfeasibleStartError(f"starting design violates constraints: {violations[:3]}")
    base = state.mirrors
    n = state.n_mirrors
    params = np.zeros((n, N_PARAMS))
    ev = _IncrementalEvaluator(state)
    cur = ev.current()
    best_feasible = (cur["total"], state)
    trace = OptimizationTrace(
        method=f"compass-search(rounds={rounds}, weight0={initial_weight}, x10/round)",
        converged=False,
        initial_report=design_cost(state),
    )
    weight = initial_weight
    evals = 0
    converged_all = True

    def record(r, it):
        trace.rows.append({
            "round": r, "iteration": it, "weight": weight,
            "penalized": cur["total"] + weight * cur["penalty"],
            "cost_total": cur["total"], "cost_grid": cur["grid"], "cost_overlap": cur["overlap"],
            "penalty": cur["penalty"],
        })

    for r in range(rounds):
        step = _STEP.copy()
        it = 0
        record(r, it)
        round_converged = False
        for _ in range(max_sweeps):
            improved = False
            for k in range(n):
                for p in range(N_PARAMS):
                    if max_evals is not None and evals >= max_evals:
                        break
                    for sign in (1.0, -1.0):
                        if max_evals is not None and evals >= max_evals:
                            break
                        trial = params[k].copy()
                        trial[p] += sign * step[p]
                        try:
                            mk = _mirror_from_params(base[k], trial)
                            cand_state = ev.state.with_mirrors(ev.state.mirrors[:k] + (mk,) + ev.state.mirrors[k + 1:])
                            res = ev.evaluate(cand_state, k)
                        except (MirrorfieldError, FloatingPointError):
                            res = None
                        evals += 1
                        if res is None:
                            continue
                        pen_new = res["total"] + weight * res["penalty"]
                        pen_cur = cur["total"] + weight * cur["penalty"]
                        if pen_new < pen_cur - 1e-15:
                            ev.accept(res)
                            params[k] = trial
                            cur = res
                            it += 1
                            record(r, it)
                            improved = True
                            if res["max_violation"] <= FEASIBILITY_TOL and res["total"] < best_feasible[0]:
                                best_feasible = (res["total"], res["state"])
                            break
                if max_evals is not None and evals >= max_evals:
                    break
            if max_evals is not None and evals >= max_evals:
                break
            if not improved:
                step *= 0.5
                if np.all(step < _STEP * min_step_fraction):
                    round_converged = True
                    break
        converged_all = converged_all and round_converged
        weight *= 10.0
    trace.converged = converged_all
    trace.evaluations = evals
    final = best_feasible[1]
    trace.final_report = design_cost(final)
    return final, trace


class MirrorArrayDesigner(BaseEstimator):
    """Estimator wrapper around :func:`init_faceted_parabola` and :func:`optimize`.

    ``fit(spec)`` builds the faceted parabola and refines it; results land
    in ``initial_state_``, ``state_``, ``report_`` and ``trace_``.
    """

    def __init__(self, alpha=None, eval_depths=None, rounds=3, initial_weight=10.0, max_sweeps=8,
                 max_evals=None, optimize=True):
        self.alpha = alpha
        self.eval_depths = eval_depths
        self.rounds = rounds
        self.initial_weight = initial_weight
        self.max_sweeps = max_sweeps
        self.max_evals = max_evals
        self.optimize = optimize

    def fit(self, spec=None, y=None):
        spec = spec if spec is not None else default_spec()
        if self.alpha is not None:
            spec = replace(spec, alpha=self.alpha)
        if self.eval_depths is not None:
            spec = replace(spec, eval_depths=tuple(self.eval_depths))
        self.spec_ = spec
        self.initial_state_ = init_faceted_parabola(spec)
        if self.optimize:
            self.state_, self.trace_ = optimize(
                self.initial_state_, rounds=self.rounds, initial_weight=self.initial_weight,
                max_sweeps=self.max_sweeps, max_evals=self.max_evals,
            )
            self.initial_report_ = self.trace_.initial_report
            self.report_ = self.trace_.final_report
        else:
            self.state_, self.trace_ = self.initial_state_, None
            self.initial_report_ = self.report_ = design_cost(self.initial_state_)
        return self

    def transform(self, spec=None):
        return self.state_

    def score(self, spec=None, y=None):
        return -self.report_.cost_total
