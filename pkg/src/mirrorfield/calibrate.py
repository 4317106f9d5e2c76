"""Mirror-geometry calibration from checkerboard corner observations.

Every mirror is a 3-DOF plane (normal direction: 2, offset: 1) and the
base-camera intrinsics stay frozen.  Levenberg-Marquardt minimizes the
pixel error between observed corners and corners projected through the
candidate mirrors.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import geometry as geo
from .design import grid_fit_error
from .exceptions import RankDeficiencyError, UnderdeterminedError, ValidationError
from .lightfield import FLIP, RectifiedGridModel, ViewModel
from .simulate import Checkerboard, Observation, corner_points

__all__ = [
    "CalibrationProblem",
    "CalibrationResult",
    "MirrorCalibrator",
    "levenberg_marquardt",
    "nearest_parallel_grid",
    "residuals",
    "spatial_rms",
]

logger = logging.getLogger(__name__)

MIN_OBS_PER_MIRROR = 6


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    """Observations plus everything held fixed during the mirror fit.

    ``boards`` carry the (known or initial) board poses; ``extent_tol`` is
    the slack, in meters, allowed when deciding whether a corner is still
    seen through a candidate mirror.
    """

    intrinsics: geo.CameraIntrinsics
    camera_pose: geo.Pose
    observations: tuple
    boards: tuple
    initial_mirrors: tuple
    rows: int | None = None
    cols: int | None = None
    cap_px: float = 50.0
    extent_tol: float = 0.005

    def __post_init__(self):
        obs = tuple(sorted(
            (Observation(int(o[0]), tuple(int(x) for x in o[1]), np.asarray(o[2], dtype=float)) for o in self.observations),
            key=lambda o: (o.mirror_index, o.corner_id),
        ))
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "boards", tuple(self.boards))
        object.__setattr__(self, "initial_mirrors", tuple(self.initial_mirrors))
        n = len(self.initial_mirrors)
        counts = np.zeros(n, dtype=int)
        for o in obs:
            if not (0 <= o.mirror_index < n):
                raise ValidationError(f"observation refers to unknown mirror {o.mirror_index}")
            b, r, c = o.corner_id
            if not (0 <= b < len(self.boards)):
                raise ValidationError(f"observation refers to unknown board {b}")
            board = self.boards[b]
            if not (0 <= r < board.rows - 1 and 0 <= c < board.cols - 1):
                raise ValidationError(f"corner {o.corner_id} does not exist on board {b}")
            counts[o.mirror_index] += 1
        short = np.flatnonzero(counts < MIN_OBS_PER_MIRROR)
        if len(short):
            raise ValidationError(
                f"mirror {int(short[0])} has {counts[short[0]]} observations; at least {MIN_OBS_PER_MIRROR} are needed"
            )

    @property
    def n_mirrors(self):
        return len(self.initial_mirrors)

    def corner_world(self, boards=None):
        boards = self.boards if boards is None else boards
        ids, pts = corner_points(_BoardSet(boards))
        lookup = {cid: i for i, cid in enumerate(ids)}
        return np.array([pts[lookup[o.corner_id]] for o in self.observations]).reshape(-1, 3)

    @property
    def observed(self):
        return np.array([o.pixel for o in self.observations]).reshape(-1, 2)

    @property
    def mirror_of(self):
        return np.array([o.mirror_index for o in self.observations], dtype=int)


@dataclass(frozen=True)
class _BoardSet:
    checkerboards: tuple


@dataclass(eq=False)
class CalibrationResult:
    mirrors: tuple
    rms_px: float
    rms_spatial_mm: float
    iterations: int
    converged: bool
    covariance_diag: np.ndarray
    boards: tuple = ()
    flagged: int = 0
    cost_history: list = field(default_factory=list)
    intrinsics: geo.CameraIntrinsics | None = None
    camera_pose: geo.Pose | None = None
    rows: int | None = None
    cols: int | None = None

    @property
    def n_params(self):
        return len(self.covariance_diag)

    def to_dict(self):
        return {
            "mirrors": [m.to_dict() for m in self.mirrors],
            "rms_px": self.rms_px,
            "rms_spatial_mm": self.rms_spatial_mm,
            "iterations": self.iterations,
            "converged": self.converged,
            "covariance_diag": np.asarray(self.covariance_diag).tolist(),
            "boards": [b.to_dict() for b in self.boards],
            "flagged": self.flagged,
            "cost_history": list(self.cost_history),
            "intrinsics": self.intrinsics.to_dict() if self.intrinsics is not None else None,
            "camera_pose": self.camera_pose.to_dict() if self.camera_pose is not None else None,
            "rows": self.rows,
            "cols": self.cols,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            mirrors=tuple(geo.MirrorPlane.from_dict(m) for m in d["mirrors"]),
            rms_px=float(d["rms_px"]),
            rms_spatial_mm=float(d["rms_spatial_mm"]),
            iterations=int(d["iterations"]),
            converged=bool(d["converged"]),
            covariance_diag=np.array(d["covariance_diag"], dtype=float),
            boards=tuple(Checkerboard.from_dict(b) for b in d.get("boards", [])),
            flagged=int(d.get("flagged", 0)),
            cost_history=list(d.get("cost_history", [])),
            intrinsics=geo.CameraIntrinsics.from_dict(d["intrinsics"]) if d.get("intrinsics") else None,
            camera_pose=geo.Pose.from_dict(d["camera_pose"]) if d.get("camera_pose") else None,
            rows=d.get("rows"),
            cols=d.get("cols"),
        )


# ---------------------------------------------------------------------------
# Residuals
# ---------------------------------------------------------------------------


def _mirror_residuals(problem, mirror, pts, observed):
    """Residuals (observed - expected) for one mirror; capped where invisible."""
    pose, intr = problem.camera_pose, problem.intrinsics
    res = np.empty_like(observed)
    flags = np.zeros(len(pts), dtype=bool)
    front = mirror.signed_distance(pts) > 0
    hp = geo.reflect_points(mirror, pts)
    t, local = geo.ray_plane_hits(np.broadcast_to(pose.center, hp.shape), hp - pose.center, mirror)
    ok = front & (t > 0) & (t < 1) & mirror.contains_local(local, problem.extent_tol)
    depth = pose.to_local(hp)[:, 2]
    ok &= depth > 0
    if np.any(ok):
        res[ok] = observed[ok] - geo.project_points(intr, pose, hp[ok])
    cap = problem.cap_px / np.sqrt(2.0)
    res[~ok] = cap
    flags[~ok] = True
    return res, flags


def _all_residuals(problem, mirrors, pts=None):
    pts = problem.corner_world() if pts is None else pts
    obs = problem.observed
    owner = problem.mirror_of
    res = np.zeros_like(obs)
    flags = np.zeros(len(obs), dtype=bool)
    for k, m in enumerate(mirrors):
        sel = owner == k
        if np.any(sel):
            res[sel], flags[sel] = _mirror_residuals(problem, m, pts[sel], obs[sel])
    return res, flags


def residuals(problem, mirrors, return_flags=False):
    """Stacked (observed - expected) pixel residuals, two per observation.

    Observations are ordered by (mirror_index, corner_id).  Corners not
    visible through their candidate mirror get a residual of length
    ``problem.cap_px`` and are flagged.
    """
    res, flags = _all_residuals(problem, mirrors)
    return (res.ravel(), flags) if return_flags else res.ravel()


def rms_px(problem, mirrors):
    r = residuals(problem, mirrors)
    return float(np.sqrt(np.mean(r * r))) if len(r) else 0.0


def spatial_rms(problem, mirrors, boards=None):
    """RMS distance (mm) between known corners and their back-traced rays.

    Each observed pixel is undistorted into a base-camera ray, reflected
    by the calibrated mirror plane, and compared with the corner's true
    position by point-to-line distance.
    """
    pts = problem.corner_world(boards)
    obs = problem.observed
    owner = problem.mirror_of
    pose = problem.camera_pose
    dirs = geo.pixel_rays(problem.intrinsics, pose, obs, domain=None)
    d2 = np.zeros(len(obs))
    for k, m in enumerate(mirrors):
        sel = owner == k
        if not np.any(sel):
            continue
        origins = np.broadcast_to(pose.center, dirs[sel].shape)
        t, _ = geo.ray_plane_hits(origins, dirs[sel], m)
        hit = origins + t[:, None] * dirs[sel]
        refl = geo.reflect_directions(m, dirs[sel])
        norm = np.linalg.norm(refl, axis=1)
        if np.any(norm < 1e-15) or not np.all(np.isfinite(hit)):
            raise ArithmeticError("degenerate back-projected ray")
        refl = refl / norm[:, None]
        v = pts[sel] - hit
        perp = v - np.einsum("ij,ij->i", v, refl)[:, None] * refl
        d2[sel] = np.einsum("ij,ij->i", perp, perp)
    return float(np.sqrt(np.mean(d2)) * 1000.0) if len(d2) else 0.0


# ---------------------------------------------------------------------------
# Parameterization
# ---------------------------------------------------------------------------


def _tilt_normal(n, e1, e2, a, b):
    """Exponential map on the unit sphere: tilt ``n`` by the tangent vector a*e1 + b*e2."""
    w = a * e1 + b * e2
    ang = np.hypot(a, b)
    if ang < 1e-300:
        return n.copy()
    return np.cos(ang) * n + np.sin(ang) * (w / ang)


def _update_mirror(m, p):
    e1, e2 = geo._tangent_basis(m.normal, m.frame_axes[0])
    n = _tilt_normal(m.normal, e1, e2, p[0], p[1])
    return m.with_plane(n, m.offset + p[2])


def _rodrigues(w):
    th = np.linalg.norm(w)
    if th < 1e-300:
        return np.eye(3)
    k = w / th
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * Kx + (1 - np.cos(th)) * Kx @ Kx


def _update_board(board, p):
    R = _rodrigues(p[:3]) @ board.pose.rotation
    # re-orthonormalize against drift
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return Checkerboard(geo.Pose(R, board.pose.center + p[3:6]), board.rows, board.cols, board.square_size)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------


def _apply(problem, mirrors, boards, delta, joint):
    M = len(mirrors)
    new_m = tuple(_update_mirror(m, delta[3 * k:3 * k + 3]) for k, m in enumerate(mirrors))
    if joint:
        new_b = tuple(_update_board(b, delta[3 * M + 6 * i:3 * M + 6 * i + 6]) for i, b in enumerate(boards))
    else:
        new_b = boards
    return new_m, new_b


def _jacobian(problem, mirrors, boards, r0, step, joint):
    """Central-difference Jacobian of the stacked residual vector."""
    M = len(mirrors)
    n_par = 3 * M + (6 * len(boards) if joint else 0)
    J = np.zeros((len(r0), n_par))
    owner = np.repeat(problem.mirror_of, 2)
    pts = problem.corner_world(boards)
    obs = problem.observed
    mo = problem.mirror_of
    for k, m in enumerate(mirrors):
        sel = mo == k
        rows = owner == k
        for p in range(3):
            d = np.zeros(3)
            d[p] = step
            rp, _ = _mirror_residuals(problem, _update_mirror(m, d), pts[sel], obs[sel])
            rm, _ = _mirror_residuals(problem, _update_mirror(m, -d), pts[sel], obs[sel])
            J[rows, 3 * k + p] = (rp.ravel() - rm.ravel()) / (2 * step)
    if joint:
        board_of = np.array([o.corner_id[0] for o in problem.observations])
        for b, board in enumerate(boards):
            for p in range(6):
                d = np.zeros(6)
                d[p] = step
                plus = tuple(_update_board(bb, d) if i == b else bb for i, bb in enumerate(boards))
                minus = tuple(_update_board(bb, -d) if i == b else bb for i, bb in enumerate(boards))
                sel = board_of == b
                rp, _ = _all_residuals(problem, mirrors, problem.corner_world(plus))
                rm, _ = _all_residuals(problem, mirrors, problem.corner_world(minus))
                col = (rp - rm).ravel() / (2 * step)
                col[~np.repeat(sel, 2)] = 0.0
                J[:, 3 * M + 6 * b + p] = col
    return J


def _check_rank(A, M, joint):
    for k in range(M):
        block = A[3 * k:3 * k + 3, 3 * k:3 * k + 3]
        ev = np.linalg.eigvalsh(block)
        if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
            raise RankDeficiencyError(f"normal equations are singular for mirror {k}", k)
    if joint:
        ev = np.linalg.eigvalsh(A)
        if ev[0] <= 1e-14 * max(ev[-1], 1e-300):
            raise RankDeficiencyError("joint normal equations are singular (board poses not observable)")


def levenberg_marquardt(problem, max_iter=200, ftol=1e-12, gtol=1e-10, step=1e-7, lambda0=1e-3,
                        joint_boards=False, floor_px=1e-12):
    """Fit every mirror plane (and optionally every board pose).

    Marquardt damping (``J^T J + lambda diag(J^T J)``) with x10 up/down
    updates.  Stops when an accepted step changes the cost by less than
    ``ftol`` relative, when ``|J^T r|_inf < gtol``, when the residual RMS
    sinks below ``floor_px``, or after ``max_iter`` trial steps.
    """
    mirrors = tuple(problem.initial_mirrors)
    boards = tuple(problem.boards)
    M = len(mirrors)
    pts = problem.corner_world(boards)
    res, flags = _all_residuals(problem, mirrors, pts)
    r = res.ravel()
    cost = float(r @ r)
    history = [cost]
    lam = lambda0
    converged = False
    it = 0
    floor_cost = floor_px**2 * len(r)
    A = None
    while it < max_iter:
        if cost <= floor_cost:
            converged = True
            break
        J = _jacobian(problem, mirrors, boards, r, step, joint_boards)
        g = J.T @ r
        A = J.T @ J
        _check_rank(A, M, joint_boards)
        if np.max(np.abs(g)) < gtol:
            converged = True
            break
        accepted = False
        while it < max_iter:
            it += 1
            D = np.diag(np.diag(A))
            try:
                delta = np.linalg.solve(A + lam * D, -g)
            except np.linalg.LinAlgError as exc:
                raise RankDeficiencyError(f"damped normal equations singular: {exc}") from exc
            cand_m, cand_b = _apply(problem, mirrors, boards, delta, joint_boards)
            res_c, flags_c = _all_residuals(problem, cand_m, problem.corner_world(cand_b))
            rc = res_c.ravel()
            new_cost = float(rc @ rc)
            if new_cost < cost:
                rel = (cost - new_cost) / cost
                mirrors, boards, r, flags, cost = cand_m, cand_b, rc, flags_c, new_cost
                history.append(cost)
                lam = max(lam / 10.0, 1e-15)
                accepted = True
                if rel < ftol:
                    converged = True
                break
            if abs(new_cost - cost) <= ftol * cost or lam > 1e16:
                converged = True
                break
            lam *= 10.0
        if converged or not accepted:
            break
    if not converged:
        logger.warning("Levenberg-Marquardt stopped after %d iterations without converging", it)
    # covariance from the final linearization; the rank check here also
    # covers starts that are already at the floor, where the loop never
    # linearized
    J = _jacobian(problem, mirrors, boards, r, step, joint_boards)
    A = J.T @ J
    _check_rank(A, M, joint_boards)
    dof = max(len(r) - A.shape[0], 1)
    sigma2 = cost / dof
    try:
        cov = sigma2 * np.diag(np.linalg.pinv(A))
    except np.linalg.LinAlgError:
        cov = np.full(A.shape[0], np.nan)
    return CalibrationResult(
        mirrors=mirrors,
        rms_px=float(np.sqrt(cost / len(r))) if len(r) else 0.0,
        rms_spatial_mm=spatial_rms(problem, mirrors, boards),
        iterations=it,
        converged=converged,
        covariance_diag=cov,
        boards=boards,
        flagged=int(flags.sum()),
        cost_history=history,
        intrinsics=problem.intrinsics,
        camera_pose=problem.camera_pose,
        rows=problem.rows,
        cols=problem.cols,
    )


# ---------------------------------------------------------------------------
# Nearest parallel grid
# ---------------------------------------------------------------------------


def _infer_shape(n, rows, cols):
    if rows is None or cols is None:
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise UnderdeterminedError("grid shape must be given for non-square mirror counts")
        rows = cols = side
    if rows * cols != n:
        raise ValidationError(f"{n} mirrors do not fill a {rows}x{cols} grid")
    return rows, cols


def _target_intrinsics(intr, views, target_rotation, submap):
    K = intr.without_distortion()
    if submap is None:
        return K
    pts = []
    for v in views:
        try:
            poly = submap.polygon(v.mirror_index)
        except KeyError:
            continue
        xn = geo.undistort_pixels(intr, poly, domain=None)
        d = np.column_stack([xn, np.ones(len(xn))]) @ v.virtual_orientation.T @ target_rotation
        pts.append(d[:, :2] / d[:, 2:3])
    if not pts:
        return K
    pts = np.vstack(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    U = int(np.ceil(intr.fx * (hi[0] - lo[0]))) + 1
    V = int(np.ceil(intr.fy * (hi[1] - lo[1]))) + 1
    return geo.CameraIntrinsics(intr.fx, intr.fy, -intr.fx * lo[0], -intr.fy * lo[1], 0.0, 0.0, U, V)


def nearest_parallel_grid(mirrors, intrinsics, real_pose, rows=None, cols=None, submap=None):
    """Parallel-camera grid closest to the calibrated virtual cameras.

    The target orientation is the central mirror's virtual frame with its
    x axis flipped back to a right-handed frame.  Grid indices are oriented
    so that +s and +t step against the target x and y axes, which makes the
    light-field slope of any finite-depth point positive.
    """
    n = len(mirrors)
    if n < 4:
        raise UnderdeterminedError("at least 4 mirrors are needed for a grid")
    rows, cols = _infer_shape(n, rows, cols)
    vcams = [geo.virtual_camera(real_pose, m, k) for k, m in enumerate(mirrors)]
    centers = np.array([v.center for v in vcams])
    _, origin, xs, ys = grid_fit_error(centers, rows, cols)
    ci = (rows // 2) * cols + cols // 2
    target = vcams[ci].orientation @ FLIP
    flip_s = float(xs @ target[:, 0]) > 0
    flip_t = float(ys @ target[:, 1]) > 0
    views = []
    for k, v in enumerate(vcams):
        c, r = k % cols, k // cols
        fitted = origin + c * xs + r * ys
        s = cols - 1 - c if flip_s else c
        t = rows - 1 - r if flip_t else r
        rel = target.T @ (v.orientation @ FLIP)
        if k == ci:
            rel = np.eye(3)
        views.append(ViewModel(k, (s, t), v.center.copy(), fitted, v.center - fitted, rel, v.orientation.copy()))
    central = views[ci].grid_index
    K_t = _target_intrinsics(intrinsics, views, target, submap)
    return RectifiedGridModel(
        views=tuple(views),
        target_rotation=target,
        target_intrinsics=K_t,
        x_step=-xs if flip_s else xs,
        y_step=-ys if flip_t else ys,
        shape=(cols, rows),
        central=central,
    )


class MirrorCalibrator(BaseEstimator):
    """Estimator interface: ``fit(problem)`` runs LM, results in ``result_``."""

    def __init__(self, max_iter=200, ftol=1e-12, gtol=1e-10, step=1e-7, lambda0=1e-3, joint_boards=False):
        self.max_iter = max_iter
        self.ftol = ftol
        self.gtol = gtol
        self.step = step
        self.lambda0 = lambda0
        self.joint_boards = joint_boards

    def fit(self, problem, y=None):
        self.result_ = levenberg_marquardt(
            problem, max_iter=self.max_iter, ftol=self.ftol, gtol=self.gtol, step=self.step,
            lambda0=self.lambda0, joint_boards=self.joint_boards,
        )
        self.mirrors_ = self.result_.mirrors
        self.problem_ = problem
        return self

    def predict(self, problem=None):
        """Expected corner pixels under the fitted mirrors, one row per observation."""
        problem = problem if problem is not None else self.problem_
        r = residuals(problem, self.mirrors_).reshape(-1, 2)
        return problem.observed - r

    def score(self, problem=None, y=None):
        problem = problem if problem is not None else self.problem_
        return -rms_px(problem, self.mirrors_)
