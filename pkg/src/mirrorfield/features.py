"""4D light-field features: 2D detections tied together by a depth slope.

A Lambertian point at depth ``z`` appears in view ``(s, t)`` at
``(u + w*ds, v + w*dt)`` relative to the central view, where the slope
``w`` is proportional to baseline over depth.  Features are detected in
every view, matched to the central view, and kept only when enough views
agree with a single slope.

Slope convention: pixels per grid step along +s (the x step).  When the
grid's y step differs in length, t offsets are scaled by
``|y_step| / |x_step|`` so one scalar slope serves both axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConfigError, ValidationError

__all__ = [
    "Feature4D",
    "Feature4DCandidate",
    "FeatureExtractor",
    "FilterConfig",
    "HarrisDetector",
    "Keypoint2D",
    "MatchPair",
    "build_candidates",
    "detect",
    "extract_features",
    "filter_point_plane",
    "match_to_central",
    "predict_location",
    "slope_at_depth",
    "slope_from_pair",
]


@dataclass(frozen=True, eq=False)
class Keypoint2D:
    view: tuple  # (s, t)
    pixel: np.ndarray  # (u, v)
    descriptor: np.ndarray
    response: float = 0.0

    @property
    def u(self):
        return float(self.pixel[0])

    @property
    def v(self):
        return float(self.pixel[1])


@dataclass(frozen=True)
class FilterConfig:
    """Point-plane filter settings.

    ``n_min=None`` resolves to ``ceil(0.75 * n_views)`` once the view count
    is known (see :meth:`resolved`).
    """

    max_dist_px: float = 1.0
    n_min: int | None = None
    match_ratio: float = 0.8

    def __post_init__(self):
        if not (self.max_dist_px > 0 and np.isfinite(self.max_dist_px)):
            raise ConfigError(f"max_dist_px must be positive, got {self.max_dist_px}")
        if self.n_min is not None and self.n_min < 2:
            raise ConfigError(f"n_min must be at least 2, got {self.n_min}")
        if not (0 < self.match_ratio <= 1):
            raise ConfigError(f"match_ratio must lie in (0, 1], got {self.match_ratio}")

    def resolved(self, n_views):
        n_min = self.n_min if self.n_min is not None else int(math.ceil(0.75 * n_views))
        if not (2 <= n_min <= n_views):
            raise ConfigError(f"n_min={n_min} is outside [2, {n_views}] for a {n_views}-view light field")
        return FilterConfig(self.max_dist_px, n_min, self.match_ratio)


@dataclass(frozen=True, eq=False)
class MatchPair:
    central: int  # index into the central keypoint list
    other: int  # index into the other view's keypoint list
    ratio: float  # best / second-best descriptor distance


@dataclass(eq=False)
class Feature4DCandidate:
    """A central keypoint with its matched pixel in each other view.

    ``matches`` maps ``(s, t)`` to ``(pixel, ratio)``.
    """

    central: Keypoint2D
    matches: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class Feature4D:
    pixel: np.ndarray  # central (u, v)
    slope: float
    support_count: int  # passing views, central included
    residual_rms_px: float
    views: tuple = ()  # grid indices of the passing views

    @property
    def u(self):
        return float(self.pixel[0])

    @property
    def v(self):
        return float(self.pixel[1])

    def to_dict(self):
        return {
            "u": float(self.pixel[0]), "v": float(self.pixel[1]), "slope": float(self.slope),
            "support": int(self.support_count), "residual": float(self.residual_rms_px),
            "views": [list(v) for v in self.views],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array([d["u"], d["v"]], dtype=float), float(d["slope"]), int(d["support"]),
                   float(d["residual"]), tuple(tuple(v) for v in d.get("views", ())))


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------


class HarrisDetector:
    """Harris corner detector with sub-pixel peaks and intensity-patch descriptors.

    Descriptors are ``patch_size`` x ``patch_size`` intensity samples spaced
    ``patch_step`` pixels apart, read from the image blurred by
    ``descriptor_sigma`` (``None`` means ``patch_step``) so that sensor noise
    and sub-pixel localization error do not dominate the patch.

    Any object with a ``detect(image, mask, view)`` method returning
    :class:`Keypoint2D` lists can stand in for this one.
    """

    def __init__(self, sigma=1.0, integration_sigma=3.0, k=0.04, rel_threshold=0.01, nms_size=5,
                 patch_size=8, patch_step=2.0, border=None, max_keypoints=None, descriptor_sigma=None):
        self.sigma = sigma
        self.integration_sigma = integration_sigma
        self.k = k
        self.rel_threshold = rel_threshold
        self.nms_size = nms_size
        self.patch_size = patch_size
        self.patch_step = patch_step
        self.border = border
        self.max_keypoints = max_keypoints
        self.descriptor_sigma = descriptor_sigma

    def response(self, image):
        img = ndimage.gaussian_filter(np.asarray(image, dtype=float), self.sigma, mode="nearest")
        gy, gx = np.gradient(img)
        s = self.integration_sigma
        a = ndimage.gaussian_filter(gx * gx, s, mode="nearest")
        b = ndimage.gaussian_filter(gx * gy, s, mode="nearest")
        c = ndimage.gaussian_filter(gy * gy, s, mode="nearest")
        return a * c - b * b - self.k * (a + c) ** 2

    def descriptor(self, image, pixels):
        n = self.patch_size
        offs = (np.arange(n) - (n - 1) / 2.0) * self.patch_step
        oy, ox = np.meshgrid(offs, offs, indexing="ij")
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        image = np.asarray(image, dtype=float)
        sigma = self.patch_step if self.descriptor_sigma is None else self.descriptor_sigma
        if sigma > 0:
            image = ndimage.gaussian_filter(image, sigma, mode="nearest")
        rows = pixels[:, 1, None] + oy.ravel()
        cols = pixels[:, 0, None] + ox.ravel()
        vals = ndimage.map_coordinates(image, [rows.ravel(), cols.ravel()],
                                       order=1, mode="nearest")
        return vals.reshape(len(pixels), n * n)

    def detect(self, image, mask=None, view=(0, 0)):
        image = np.asarray(image, dtype=float)
        if image.size == 0 or image.ndim != 2:
            return []
        valid = np.ones(image.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if not valid.any() or np.ptp(image[valid]) == 0:
            return []
        # fill masked pixels with the valid mean so the mask edge is not a corner
        filled = np.where(valid, image, image[valid].mean())
        R = self.response(filled)
        border = self.border if self.border is not None else int(np.ceil(
            3 * self.integration_sigma + (self.patch_size / 2) * self.patch_step))
        keep = ndimage.binary_erosion(valid, iterations=border, border_value=0) if border > 0 else valid
        peak = R.max()
        if peak <= 0:
            return []
        local_max = R == ndimage.maximum_filter(R, size=self.nms_size, mode="nearest")
        cand = local_max & keep & (R > self.rel_threshold * peak)
        ys, xs = np.nonzero(cand)
        if len(ys) == 0:
            return []
        # quadratic sub-pixel refinement on the 3x3 neighbourhood
        H, W = R.shape
        yc = np.clip(ys, 1, H - 2)
        xc = np.clip(xs, 1, W - 2)
        dx = 0.5 * (R[yc, xc + 1] - R[yc, xc - 1])
        dy = 0.5 * (R[yc + 1, xc] - R[yc - 1, xc])
        dxx = R[yc, xc + 1] - 2 * R[yc, xc] + R[yc, xc - 1]
        dyy = R[yc + 1, xc] - 2 * R[yc, xc] + R[yc - 1, xc]
        dxy = 0.25 * (R[yc + 1, xc + 1] - R[yc + 1, xc - 1] - R[yc - 1, xc + 1] + R[yc - 1, xc - 1])
        det = dxx * dyy - dxy * dxy
        with np.errstate(divide="ignore", invalid="ignore"):
            ox = np.where(det > 0, -(dyy * dx - dxy * dy) / det, 0.0)
            oy = np.where(det > 0, -(dxx * dy - dxy * dx) / det, 0.0)
        bad = ~np.isfinite(ox) | ~np.isfinite(oy) | (np.abs(ox) > 1) | (np.abs(oy) > 1)
        ox[bad] = 0.0
        oy[bad] = 0.0
        pix = np.column_stack([xc + ox, yc + oy])
        resp = R[ys, xs]
        order = np.lexsort((xs, ys, -resp))
        if self.max_keypoints is not None:
            order = order[: self.max_keypoints]
        desc = self.descriptor(filled, pix[order])
        return [Keypoint2D(tuple(view), pix[i].copy(), desc[j], float(resp[i])) for j, i in enumerate(order)]


def detect(image, mask=None, view=(0, 0), detector=None):
    """Keypoints of one view, strongest first (deterministic order)."""
    detector = detector if detector is not None else HarrisDetector()
    return detector.detect(image, mask, view)


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


def _grid_delta(central_view, other_view, scale):
    ds = other_view[0] - central_view[0]
    dt = other_view[1] - central_view[1]
    return np.array([ds * scale[0], dt * scale[1]], dtype=float)


def match_to_central(central_kps, other_kps, config=None, max_slope=None, band_px=None, scale=(1.0, 1.0)):
    """Mutual-best descriptor matches passing the ratio test.

    A match survives when its best/second-best descriptor distance ratio is
    below ``config.match_ratio`` and the two keypoints are each other's
    nearest neighbour.  With ``max_slope`` set, only pairs whose pixel
    offset lies within ``band_px`` of the point-plane line
    ``w * dgrid, 0 <= w <= max_slope`` compete (off by default).
    """
    config = config or FilterConfig()
    if not central_kps or not other_kps:
        return []
    A = np.array([k.descriptor for k in central_kps])
    B = np.array([k.descriptor for k in other_kps])
    D = np.sqrt(np.maximum(np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2 * A @ B.T, 0.0))
    if max_slope is not None:
        pa = np.array([k.pixel for k in central_kps])
        pb = np.array([k.pixel for k in other_kps])
        g = _grid_delta(central_kps[0].view, other_kps[0].view, scale)
        gn = g @ g
        if gn == 0:
            raise ValidationError("geometric gating needs two different views")
        dp = pb[None, :, :] - pa[:, None, :]
        w = np.clip((dp @ g) / gn, 0.0, max_slope)
        off = np.linalg.norm(dp - w[..., None] * g, axis=-1)
        D = np.where(off <= (band_px if band_px is not None else 2.0), D, np.inf)
    pairs = []
    best_b = np.argmin(D, axis=1)
    best_a = np.argmin(D, axis=0)
    for i in range(len(central_kps)):
        row = D[i]
        j = int(best_b[i])
        d1 = row[j]
        if not np.isfinite(d1) or best_a[j] != i:
            continue
        if len(row) > 1:
            d2 = np.partition(row, 1)[1]
        else:
            d2 = np.inf
        if d2 == 0:
            continue
        ratio = d1 / d2 if np.isfinite(d2) else 0.0
        if ratio < config.match_ratio:
            pairs.append(MatchPair(i, j, float(ratio)))
    return pairs


# ---------------------------------------------------------------------------
# Point-plane model
# ---------------------------------------------------------------------------


def _view_pixel(kp):
    if isinstance(kp, Keypoint2D):
        return tuple(kp.view), np.asarray(kp.pixel, dtype=float)
    view, pixel = kp
    return tuple(view), np.asarray(pixel, dtype=float)


def slope_from_pair(central, other, scale=(1.0, 1.0)):
    """Least-squares slope ``w = dp . dg / |dg|^2`` from one keypoint pair.

    Either argument is a :class:`Keypoint2D` or a ``(view, pixel)`` pair.
    """
    vc, pc = _view_pixel(central)
    vo, po = _view_pixel(other)
    g = _grid_delta(vc, vo, scale)
    gn = float(g @ g)
    if gn == 0:
        raise ValidationError("slope needs two views with different grid indices")
    return float((po - pc) @ g / gn)


def predict_location(central, slope, view, scale=(1.0, 1.0)):
    """Expected pixel of a central feature in ``view`` under ``slope``."""
    vc, pc = _view_pixel(central)
    return pc + slope * _grid_delta(vc, tuple(view), scale)


def _consolidate(pc, vc, views, pixels, scale):
    G = np.array([_grid_delta(vc, v, scale) for v in views])
    P = np.array(pixels) - pc
    return float(np.sum(P * G) / np.sum(G * G))


def _passing(pc, vc, slope, views, pixels, scale, max_dist):
    pred = pc + slope * np.array([_grid_delta(vc, v, scale) for v in views])
    dist = np.linalg.norm(np.array(pixels) - pred, axis=1)
    return dist <= max_dist, dist


def filter_point_plane(candidates, config, n_views=None, scale=(1.0, 1.0), max_iter=10):
    """Keep candidates whose matches agree with one slope in enough views.

    Hypotheses come from single pairs in order of ratio-test margin (best
    first).  Views within ``max_dist_px`` of the hypothesis prediction are
    pooled, the slope is re-fitted by least squares over them, and the
    pool is re-checked against the refit until it stops changing.  A
    candidate is accepted with the first hypothesis whose final pool,
    counting the central view, reaches ``n_min``.
    """
    if n_views is None:
        if config.n_min is None:
            raise ConfigError("n_views is needed to resolve the default n_min")
        n_views = config.n_min
    config = config.resolved(n_views)
    out = []
    for cand in candidates:
        vc = tuple(cand.central.view)
        pc = np.asarray(cand.central.pixel, dtype=float)
        items = sorted(((tuple(v), np.asarray(p, dtype=float), r) for v, (p, r) in cand.matches.items()),
                       key=lambda x: (x[2], x[0]))
        items = [it for it in items if it[0] != vc]
        if 1 + len(items) < config.n_min:
            continue
        views = [it[0] for it in items]
        pixels = [it[1] for it in items]
        for view0, pix0, _ in items:
            slope = slope_from_pair((vc, pc), (view0, pix0), scale)
            ok, _ = _passing(pc, vc, slope, views, pixels, scale, config.max_dist_px)
            for _ in range(max_iter):
                if 1 + ok.sum() < config.n_min:
                    break
                sel = np.flatnonzero(ok)
                slope = _consolidate(pc, vc, [views[i] for i in sel], [pixels[i] for i in sel], scale)
                new_ok, _ = _passing(pc, vc, slope, views, pixels, scale, config.max_dist_px)
                if np.array_equal(new_ok, ok):
                    break
                ok = new_ok
            if 1 + ok.sum() < config.n_min:
                continue
            sel = np.flatnonzero(ok)
            slope = _consolidate(pc, vc, [views[i] for i in sel], [pixels[i] for i in sel], scale)
            final_ok, dist = _passing(pc, vc, slope, views, pixels, scale, config.max_dist_px)
            if not np.array_equal(final_ok, ok) or 1 + final_ok.sum() < config.n_min:
                continue
            rms = float(np.sqrt(np.mean(dist[sel] ** 2)))
            used = tuple(sorted([vc] + [views[i] for i in sel]))
            out.append(Feature4D(pc.copy(), slope, int(1 + len(sel)), rms, used))
            break
    return out


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def _grid_scale(lf):
    bx, by = lf.grid.step_lengths
    return (1.0, by / bx) if bx > 0 else (1.0, 1.0)


def build_candidates(keypoints, central, config, max_slope=None, band_px=None, scale=(1.0, 1.0)):
    """Group per-view matches to the central view into :class:`Feature4DCandidate` objects."""
    ckps = keypoints.get(tuple(central), [])
    cands = [Feature4DCandidate(kp, {}) for kp in ckps]
    for view, kps in sorted(keypoints.items()):
        if tuple(view) == tuple(central) or not kps:
            continue
        for m in match_to_central(ckps, kps, config, max_slope=max_slope, band_px=band_px, scale=scale):
            cands[m.central].matches[tuple(view)] = (kps[m.other].pixel, m.ratio)
    return cands


def slope_at_depth(lf, depth):
    """Slope of a point at ``depth`` meters in front of the grid: ``f * |x_step| / depth``."""
    return lf.grid.target_intrinsics.fx * lf.grid.step_lengths[0] / depth


def extract_features(lf, config=None, detector=None, max_slope=None, band_px=None, min_depth=None):
    """Detect, match and filter: a full :class:`LightField4D` to :class:`Feature4D` list.

    ``min_depth`` (meters) is a convenience for epipolar gating: it sets
    ``max_slope`` to the slope of a point at that depth.
    """
    config = config or FilterConfig()
    S, T = lf.views.shape[:2]
    config = config.resolved(S * T)
    detector = detector or HarrisDetector()
    if min_depth is not None:
        if min_depth <= 0:
            raise ConfigError("min_depth must be positive")
        max_slope = slope_at_depth(lf, min_depth)
    keypoints = {}
    for s in range(S):
        for t in range(T):
            keypoints[(s, t)] = detector.detect(lf.views[s, t], lf.masks[s, t], (s, t))
    scale = _grid_scale(lf)
    cands = build_candidates(keypoints, lf.central, config, max_slope, band_px, scale)
    return filter_point_plane(cands, config, S * T, scale)


class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Estimator interface to :func:`extract_features`; ``transform(lf)`` returns Feature4D lists."""

    def __init__(self, max_dist_px=1.0, n_min=None, match_ratio=0.8, sigma=1.0, integration_sigma=3.0,
                 harris_k=0.04, rel_threshold=0.01, max_slope=None, band_px=None, min_depth=None):
        self.max_dist_px = max_dist_px
        self.n_min = n_min
        self.match_ratio = match_ratio
        self.sigma = sigma
        self.integration_sigma = integration_sigma
        self.harris_k = harris_k
        self.rel_threshold = rel_threshold
        self.max_slope = max_slope
        self.band_px = band_px
        self.min_depth = min_depth

    def _config(self):
        return FilterConfig(self.max_dist_px, self.n_min, self.match_ratio)

    def _detector(self):
        return HarrisDetector(self.sigma, self.integration_sigma, self.harris_k, self.rel_threshold)

    def fit(self, lf=None, y=None):
        self.config_ = self._config()
        if lf is not None:
            self.features_ = self.transform(lf)
        return self

    def transform(self, lf):
        return extract_features(lf, self._config(), self._detector(), self.max_slope, self.band_px, self.min_depth)
