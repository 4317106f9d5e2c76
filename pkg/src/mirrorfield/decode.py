"""Raw mirror-array frame to rectified 4D light field.

Decoding runs three steps: remove radial distortion, slice the frame into
per-mirror sub-images, and warp every sub-image into the central view's
orientation.  All resampling is bilinear with conservative mask
propagation: an output pixel is valid only if every source pixel that
contributes to it with non-zero weight is valid.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import geometry as geo
from .calibrate import CalibrationResult, nearest_parallel_grid
from .exceptions import MirrorfieldError, NumericalError, PipelineError, ValidationError
from .lightfield import LightField4D, RectifiedGridModel
from .simulate import RawImage, SubImageMap

__all__ = [
    "LightFieldDecoder",
    "SubImage",
    "decode_frame",
    "distort_image",
    "rectify_view",
    "slice",
    "undistort_image",
]

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e8


# ---------------------------------------------------------------------------
# Bilinear resampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _SampleMap:
    """Precomputed bilinear gather for the output pixels that see the source.

    Only those pixels are stored; every other output pixel is 0 and masked.
    """

    sel: np.ndarray  # (K,) flat output positions
    index: np.ndarray  # (K, 4) flat indices into the source image
    weight: np.ndarray  # (K, 4)
    shape: tuple  # output shape

    def apply(self, pixels, valid=None):
        n = int(np.prod(self.shape))
        vals = np.einsum("ij,ij->i", self.weight, pixels.ravel()[self.index])
        if valid is not None:
            good = np.all(valid.ravel()[self.index] | (self.weight == 0.0), axis=1)
            vals = np.where(good, vals, 0.0)
        else:
            good = True
        out = np.zeros(n)
        mask = np.zeros(n, dtype=bool)
        out[self.sel] = vals
        mask[self.sel] = good
        return out.reshape(self.shape), mask.reshape(self.shape)

    def restrict(self, keep):
        """Drop the stored pixels where ``keep`` is False."""
        return _SampleMap(self.sel[keep], self.index[keep], self.weight[keep], self.shape)


def _sample_map(x, y, width, height):
    """Bilinear gather for source coordinates ``x, y`` (pixel centers at integers)."""
    shape = x.shape
    x = x.ravel()
    y = y.ravel()
    with np.errstate(invalid="ignore"):
        ok = (x >= 0) & (y >= 0) & (x <= width - 1) & (y <= height - 1)  # False for NaN
    sel = np.flatnonzero(ok)
    xs = x[sel]
    ys = y[sel]
    x0 = np.minimum(np.floor(xs), max(width - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(ys), max(height - 2, 0)).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    r0 = y0 * width
    r1 = y1 * width
    index = np.empty((len(sel), 4), dtype=np.intp)
    index[:, 0] = r0 + x0
    index[:, 1] = r0 + x1
    index[:, 2] = r1 + x0
    index[:, 3] = r1 + x1
    gx = 1 - fx
    gy = 1 - fy
    weight = np.empty((len(sel), 4))
    np.multiply(gx, gy, out=weight[:, 0])
    np.multiply(fx, gy, out=weight[:, 1])
    np.multiply(gx, fy, out=weight[:, 2])
    np.multiply(fx, fy, out=weight[:, 3])
    return _SampleMap(sel, index, weight, shape)


def _pixel_grid(width, height):
    vv, uu = np.meshgrid(np.arange(height, dtype=float), np.arange(width, dtype=float), indexing="ij")
    return uu, vv


def _lens_pixels(intr, u, v):
    """Raw pixel ``(x, y)`` of undistorted pixel arrays ``u, v``; NaN past the monotone radius.

    Same arithmetic as :func:`geometry.normalized_to_pixel`, done on the two
    coordinates separately to avoid stacking full-frame arrays.
    """
    xs = (u - intr.cx) / intr.fx
    ys = (v - intr.cy) / intr.fy
    if not intr.has_distortion:
        return intr.fx * xs + intr.cx, intr.fy * ys + intr.cy
    r2 = xs * xs + ys * ys
    f = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
    x = intr.fx * (xs * f) + intr.cx
    y = intr.fy * (ys * f) + intr.cy
    fold = 1.0 + 3.0 * intr.k1 * r2 + 5.0 * intr.k2 * r2 * r2 <= 0
    x[fold] = np.nan
    y[fold] = np.nan
    return x, y


def _distort_pixels(intr, xn):
    """Distorted pixel of normalized coordinates; NaN past the monotone radius."""
    r2 = np.sum(xn * xn, axis=-1)
    deriv = 1.0 + 3.0 * intr.k1 * r2 + 5.0 * intr.k2 * r2 * r2
    px = geo.normalized_to_pixel(intr, xn, distort=True)
    px[deriv <= 0] = np.nan
    return px


# ---------------------------------------------------------------------------
# Step 1: undistortion
# ---------------------------------------------------------------------------


def undistort_image(raw, intr):
    """Resample a raw frame into the distortion-free camera with the same K.

    Each output pixel pulls from its distorted source location; samples
    falling outside the source or past the radius where the distortion
    model folds over are masked.
    """
    if not intr.has_distortion:
        return RawImage(raw.width, raw.height, raw.pixels.copy(), raw.valid.copy())
    uu, vv = _pixel_grid(raw.width, raw.height)
    xn = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy], axis=-1)
    src = _distort_pixels(intr, xn)
    smap = _sample_map(src[..., 0], src[..., 1], raw.width, raw.height)
    pix, mask = smap.apply(raw.pixels, raw.valid)
    return RawImage(raw.width, raw.height, pix, mask)


def distort_image(image, intr):
    """Inverse of :func:`undistort_image`: render a distortion-free frame through the lens."""
    if not intr.has_distortion:
        return RawImage(image.width, image.height, image.pixels.copy(), image.valid.copy())
    uu, vv = _pixel_grid(image.width, image.height)
    xn = geo.undistort_pixels(intr, np.stack([uu, vv], axis=-1), domain=None, raise_on_fail=False)
    src = geo.normalized_to_pixel(intr, xn, distort=False)
    smap = _sample_map(src[..., 0], src[..., 1], image.width, image.height)
    pix, mask = smap.apply(image.pixels, image.valid)
    return RawImage(image.width, image.height, pix, mask)


# ---------------------------------------------------------------------------
# Step 2: slicing
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SubImage:
    """Crop of the undistorted frame around one mirror's polygon.

    ``origin`` is the (x, y) of the crop's top-left pixel in the frame.
    """

    mirror_index: int
    pixels: np.ndarray
    mask: np.ndarray
    origin: tuple
    polygon: np.ndarray  # undistorted-frame pixel coordinates

    @property
    def is_empty(self):
        return self.pixels.size == 0 or not self.mask.any()


def _undistorted_polygon(poly, intr):
    if not intr.has_distortion:
        return np.asarray(poly, dtype=float)
    xn = geo.undistort_pixels(intr, poly, domain=None)
    return geo.normalized_to_pixel(intr, xn, distort=False)


def slice(raw_undistorted, submap, intr=None):
    """Cut one masked sub-image per map polygon.

    ``submap`` polygons are in raw (distorted) pixel coordinates; pass the
    intrinsics used by :func:`undistort_image` so they can be moved into the
    undistorted frame.  Pixels whose centers fall outside the polygon are
    masked.
    """
    W, H = raw_undistorted.width, raw_undistorted.height
    valid = raw_undistorted.valid
    out = []
    for k, poly in submap.entries:
        poly_u = geo.ccw(_undistorted_polygon(poly, intr) if intr is not None else np.asarray(poly, dtype=float))
        if len(poly_u) < 3 or geo.polygon_area(poly_u) <= 0:
            warnings.warn(f"sub-image {k} has an empty polygon", RuntimeWarning, stacklevel=2)
            out.append(SubImage(k, np.zeros((0, 0)), np.zeros((0, 0), dtype=bool), (0, 0), poly_u))
            continue
        x0 = max(int(np.ceil(poly_u[:, 0].min())), 0)
        y0 = max(int(np.ceil(poly_u[:, 1].min())), 0)
        x1 = min(int(np.floor(poly_u[:, 0].max())), W - 1)
        y1 = min(int(np.floor(poly_u[:, 1].max())), H - 1)
        if x1 < x0 or y1 < y0:
            warnings.warn(f"sub-image {k} lies outside the frame", RuntimeWarning, stacklevel=2)
            out.append(SubImage(k, np.zeros((0, 0)), np.zeros((0, 0), dtype=bool), (0, 0), poly_u))
            continue
        uu, vv = np.meshgrid(np.arange(x0, x1 + 1, dtype=float), np.arange(y0, y1 + 1, dtype=float))
        inside = geo.inside_convex_2d(np.stack([uu, vv], axis=-1), poly_u)
        mask = inside & valid[y0:y1 + 1, x0:x1 + 1]
        pix = np.where(mask, raw_undistorted.pixels[y0:y1 + 1, x0:x1 + 1], 0.0)
        out.append(SubImage(k, pix, mask, (x0, y0), poly_u))
    return out


# ---------------------------------------------------------------------------
# Step 3: rectification
# ---------------------------------------------------------------------------


def view_homography(view, grid, intr):
    """Target pixel -> undistorted base-camera pixel, as a 3x3 homography.

    A ray through target pixel ``p`` has world direction ``R_t K_t^-1 p``;
    seen by the virtual camera (orientation ``O``, det -1) it lands at
    ``K O^T R_t K_t^-1 p``.  The determinant of ``O`` is what undoes the
    left-right reversal of the mirror image.
    """
    G = intr.K @ view.virtual_orientation.T @ grid.target_rotation @ np.linalg.inv(grid.target_intrinsics.K)
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NumericalError(f"rectifying homography of view {tuple(view.grid_index)} is near singular (cond {cond:.3g})")
    return G


def _target_sources(view, grid, intr):
    """Undistorted base pixels feeding each target pixel (NaN behind the view)."""
    Kt = grid.target_intrinsics
    G = view_homography(view, grid, intr)
    uu, vv = _pixel_grid(Kt.width, Kt.height)
    h = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ G.T
    # the third row of G gives depth along the virtual axis (up to a positive scale)
    with np.errstate(divide="ignore", invalid="ignore"):
        src = h[..., :2] / h[..., 2:3]
    src[h[..., 2] <= 0] = np.nan
    return src


def rectify_view(sub, view, grid, intr):
    """Warp one sliced sub-image into the target (central, parallel) view.

    Returns ``(image, mask)`` with the target intrinsics' V x U shape.
    """
    src = _target_sources(view, grid, intr)
    h, w = sub.pixels.shape
    if h == 0 or w == 0:
        shape = (grid.target_intrinsics.height, grid.target_intrinsics.width)
        return np.zeros(shape), np.zeros(shape, dtype=bool)
    x = src[..., 0] - sub.origin[0]
    y = src[..., 1] - sub.origin[1]
    return _sample_map(x, y, w, h).apply(sub.pixels, sub.mask)


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


def _grid_from(calibration, submap):
    if isinstance(calibration, RectifiedGridModel):
        return calibration
    if isinstance(calibration, CalibrationResult):
        if calibration.intrinsics is None or calibration.camera_pose is None:
            raise ValidationError("calibration result lacks camera intrinsics or pose")
        return nearest_parallel_grid(
            calibration.mirrors, calibration.intrinsics, calibration.camera_pose,
            calibration.rows, calibration.cols, submap=submap,
        )
    raise ValidationError(f"cannot build a grid model from {type(calibration).__name__}")


def _polygon_raster(poly, width, height):
    """Flat mask of frame pixels whose centers lie in the convex ``poly``."""
    inside = np.zeros(width * height, dtype=bool)
    x0 = max(int(np.floor(poly[:, 0].min())), 0)
    y0 = max(int(np.floor(poly[:, 1].min())), 0)
    x1 = min(int(np.ceil(poly[:, 0].max())), width - 1)
    y1 = min(int(np.ceil(poly[:, 1].max())), height - 1)
    if x1 < x0 or y1 < y0:
        return inside
    uu, vv = np.meshgrid(np.arange(x0, x1 + 1, dtype=float), np.arange(y0, y1 + 1, dtype=float))
    block = geo.inside_convex_2d(np.stack([uu, vv], axis=-1), poly)
    rows = np.arange(y0, y1 + 1)[:, None] * width + np.arange(x0, x1 + 1)[None, :]
    inside[rows[block]] = True
    return inside


class LightFieldDecoder(TransformerMixin, BaseEstimator):
    """Decoder with per-view resampling maps precomputed in ``fit``.

    ``fit`` takes the calibration (or a ready grid model) and a sub-image
    map.  ``transform`` maps raw frames to :class:`LightField4D` objects by
    a single composed bilinear lookup per view: target pixel to undistorted
    pixel by the view homography, then through the lens model to the raw
    frame.  The staged functions in this module give the same geometry with
    one extra interpolation.
    """

    def __init__(self, intrinsics=None):
        self.intrinsics = intrinsics

    def fit(self, calibration, submap=None):
        if submap is None:
            raise ValidationError("a sub-image map is required")
        intr = self.intrinsics
        if intr is None:
            intr = getattr(calibration, "intrinsics", None)
        if intr is None:
            raise ValidationError("base-camera intrinsics are required")
        self.intrinsics_ = intr
        self.grid_ = _grid_from(calibration, submap)
        self.submap_ = submap
        self.frame_shape_ = (submap.height, submap.width)
        S, T = self.grid_.shape
        Kt = self.grid_.target_intrinsics
        self.maps_ = {}
        mapped = set(submap.mirror_indices)
        for view in self.grid_.views:
            if view.mirror_index not in mapped:
                continue
            src_u = _target_sources(view, self.grid_, intr)
            x, y = _lens_pixels(intr, src_u[..., 0], src_u[..., 1])
            smap = _sample_map(x, y, submap.width, submap.height)
            # conservative polygon test: every contributing source pixel lies in the polygon
            poly = geo.ccw(submap.polygon(view.mirror_index))
            inside = _polygon_raster(poly, submap.width, submap.height)[smap.index] | (smap.weight == 0.0)
            self.maps_[tuple(view.grid_index)] = smap.restrict(np.all(inside, axis=1))
        self.shape_ = (S, T, Kt.height, Kt.width)
        return self

    def transform(self, raw, source=""):
        if (raw.height, raw.width) != self.frame_shape_:
            raise ValidationError(f"frame is {raw.width}x{raw.height}, decoder expects "
                                  f"{self.frame_shape_[1]}x{self.frame_shape_[0]}")
        views = np.zeros(self.shape_)
        masks = np.zeros(self.shape_, dtype=bool)
        valid = raw.mask
        for (s, t), smap in self.maps_.items():
            views[s, t], masks[s, t] = smap.apply(raw.pixels, valid)
        meta = {
            "residual_translation": {f"{v.grid_index[0]},{v.grid_index[1]}": v.residual_translation.tolist()
                                     for v in self.grid_.views},
        }
        return LightField4D(views, masks, self.grid_, source=source, meta=meta)


def decode_frame(raw, calibration, submap, source="", staged=False):
    """Undistort, slice and rectify one raw frame into a :class:`LightField4D`.

    ``calibration`` is a :class:`CalibrationResult` or a ready
    :class:`RectifiedGridModel`.  With ``staged=True`` the three steps run
    as separate resampling passes; the default composes them into one.
    Errors are re-raised as :class:`PipelineError` naming the stage.
    """
    stage = "grid"
    try:
        if not staged:
            stage = "rectify"
            return LightFieldDecoder(getattr(calibration, "intrinsics", None)).fit(calibration, submap).transform(raw, source)
        grid = _grid_from(calibration, submap)
        intr = calibration.intrinsics if isinstance(calibration, CalibrationResult) else None
        if intr is None:
            raise ValidationError("staged decoding needs base-camera intrinsics from a calibration result")
        stage = "undistort"
        und = undistort_image(raw, intr)
        stage = "slice"
        subs = {s.mirror_index: s for s in slice(und, submap, intr)}
        stage = "rectify"
        S, T = grid.shape
        Kt = grid.target_intrinsics
        views = np.zeros((S, T, Kt.height, Kt.width))
        masks = np.zeros_like(views, dtype=bool)
        for view in grid.views:
            if view.mirror_index in subs:
                s, t = view.grid_index
                views[s, t], masks[s, t] = rectify_view(subs[view.mirror_index], view, grid, intr)
        return LightField4D(views, masks, grid, source=source)
    except MirrorfieldError as exc:
        raise PipelineError(stage, exc) from exc
