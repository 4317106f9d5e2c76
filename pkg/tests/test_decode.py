import warnings
from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage

from conftest import truth_calibration
from mirrorfield import decode as dec
from mirrorfield import geometry as geo
from mirrorfield import scenes
from mirrorfield import simulate as sim
from mirrorfield.exceptions import NumericalError, PipelineError, ValidationError
from mirrorfield.lightfield import FLIP

LENS = geo.CameraIntrinsics(500.0, 500.0, 319.5, 239.5, k1=0.1, width=640, height=480)


@pytest.fixture(scope="module")
def small_submap(small_state):
    return sim.subimage_map(small_state)


@pytest.fixture(scope="module")
def small_decoder(small_state, small_submap):
    return dec.LightFieldDecoder().fit(truth_calibration(small_state), small_submap)


@pytest.fixture(scope="module")
def board_frame(small_state):
    scene = scenes.checkerboard_scene(small_state, rows=12, cols=14, square_size=0.01)
    return scene, sim.render(small_state, scene, supersample=2)


@pytest.fixture(scope="module")
def l_scene(small_state):
    """Three blobs forming an L: a corner, a long arm along +x, a short arm along +y."""
    pts = [scenes.frame_point(small_state, 0.5, xy) for xy in [(0, 0), (0.04, 0), (0, 0.02)]]
    scene = sim.Scene((), tuple(sim.PointTarget(tuple(p), 0.005, 1.0) for p in pts), 0.0)
    return sim.render(small_state, scene, supersample=4), pts


def centroid(img, mask, q, radius):
    yy, xx = np.indices(img.shape)
    win = (np.hypot(xx - q[0], yy - q[1]) < radius) & mask
    w = img * win
    return np.array([(w * xx).sum() / w.sum(), (w * yy).sum() / w.sum()])


def saddle(img, q, r=3, sigma=1.0):
    """Sub-pixel X-corner: stationary point of a quadratic fitted to the smoothed image."""
    sm = ndimage.gaussian_filter(img, sigma)
    x0, y0 = int(round(q[0])), int(round(q[1]))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    z = sm[y0 - r:y0 + r + 1, x0 - r:x0 + r + 1].ravel()
    x, y = dx.ravel().astype(float), dy.ravel().astype(float)
    A = np.column_stack([x * x, x * y, y * y, x, y, np.ones_like(x)])
    a, b, c, d, e, _ = np.linalg.lstsq(A, z, rcond=None)[0]
    sx, sy = np.linalg.solve([[2 * a, b], [b, 2 * c]], [-d, -e])
    return np.array([x0 + sx, y0 + sy])


def orientation(p):
    a, b, c = (np.asarray(x, dtype=float) for x in p)
    u, v = b - a, c - a
    return np.sign(u[0] * v[1] - u[1] * v[0])


class TestUndistort:
    def test_no_distortion_is_bit_exact(self):
        intr = LENS.without_distortion()
        raw = sim.RawImage(640, 480, np.random.default_rng(0).random((480, 640)))
        out = dec.undistort_image(raw, intr)
        assert np.array_equal(out.pixels, raw.pixels) and out.valid.all()

    def test_straight_line(self):
        # raw frame of a soft edge along a line that is straight after undistortion
        uu, vv = np.meshgrid(np.arange(640.0), np.arange(480.0))
        xn = geo.undistort_pixels(LENS, np.stack([uu, vv], axis=-1), domain=None)
        und = geo.normalized_to_pixel(LENS, xn, distort=False)
        n = np.array([1.0, 0.15]) / np.hypot(1.0, 0.15)
        dist = und @ n - 560.0
        raw = sim.RawImage(640, 480, 0.5 + 0.5 * np.tanh(dist / 1.5))

        def crossings(img, valid):
            pts = []
            for y in range(40, 440):
                row, ok = img[y], valid[y]
                i = np.flatnonzero((row[:-1] < 0.5) & (row[1:] >= 0.5) & ok[:-1] & ok[1:])
                if len(i) == 1:
                    i = i[0]
                    pts.append([i + (0.5 - row[i]) / (row[i + 1] - row[i]), y])
            return np.array(pts)

        def deviation(pts):
            c = pts.mean(axis=0)
            _, _, vt = np.linalg.svd(pts - c)
            return np.max(np.abs((pts - c) @ vt[1]))

        out = dec.undistort_image(raw, LENS)
        assert deviation(crossings(out.pixels, out.valid)) < 0.5
        assert deviation(crossings(raw.pixels, raw.valid)) > 2.0

    def test_roundtrip_on_smooth_image(self):
        uu, vv = np.meshgrid(np.arange(640.0), np.arange(480.0))
        img = 0.5 + 0.3 * np.sin(uu / 37.0) * np.cos(vv / 23.0)
        back = dec.undistort_image(dec.distort_image(sim.RawImage(640, 480, img), LENS), LENS)
        ok = back.valid
        assert ok.mean() > 0.8
        assert np.sqrt(np.mean((back.pixels[ok] - img[ok]) ** 2)) < 0.01

    def test_folded_region_is_masked(self):
        intr = geo.CameraIntrinsics(300.0, 300.0, 319.5, 239.5, k1=-0.3, width=640, height=480)
        out = dec.undistort_image(sim.RawImage(640, 480, np.ones((480, 640))), intr)
        assert not out.valid[0, 0] and out.valid[240, 320]
        assert np.all(out.pixels[~out.valid] == 0)


class TestSlice:
    def test_nine_disjoint_subimages(self, golden_state, submap):
        raw = sim.RawImage(1920, 1080, np.ones((1080, 1920)))
        subs = dec.slice(raw, submap)
        assert len(subs) == 9
        hits = np.zeros((1080, 1920), dtype=int)
        for s, (_, poly) in zip(subs, submap.entries):
            h, w = s.mask.shape
            x0, y0 = s.origin
            hits[y0:y0 + h, x0:x0 + w] += s.mask
            count = s.mask.sum()
            perim = np.sum(np.linalg.norm(np.roll(poly, -1, axis=0) - poly, axis=1))
            assert abs(count - geo.polygon_area(poly)) <= perim
        assert hits.max() == 1

    def test_polygons_are_not_rectangles(self, submap):
        raw = sim.RawImage(1920, 1080, np.ones((1080, 1920)))
        assert any(not s.mask.all() for s in dec.slice(raw, submap))

    def test_empty_polygon_warns(self):
        submap = sim.SubImageMap(64, 48, ((0, np.array([[1.0, 1.0], [2.0, 1.0], [3.0, 1.0]])),))
        with pytest.warns(RuntimeWarning):
            (s,) = dec.slice(sim.RawImage(64, 48, np.ones((48, 64))), submap)
        assert s.is_empty


class TestRectify:
    def test_central_view_is_flip_only(self, decoder):
        grid = decoder.grid_
        v = grid.view(*grid.central)
        intr = decoder.intrinsics_
        G = dec.view_homography(v, grid, intr)
        expected = intr.K @ FLIP @ np.linalg.inv(grid.target_intrinsics.K)
        assert np.allclose(G, expected, atol=1e-12 * np.abs(expected).max())

    def test_near_singular_homography(self, decoder):
        grid = decoder.grid_
        bad = replace(grid, target_intrinsics=replace(grid.target_intrinsics, fx=1e12, fy=1e12))
        v = bad.view(0, 1)
        with pytest.raises(NumericalError, match=r"\(0, 1\)"):
            dec.view_homography(v, bad, decoder.intrinsics_)

    def test_common_view_size(self, points_lf):
        S, T, U, V = points_lf.dims
        assert (S, T) == (3, 3)
        assert points_lf.views.shape == (3, 3, V, U)


class TestDecode:
    def test_board_corners_at_predicted_location(self, small_state, small_decoder, board_frame):
        scene, raw = board_frame
        lf = small_decoder.transform(raw)
        grid = lf.grid
        board = scene.checkerboards[0]
        _, local = board.corner_local()
        world = board.pose.to_world(local)
        checked = 0
        for v in grid.views:
            img, mask = lf.view(*v.grid_index)
            q = grid.project(v, world)
            for p in q:
                x, y = int(round(p[0])), int(round(p[1]))
                if not (6 <= x < mask.shape[1] - 6 and 6 <= y < mask.shape[0] - 6):
                    continue
                if not mask[y - 6:y + 7, x - 6:x + 7].all():
                    continue
                assert np.linalg.norm(saddle(img, p) - p) < 1.0
                checked += 1
        assert checked >= 9 * 20

    def test_background_frame_is_uniform(self, small_state, small_decoder):
        lf = small_decoder.transform(sim.render(small_state, sim.Scene(background_intensity=0.3)))
        assert lf.masks.any()
        assert np.max(np.abs(lf.views[lf.masks] - 0.3)) < 1e-12

    def test_deterministic(self, small_state, small_decoder, board_frame):
        scene, raw = board_frame
        again = sim.render(small_state, scene, supersample=2)
        a, b = small_decoder.transform(raw), small_decoder.transform(again)
        assert np.array_equal(a.views, b.views) and np.array_equal(a.masks, b.masks)

    def test_masks_are_conservative(self, small_submap, small_decoder):
        # label every raw pixel with the polygon that contains its center
        W, H = small_submap.width, small_submap.height
        uu, vv = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
        label = np.full((H, W), -100.0)
        for k, poly in small_submap.entries:
            label[geo.inside_convex_2d(np.stack([uu, vv], axis=-1), geo.ccw(poly))] = k
        lf = small_decoder.transform(sim.RawImage(W, H, label))
        for v in lf.grid.views:
            img, mask = lf.view(*v.grid_index)
            assert mask.sum() > 1000
            assert np.max(np.abs(img[mask] - v.mirror_index)) < 1e-9

    def test_chirality(self, small_state, small_decoder, l_scene):
        raw, pts = l_scene
        lf = small_decoder.transform(raw)
        grid = lf.grid
        centre = geo.Pose(grid.target_rotation, grid.view(*grid.central).center)
        expected = orientation(geo.project_points(grid.target_intrinsics, centre, np.array(pts), distort=False))
        assert expected != 0
        for v in grid.views:
            img, mask = lf.view(*v.grid_index)
            q = grid.project(v, np.array(pts))
            assert orientation([centroid(img, mask, p, 5) for p in q]) == expected
            # the raw sub-image itself is mirrored
            raw_q = [sim.project_via_mirror(small_state, v.mirror_index, p) for p in pts]
            assert orientation(raw_q) == -expected

    def test_staged_matches_composed(self, small_state, l_scene):
        raw, pts = l_scene
        calib = truth_calibration(small_state)
        submap = sim.subimage_map(small_state)
        a = dec.decode_frame(raw, calib, submap)
        b = dec.decode_frame(raw, calib, submap, staged=True)
        assert a.dims == b.dims
        for v in a.grid.views:
            s, t = v.grid_index
            for p in a.grid.project(v, np.array(pts)):
                ca = centroid(a.views[s, t], a.masks[s, t], p, 5)
                cb = centroid(b.views[s, t], b.masks[s, t], p, 5)
                assert np.linalg.norm(ca - p) < 0.1 and np.linalg.norm(cb - p) < 0.1
                assert np.linalg.norm(ca - cb) < 0.1

    def test_disparity_steps_are_equal(self, small_state, small_decoder):
        p = scenes.frame_point(small_state, 0.5)
        raw = sim.render(small_state, sim.Scene((), (sim.PointTarget(tuple(p), 0.003, 1.0),), 0.0), supersample=4)
        lf = small_decoder.transform(raw)
        grid = lf.grid
        c = {}
        for v in grid.views:
            c[v.grid_index] = centroid(*lf.view(*v.grid_index), grid.project(v, p[None])[0], 6)
        for t in range(3):
            d1 = c[(1, t)][0] - c[(0, t)][0]
            d2 = c[(2, t)][0] - c[(1, t)][0]
            assert d1 > 0 and d2 > 0
            assert d1 == pytest.approx(d2, rel=0.05)
        for s in range(3):
            d1 = c[(s, 1)][1] - c[(s, 0)][1]
            d2 = c[(s, 2)][1] - c[(s, 1)][1]
            assert d1 == pytest.approx(d2, rel=0.05)

    def test_pipeline_error_names_stage(self, small_state, small_submap):
        raw = sim.render(small_state, sim.Scene())
        calib = truth_calibration(small_state)
        calib.intrinsics = None
        with pytest.raises(PipelineError) as err:
            dec.decode_frame(raw, calib, small_submap, staged=True)
        assert err.value.stage == "grid"

    def test_wrong_frame_size(self, small_decoder):
        with pytest.raises(ValidationError):
            small_decoder.transform(sim.RawImage(10, 10, np.zeros((10, 10))))

    def test_fit_needs_submap(self, small_state):
        with pytest.raises(ValidationError):
            dec.LightFieldDecoder().fit(truth_calibration(small_state))

    def test_residual_translation_in_metadata(self, points_lf):
        res = points_lf.meta["residual_translation"]
        assert len(res) == 9 and all(len(r) == 3 for r in res.values())

    def test_tile_layout(self, points_lf):
        S, T, U, V = points_lf.dims
        tile = points_lf.tile()
        assert tile.shape == (T * V, S * U)
        img, mask = points_lf.view(2, 1)
        assert np.array_equal(tile[V:2 * V, 2 * U:3 * U], np.where(mask, img, 0.0))


def test_quiet_on_full_design(golden_state, submap):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        dec.LightFieldDecoder().fit(truth_calibration(golden_state), submap)
