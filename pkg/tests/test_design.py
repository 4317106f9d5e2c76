import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mirrorfield import design as des
from mirrorfield import geometry as geo
from mirrorfield.exceptions import (
    InfeasibleSpacingError,
    InfeasibleStartError,
    UnderdeterminedError,
    ValidationError,
)


def rotation(axis, angle):
    a = np.asarray(axis, dtype=float)
    a /= np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def rotate_about_centroid(m, R):
    c = m.centroid
    n = R @ m.normal
    origin = c + R @ (m.frame_origin - c)
    return geo.MirrorPlane(n, float(n @ origin), m.extent, origin, m.frame_axes @ R.T)


def flat_tiles(spec):
    """The faceted parabola's cells laid flat on z = 0: one shared plane."""
    init = des.init_faceted_parabola(spec)
    mirrors = []
    for m in init.mirrors:
        w = m.world_vertices
        c = np.array([*w[:, :2].mean(axis=0), 0.0])
        mirrors.append(geo.MirrorPlane(np.array([0, 0, 1.0]), 0.0, geo.ccw(w[:, :2] - c[:2]), c,
                                       np.array([[1.0, 0, 0], [0, 1.0, 0]])))
    return des.state_from_mirrors(mirrors, spec)


def dense_blocked_fraction(state, i, j, n=50, reach=0.6):
    """Fraction of a 50x50 ray lattice over mirror i blocked by mirror j."""
    m, other = state.mirrors[i], state.mirrors[j]
    lo, hi = m.extent.min(axis=0), m.extent.max(axis=0)
    g = np.stack(np.meshgrid(np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n)), -1).reshape(-1, 2)
    pts = m.to_world(g[m.contains_local(g)])
    cam = state.spec.camera_pose.center
    refl = geo.reflect_directions(m, pts - cam)
    ends = pts + reach * refl / np.linalg.norm(refl, axis=1, keepdims=True)
    hit = geo.segment_hits_polygon(np.broadcast_to(cam, pts.shape), pts, other)
    hit |= geo.segment_hits_polygon(pts, ends, other)
    return float(hit.mean())


@pytest.fixture(scope="module")
def short_run(initial_state):
    return des.optimize(initial_state, rounds=2, max_sweeps=1)


class TestSpec:
    def test_invariants(self):
        with pytest.raises(ValidationError):
            des.DesignSpec(rows=1, cols=1)
        with pytest.raises(ValidationError):
            des.DesignSpec(eval_depths=(0.5, 0.3))
        with pytest.raises(ValidationError):
            des.DesignSpec(alpha=1.5)
        with pytest.raises(ValidationError):
            des.DesignSpec(scale=0.0)

    def test_roundtrip(self):
        spec = des.default_spec(alpha=0.7, eval_depths=(0.25, 0.4, 0.6))
        again = des.DesignSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
        assert again.to_dict() == spec.to_dict()


class TestInit:
    def test_nine_mirrors(self, initial_state):
        assert initial_state.n_mirrors == 9
        assert all(len(m.extent) == 4 for m in initial_state.mirrors)

    def test_central_facet_faces_up(self, initial_state):
        n = initial_state.mirrors[initial_state.spec.central_index].normal
        assert np.max(np.abs(n - [0, 0, 1])) < 1e-12

    def test_gaps_in_base_projection(self, initial_state):
        spec = initial_state.spec
        polys = [m.world_vertices[:, :2] for m in initial_state.mirrors]
        for i in range(9):
            for j in range(i + 1, 9):
                assert len(geo.clip_polygon_2d(geo.ccw(polys[i]), geo.ccw(polys[j]))) == 0 or \
                    geo.polygon_area(geo.clip_polygon_2d(geo.ccw(polys[i]), geo.ccw(polys[j]))) < 1e-15
                assert geo.polygon_distance_2d(polys[i], polys[j]) >= spec.min_gap - 1e-12

    def test_no_violations(self, initial_state):
        assert des.check_constraints(initial_state) == []

    def test_infeasible_spacing(self):
        with pytest.raises(InfeasibleSpacingError):
            des.init_faceted_parabola(des.default_spec(min_gap=0.03))


class TestFootprints:
    def test_45_degree_mirror_is_symmetric(self):
        spec = des.default_spec(rows=1, cols=2)
        m = geo.MirrorPlane.from_point_normal([0, 0, 0], [1, 0, 1], extent=np.array(
            [[-0.01, -0.01], [0.01, -0.01], [0.01, 0.01], [-0.01, 0.01]]), axis_hint=[0, 1, 0])
        state = des.state_from_mirrors([m, m], spec)
        fp = des.fov_footprint(state, 0, 0.5).vertices
        mirrored = fp * [1, -1, 1]
        d = np.linalg.norm(fp[:, None, :] - mirrored[None, :, :], axis=-1)
        assert np.max(d.min(axis=1)) < 1e-9

    def test_colocated_mirrors_overlap_equals_footprint(self):
        spec = des.default_spec(rows=1, cols=2)
        m = des.init_faceted_parabola(spec).mirrors[0]
        state = des.state_from_mirrors([m, m], spec)
        poly, area = des.full_overlap(state, 0.5)
        assert area == pytest.approx(des.fov_footprint(state, 0, 0.5).area, rel=1e-12)

    def test_area_grows_with_depth(self, initial_state):
        for k in range(9):
            areas = [des.fov_footprint(initial_state, k, d).area for d in (0.3, 0.4, 0.5)]
            assert areas[0] < areas[1] < areas[2]

    def test_overlap_bounded_by_footprints(self, initial_state):
        for d in (0.3, 0.5):
            _, area = des.full_overlap(initial_state, d)
            assert 0 < area <= min(des.fov_footprint(initial_state, k, d).area for k in range(9))

    def test_default_depths(self):
        assert des.default_spec().eval_depths == (0.3, 0.5)


class TestGridFit:
    def test_exact_grid(self):
        centers = np.array([[0.02 * c, 0.03 * r, 0.1] for r in range(3) for c in range(3)])
        err, origin, xs, ys = des.grid_fit_error(centers, 3, 3)
        assert err < 1e-18
        assert np.allclose(xs, [0.02, 0, 0]) and np.allclose(ys, [0, 0.03, 0])
        assert np.allclose(origin, [0, 0, 0.1])

    @pytest.mark.parametrize("k", [0, 4, 7])
    def test_single_perturbation_leverage(self, k):
        idx = np.arange(9)
        A = np.column_stack([np.ones(9), idx % 3, idx // 3])
        h = (A @ np.linalg.inv(A.T @ A) @ A.T)[k, k]
        centers = np.array([[0.02 * c, 0.03 * r, 0.0] for r in range(3) for c in range(3)])
        delta = 1e-3
        centers[k, 2] += delta
        err, *_ = des.grid_fit_error(centers, 3, 3)
        assert err == pytest.approx(delta**2 * (1 - h) / 9, rel=1e-9)

    @settings(deadline=None)
    @given(st.tuples(*[st.floats(-np.pi, np.pi) for _ in range(3)]), st.tuples(*[st.floats(-1, 1) for _ in range(3)]),
           st.integers(0, 1000))
    def test_rigid_invariance(self, angles, shift, seed):
        centers = np.random.default_rng(seed).normal(scale=0.02, size=(9, 3))
        R = rotation([1, 0, 0], angles[0]) @ rotation([0, 1, 0], angles[1]) @ rotation([0, 0, 1], angles[2])
        e0, *_ = des.grid_fit_error(centers, 3, 3)
        e1, *_ = des.grid_fit_error(centers @ R.T + np.array(shift), 3, 3)
        assert e1 == pytest.approx(e0, rel=1e-9, abs=1e-20)

    def test_underdetermined(self):
        with pytest.raises(UnderdeterminedError):
            des.grid_fit_error(np.zeros((3, 3)), 1, 3)


class TestCost:
    def test_alpha_extremes(self, initial_state):
        for alpha, key in ((1.0, "cost_grid"), (0.0, "cost_overlap")):
            state = initial_state.with_spec(des.default_spec(alpha=alpha))
            r = des.design_cost(state)
            assert r.cost_total == getattr(r, key)

    def test_convex_combination(self, initial_state):
        r = des.design_cost(initial_state)
        a = initial_state.spec.alpha
        assert abs(r.cost_total - (a * r.cost_grid + (1 - a) * r.cost_overlap)) < 1e-12

    def test_perfect_design_costs_zero(self):
        spec = des.default_spec(rows=2, cols=2)
        m = des.init_faceted_parabola(spec).mirrors[0]
        r = des.design_cost(des.state_from_mirrors([m] * 4, spec))
        assert r.cost_total == pytest.approx(0.0, abs=1e-20)

    def test_deterministic(self, initial_state):
        a = json.dumps(des.design_cost(initial_state).to_dict(), sort_keys=True)
        b = json.dumps(des.design_cost(initial_state).to_dict(), sort_keys=True)
        assert a == b


class TestConstraints:
    def test_occlusion_detected(self):
        state = des.init_faceted_parabola(des.default_spec(rows=1, cols=2))
        bent = rotate_about_centroid(state.mirrors[1], rotation([0, 1, 0], -np.radians(60)))
        state = state.with_mirrors([state.mirrors[0], bent])
        occ = [v for v in des.check_constraints(state) if v.kind == "occlusion"]
        assert occ and occ[0].mirrors == (1, 0) and occ[0].magnitude > 0
        assert dense_blocked_fraction(state, 1, 0) > 0

    def test_exact_min_gap_is_allowed(self):
        state = des.init_faceted_parabola(des.default_spec(rows=1, cols=2))
        d = geo.polygon_distance_2d(state.mirrors[0].world_vertices[:, :2], state.mirrors[1].world_vertices[:, :2])
        assert d == pytest.approx(state.spec.min_gap, abs=1e-15)
        assert not [v for v in des.check_constraints(state) if v.kind == "spacing"]

    def test_spacing_shortfall(self):
        spec = des.default_spec(rows=1, cols=2, min_gap=0.002)
        state = des.init_faceted_parabola(spec)
        wider = des.default_spec(rows=1, cols=2, min_gap=0.003)
        v = [x for x in des.check_constraints(state.with_spec(wider)) if x.kind == "spacing"]
        assert v and v[0].magnitude == pytest.approx(0.001, abs=1e-12)


class TestOptimize:
    def test_penalized_cost_monotone(self, short_run):
        _, trace = short_run
        for r in (0, 1):
            seq = trace.penalized(r)
            assert all(b <= a for a, b in zip(seq, seq[1:]))

    def test_result_feasible_and_valid(self, short_run, initial_state):
        state, trace = short_run
        assert max((v.magnitude for v in des.check_constraints(state)), default=0.0) <= 1e-6
        for m in state.mirrors:
            assert len(m.extent) == 4 and geo.signed_area_2d(m.extent) > 0
        assert trace.final_report.cost_total <= trace.initial_report.cost_total

    def test_flat_design_is_fixed_point(self):
        state = flat_tiles(des.default_spec(alpha=1.0))
        assert des.check_constraints(state) == []
        final, trace = des.optimize(state, rounds=1, max_sweeps=2)
        assert len(trace.rows) == 1
        for a, b in zip(final.mirrors, state.mirrors):
            assert np.array_equal(a.world_vertices, b.world_vertices)

    def test_infeasible_start(self):
        state = des.init_faceted_parabola(des.default_spec(rows=1, cols=2))
        bent = rotate_about_centroid(state.mirrors[1], rotation([0, 1, 0], -np.radians(60)))
        with pytest.raises(InfeasibleStartError):
            des.optimize(state.with_mirrors([state.mirrors[0], bent]))

    def test_budget_flags_unconverged(self, initial_state):
        state, trace = des.optimize(initial_state, rounds=1, max_evals=20)
        assert not trace.converged and trace.evaluations == 20
        assert des.design_cost(state).cost_total <= trace.initial_report.cost_total

    def test_golden_design_improves_both_terms(self, golden_state):
        init = des.design_cost(des.init_faceted_parabola(golden_state.spec))
        final = des.design_cost(golden_state)
        assert final.cost_total < init.cost_total
        assert final.cost_grid <= init.cost_grid
        assert final.overlap_area(0.5) > init.overlap_area(0.5)
        assert not [v for v in final.constraint_violations if v.magnitude > 1e-6]

    def test_estimator_wrapper(self):
        est = des.MirrorArrayDesigner(optimize=False).fit()
        assert est.state_.n_mirrors == 9
        assert est.score() == -est.report_.cost_total
        assert est.get_params()["rounds"] == 3
