"""Shared fixtures.

Expensive objects (the frozen optimized design, a fitted decoder, a decoded
point-target light field) are session scoped so each is built once.
"""
from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from pipeline import load_golden, load_golden_design  # noqa: E402

from mirrorfield import calibrate as cal  # noqa: E402
from mirrorfield import decode as dec  # noqa: E402
from mirrorfield import design as des  # noqa: E402
from mirrorfield import scenes  # noqa: E402
from mirrorfield import simulate as sim  # noqa: E402

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def truth_calibration(state):
    """Calibration result whose mirrors are exactly the design's mirrors."""
    spec = state.spec
    return cal.CalibrationResult(
        mirrors=state.mirrors, rms_px=0.0, rms_spatial_mm=0.0, iterations=0, converged=True,
        covariance_diag=np.zeros(3 * state.n_mirrors), intrinsics=spec.camera,
        camera_pose=spec.camera_pose, rows=spec.rows, cols=spec.cols,
    )


def scaled_state(state, factor):
    """Same design seen by a camera with ``factor`` times the pixel density."""
    return state.with_spec(replace(state.spec, camera=state.spec.camera.scaled(factor)))


@pytest.fixture(scope="session")
def golden():
    return load_golden()


@pytest.fixture(scope="session")
def golden_state():
    return load_golden_design()[0]


@pytest.fixture(scope="session")
def initial_state():
    return des.init_faceted_parabola(des.default_spec())


@pytest.fixture(scope="session")
def small_state(golden_state):
    """The golden design behind a 480x270 sensor, for fast rendering tests."""
    return scaled_state(golden_state, 0.25)


@pytest.fixture(scope="session")
def calib_scene(golden_state):
    return scenes.calibration_scene(golden_state)


@pytest.fixture(scope="session")
def submap(golden_state):
    return sim.subimage_map(golden_state)


@pytest.fixture(scope="session")
def decoder(golden_state, submap):
    return dec.LightFieldDecoder().fit(truth_calibration(golden_state), submap)


@pytest.fixture(scope="session")
def point_scene(golden_state):
    return scenes.point_target_scene(golden_state, seed=0)


@pytest.fixture(scope="session")
def points_lf(golden_state, point_scene, decoder):
    """Full-resolution render of the 20-target scene, decoded."""
    return decoder.transform(sim.render(golden_state, point_scene, seed=0), source="points")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
