"""Command-line surface: every command driven through ``main`` in a scratch directory."""
import json
import shutil

import numpy as np
import pytest

from pipeline import GOLDEN_DIR, load_golden_design, run_pipeline, write_scenes
from mirrorfield import __version__
from mirrorfield import decode as dec
from mirrorfield import features as ft
from mirrorfield import fileio
from mirrorfield.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main

CENTRAL = (1, 1)


def run(*args):
    return main([str(a) for a in args])


def scene_file(path, data):
    fileio.dump_json(path, "scene", data)
    return path


def data_lines(path):
    return [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]


@pytest.fixture(scope="module")
def pipe(tmp_path_factory):
    """The full render/calibrate/decode/features chain on the frozen design."""
    w = tmp_path_factory.mktemp("pipe")
    shutil.copy(GOLDEN_DIR / "design.json", w / "design.json")
    out = run_pipeline(w, design_json=w / "design.json")
    return w, out


@pytest.fixture(scope="module")
def quick_design(tmp_path_factory):
    """A one-round optimization, cheap enough to repeat."""
    d = tmp_path_factory.mktemp("design")
    assert run("design", "--iters", "1", "--rounds", "1", "-o", d / "a") == EXIT_OK
    return d / "a"


class TestDesign:
    def test_outputs(self, quick_design):
        names = sorted(p.name for p in quick_design.iterdir())
        assert names == ["design.json", "overlap.svg", "overlap_initial.svg", "trace.csv"]
        data, prov = fileio.load_json(quick_design / "design.json", "design")
        assert {"initial", "optimized", "initial_report", "final_report"} <= set(data)
        assert prov["tool"] == "mirrorfield" and prov["seed"] == 0
        svg = (quick_design / "overlap.svg").read_text()
        assert svg.lstrip().startswith("<svg") or "<svg" in svg

    def test_trace_has_overlap_column(self, quick_design):
        assert "cost_overlap" in data_lines(quick_design / "trace.csv")[0].split(",")

    def test_alpha_one_drops_overlap_term(self, tmp_path):
        assert run("design", "--alpha", "1", "--iters", "1", "--rounds", "1", "-o", tmp_path / "d") == EXIT_OK
        header = data_lines(tmp_path / "d" / "trace.csv")[0].split(",")
        assert "cost_overlap" not in header and "cost_grid" in header

    def test_golden_design_improves(self):
        _, data = load_golden_design()
        assert data["final_report"]["cost_total"] < data["initial_report"]["cost_total"]

    def test_byte_identical_rerun(self, quick_design, tmp_path):
        assert run("design", "--iters", "1", "--rounds", "1", "-o", tmp_path / "b") == EXIT_OK
        for p in quick_design.iterdir():
            assert (tmp_path / "b" / p.name).read_bytes() == p.read_bytes(), p.name

    def test_depths_flag(self, tmp_path):
        assert run("design", "--no-optimize", "--depths", "0.4,0.6", "-o", tmp_path / "d") == EXIT_OK
        data, _ = fileio.load_json(tmp_path / "d" / "design.json", "design")
        assert [o["depth"] for o in data["final_report"]["overlap"]] == [0.4, 0.6]

    def test_invalid_spec_exit_code(self, tmp_path, capsys):
        fileio.dump_json(tmp_path / "spec.json", "design_spec", {"rows": 0, "cols": 3})
        assert run("design", tmp_path / "spec.json", "-o", tmp_path / "d") == EXIT_VALIDATION
        assert "error:" in capsys.readouterr().err

    def test_missing_spec_file(self, tmp_path):
        assert run("design", tmp_path / "nope.json") == EXIT_VALIDATION


class TestRender:
    def test_checkerboard_fills_nine_regions(self, tmp_path):
        design = GOLDEN_DIR / "design.json"
        scene = scene_file(tmp_path / "s.json", {"preset": "checkerboard"})
        assert run("render", design, scene, "--scale", "0.25", "-o", tmp_path / "f.pgm") == EXIT_OK
        raw = fileio.read_raw_image(tmp_path / "f.pgm")
        sm = fileio.load_json(tmp_path / "submap.json", "submap")[0]
        from mirrorfield.simulate import SubImageMap
        subs = dec.slice(raw, SubImageMap.from_dict(sm))
        assert len(subs) == 9
        for s in subs:
            vals = s.pixels[s.mask]
            assert vals.size > 0 and vals.std() > 0.1  # both square colours present

    def test_empty_scene_is_uniform(self, tmp_path):
        scene = scene_file(tmp_path / "s.json", {"preset": "empty", "background": 0.25})
        assert run("render", GOLDEN_DIR / "design.json", scene, "--scale", "0.25", "-o", tmp_path / "f.pgm") == 0
        img = fileio.read_pgm(tmp_path / "f.pgm")
        assert img.shape == (270, 480)
        assert np.all(img == img[0, 0]) and abs(img[0, 0] - 0.25) < 1e-4

    def test_seed_reproducible(self, tmp_path):
        scene = scene_file(tmp_path / "s.json", {"preset": "points"})
        for name in ("a", "b"):
            assert run("render", GOLDEN_DIR / "design.json", scene, "--scale", "0.25", "--seed", "4",
                       "-o", tmp_path / f"{name}.pgm", "--submap-out", tmp_path / f"{name}.json") == 0
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()
        _, comments = fileio.read_pgm(tmp_path / "a.pgm", with_comments=True)
        prov = json.loads(comments[0].split(" ", 1)[1])
        assert prov["seed"] == 4 and prov["version"] == __version__
        assert set(prov["inputs"]) == {"design", "scene"}

    def test_missing_scene(self, tmp_path):
        assert run("render", GOLDEN_DIR / "design.json", "-o", tmp_path / "f.pgm") == EXIT_VALIDATION


class TestCalibrate:
    def test_noiseless_synthetic(self, pipe, capsys):
        w, _ = pipe
        data, prov = fileio.load_json(w / "calib.json", "calibration")
        assert data["rms_spatial_mm"] < 1e-6
        assert not data["failed"] and data["converged"]
        assert len(data["deltas_from_design"]) == 9
        assert prov["seed"] == 7

    def test_noisy_synthetic_and_summary(self, tmp_path, capsys):
        write_scenes(tmp_path)
        code = run("calibrate", GOLDEN_DIR / "design.json", "--scene", tmp_path / "scene_calib.json", "--synth",
                   "--noise", "0.5", "--perturb-tilt-deg", "2", "--perturb-offset-mm", "3", "-o", tmp_path / "c.json")
        assert code == EXIT_OK
        data, _ = fileio.load_json(tmp_path / "c.json", "calibration")
        assert 0 < data["rms_spatial_mm"] < 5
        out = capsys.readouterr().out
        assert "1.80 mm" in out and "spatial rms" in out
        assert data["reference_rms_spatial_mm"] == 1.80

    def test_not_converged_saves_flagged_result(self, tmp_path):
        write_scenes(tmp_path)
        code = run("calibrate", GOLDEN_DIR / "design.json", "--scene", tmp_path / "scene_calib.json", "--synth",
                   "--perturb-tilt-deg", "2", "--perturb-offset-mm", "3", "--max-iter", "1", "-o", tmp_path / "c.json")
        assert code == EXIT_NUMERICAL
        data, _ = fileio.load_json(tmp_path / "c.json", "calibration")
        assert data["failed"] and len(data["mirrors"]) == 9

    def test_rank_deficiency(self, tmp_path, golden_state, calib_scene):
        from mirrorfield.simulate import synth_observations
        write_scenes(tmp_path)
        obs = synth_observations(golden_state, calib_scene, 0.0)
        one = next(o for o in obs if o.mirror_index == 4)
        obs = [o for o in obs if o.mirror_index != 4] + [one] * 6
        fileio.write_observations_csv(tmp_path / "obs.csv", obs)
        code = run("calibrate", GOLDEN_DIR / "design.json", "--observations", tmp_path / "obs.csv",
                   "--scene", tmp_path / "scene_calib.json", "-o", tmp_path / "c.json")
        assert code == EXIT_NUMERICAL
        data, _ = fileio.load_json(tmp_path / "c.json", "calibration")
        assert data["failed"] and data["mirror_index"] == 4

    def test_observations_file_roundtrip(self, tmp_path, golden_state, calib_scene):
        from mirrorfield.simulate import synth_observations
        write_scenes(tmp_path)
        fileio.write_observations_csv(tmp_path / "obs.csv", synth_observations(golden_state, calib_scene, 0.0))
        code = run("calibrate", GOLDEN_DIR / "design.json", "--observations", tmp_path / "obs.csv",
                   "--scene", tmp_path / "scene_calib.json", "--perturb-tilt-deg", "1", "-o", tmp_path / "c.json")
        assert code == EXIT_OK
        assert fileio.load_json(tmp_path / "c.json", "calibration")[0]["rms_px"] < 1e-9

    def test_too_few_observations(self, tmp_path, golden_state, calib_scene):
        from mirrorfield.simulate import synth_observations
        write_scenes(tmp_path)
        obs = [o for o in synth_observations(golden_state, calib_scene, 0.0) if o.mirror_index != 2]
        fileio.write_observations_csv(tmp_path / "obs.csv", obs)
        code = run("calibrate", GOLDEN_DIR / "design.json", "--observations", tmp_path / "obs.csv",
                   "--scene", tmp_path / "scene_calib.json", "-o", tmp_path / "c.json")
        assert code == EXIT_VALIDATION


class TestDecode:
    def test_writes_views_masks_metadata(self, pipe):
        w, _ = pipe
        names = {p.name for p in (w / "lf").iterdir()}
        assert {f"view_{s}_{t}.pgm" for s in range(3) for t in range(3)} <= names
        assert {f"mask_{s}_{t}.pgm" for s in range(3) for t in range(3)} <= names
        assert "lf.json" in names and "tile.pgm" in names
        assert "tile.pgm" not in {p.name for p in (w / "lf_points").iterdir()}

    def test_golden_frame_decodes_bit_exactly(self, pipe, golden):
        _, out = pipe
        for key in ("frame.pgm", "calib.json") + tuple(k for k in golden["hashes"] if k.startswith("lf/")):
            assert out["hashes"][key] == golden["hashes"][key], key

    def test_size_mismatch(self, pipe, tmp_path):
        w, _ = pipe
        fileio.write_pgm(tmp_path / "small.pgm", np.zeros((10, 12)))
        assert run("decode", tmp_path / "small.pgm", w / "calib.json", w / "submap.json",
                   "-o", tmp_path / "lf") == EXIT_VALIDATION

    def test_failed_calibration_refused(self, pipe, tmp_path):
        w, _ = pipe
        fileio.dump_json(tmp_path / "c.json", "calibration", {"failed": True, "error": "x"})
        assert run("decode", w / "frame.pgm", tmp_path / "c.json", w / "submap.json",
                   "-o", tmp_path / "lf") == EXIT_VALIDATION


class TestFeatures:
    def test_planted_targets_recovered_with_full_support(self, pipe, golden_state):
        from mirrorfield import scenes
        w, _ = pipe
        lf = fileio.read_lightfield(w / "lf_points")
        grid = lf.grid
        feats = fileio.read_features_csv(w / "features.csv")
        targets = scenes.point_target_scene(golden_state, seed=0).point_targets
        c = grid.view(*CENTRAL).center
        truth = []
        for tgt in targets:
            p = np.array(tgt.position)
            depth = float((grid.target_rotation.T @ (p - c))[2])
            truth.append((grid.project(grid.view(*CENTRAL), p[None])[0], ft.slope_at_depth(lf, depth)))
        assert len(feats) == len(targets)
        claimed = set()
        for f in feats:
            i = min(range(len(truth)), key=lambda k: np.linalg.norm(truth[k][0] - f.pixel))
            assert np.linalg.norm(truth[i][0] - f.pixel) < 1.0
            assert abs(f.slope - truth[i][1]) / truth[i][1] < 0.02
            claimed.add(i)
        assert len(claimed) == len(targets)
        assert [f.support_count for f in feats] == [9] * len(targets)

    def test_n_min_above_view_count(self, pipe, tmp_path, capsys):
        w, _ = pipe
        assert run("features", w / "lf_points", "--n-min", "10", "-o", tmp_path / "f.csv") == EXIT_VALIDATION
        assert "n_min" in capsys.readouterr().err
        assert not (tmp_path / "f.csv").exists()

    def test_empty_lightfield_gives_header_only(self, pipe, tmp_path):
        w, _ = pipe
        lf = fileio.read_lightfield(w / "lf_points")
        lf.views[:] = 0.1
        fileio.write_lightfield(tmp_path / "flat", lf)
        assert run("features", tmp_path / "flat", "-o", tmp_path / "f.csv") == EXIT_OK
        assert data_lines(tmp_path / "f.csv") == ["u,v,slope,support,residual"]

    def test_json_output(self, pipe, tmp_path):
        w, _ = pipe
        assert run("features", w / "lf_points", "--min-depth", "0.3", "--n-min", "8",
                   "-o", tmp_path / "f.csv", "--json", tmp_path / "f.json") == EXIT_OK
        data, _ = fileio.load_json(tmp_path / "f.json", "features")
        assert data["config"]["n_min"] == 8
        assert len(data["features"]) == len(data_lines(tmp_path / "f.csv")) - 1

    def test_missing_lightfield(self, tmp_path):
        assert run("features", tmp_path / "nowhere") == EXIT_VALIDATION


class TestExportObj:
    def test_faces_and_vertices(self, tmp_path, golden_state):
        assert run("export-obj", GOLDEN_DIR / "design.json", "-o", tmp_path / "m.obj") == EXIT_OK
        lines = (tmp_path / "m.obj").read_text().splitlines()
        assert sum(ln.startswith("f ") for ln in lines) == 9
        assert sum(ln.startswith("v ") for ln in lines) == 36
        quads = fileio.read_obj(tmp_path / "m.obj")
        for q, m in zip(quads, golden_state.mirrors):
            assert np.max(np.abs(q - m.world_vertices)) < 1e-9

    def test_reexport_is_idempotent(self, tmp_path):
        assert run("export-obj", GOLDEN_DIR / "design.json", "-o", tmp_path / "a.obj") == EXIT_OK
        assert run("export-obj", tmp_path / "a.obj", "-o", tmp_path / "b.obj") == EXIT_OK
        assert run("export-obj", tmp_path / "b.obj", "-o", tmp_path / "c.obj") == EXIT_OK
        # geometry is unchanged; only the provenance comment names a different input
        assert data_lines(tmp_path / "a.obj") == data_lines(tmp_path / "b.obj") == data_lines(tmp_path / "c.obj")


class TestConfig:
    def write(self, path, text):
        path.write_text(text)
        return path

    def test_flag_overrides_config(self, pipe, tmp_path):
        w, _ = pipe
        cfg = self.write(tmp_path / "p.toml", f'[paths]\nlightfield = "{w / "lf_points"}"\n[features]\nn-min = 10\n')
        assert run("--config", cfg, "features", "-o", tmp_path / "a.csv") == EXIT_VALIDATION
        assert run("--config", cfg, "features", "--n-min", "9", "--min-depth", "0.3",
                   "-o", tmp_path / "b.csv") == EXIT_OK
        assert (tmp_path / "b.csv").exists()

    def test_config_supplies_paths_and_output_dir(self, tmp_path, monkeypatch):
        shutil.copy(GOLDEN_DIR / "design.json", tmp_path / "design.json")
        cfg = self.write(tmp_path / "p.toml", 'seed = 3\noutput_dir = "out"\n[paths]\ndesign = "design.json"\n')
        # paths resolve against the config file, output_dir against the working directory
        work = tmp_path / "work"
        work.mkdir()
        monkeypatch.chdir(work)
        assert run("--config", cfg, "export-obj") == EXIT_OK
        first = (work / "out" / "mount.obj").read_text().splitlines()[0]
        assert json.loads(first.split(" ", 2)[2])["seed"] == 3

    def test_missing_referenced_file(self, tmp_path, capsys):
        cfg = self.write(tmp_path / "p.toml", '[paths]\ndesign = "absent.json"\n')
        assert run("--config", cfg, "export-obj") == EXIT_VALIDATION
        assert "does not exist" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        cfg = self.write(tmp_path / "p.toml", "[features]\nbogus = 1\n")
        assert run("--config", cfg, "features") == EXIT_VALIDATION

    def test_bad_toml(self, tmp_path):
        cfg = self.write(tmp_path / "p.toml", "[features\n")
        assert run("--config", cfg, "features") == EXIT_VALIDATION


class TestDeterminism:
    def test_regression_hashes(self, pipe, golden):
        """Every pipeline output except the design itself matches the frozen hashes."""
        _, out = pipe
        expected = {k: v for k, v in golden["hashes"].items() if not k.startswith("design/")}
        produced = {k: v for k, v in out["hashes"].items() if k != "design.json"}  # the copied input
        assert produced == expected
        assert out["n_features"] == golden["n_features"]

    def test_outputs_embed_provenance(self, pipe):
        w, _ = pipe
        for name in ("features.csv", "lf_points/view_1_1.pgm"):
            head = (w / name).read_bytes().split(b"\n", 2)
            line = head[0] if name.endswith(".csv") else head[1]
            prov = json.loads(line.decode().split(" ", 2)[2])
            assert prov["version"] == __version__ and "seed" in prov and prov["inputs"]
        _, prov = fileio.load_json(w / "calib.json", "calibration")
        assert set(prov["inputs"]) == {"design", "scene"}


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out
