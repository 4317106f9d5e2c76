"""Command-line interface: ``mirrorfield <command> [flags]``.

Commands: design, render, calibrate, decode, features, export-obj.
Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure.  Every flag can also come from a TOML file given with
``--config``; flags on the command line win.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import calibrate as cal
from . import fileio
from . import geometry as geo
from . import scenes
from .decode import decode_frame
from .design import DesignSpec, DesignState, MirrorArrayDesigner
from .exceptions import (ConfigError, MirrorfieldError, NumericalError, PipelineError, RankDeficiencyError,
                         ValidationError)
from .features import FilterConfig, extract_features
from .simulate import RawImage, SubImageMap, render, subimage_map, synth_observations

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

logger = logging.getLogger("mirrorfield")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

REFERENCE_SPATIAL_MM = 1.80  # hardware spatial RMS quoted for comparison in reports


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_PATH_KEYS = ("design", "scene", "calibration", "submap", "frame", "lightfield", "spec", "observations")


def load_config(path):
    """Parse a TOML project file and check the files it names exist.

    Layout: optional top-level ``seed`` and ``output_dir``, a ``[paths]``
    table, a ``[camera]`` intrinsics table, and one table per command whose
    keys are that command's flag names (dashes or underscores).
    """
    try:
        with open(path, "rb") as f:
            cfg = tomllib.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = Path(path).parent
    paths = cfg.get("paths", {})
    for key, value in paths.items():
        if key not in _PATH_KEYS:
            raise ConfigError(f"{path}: unknown path key {key!r}")
        p = Path(value)
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            raise ConfigError(f"{path}: referenced file {key}={value} does not exist")
        paths[key] = str(p)
    cfg["paths"] = paths
    if "camera" in cfg:
        try:
            geo.CameraIntrinsics.from_dict(cfg["camera"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: incomplete [camera] table ({exc})") from exc
    return cfg


def _apply_config(parser, subparsers, cfg):
    """Install config values as parser defaults so explicit flags override them."""
    top = {k: cfg[k] for k in ("seed", "output_dir") if k in cfg}
    for name, sp in subparsers.items():
        dests = {a.dest for a in sp._actions}
        section = cfg.get(name, {})
        defaults = {}
        for key, value in section.items():
            dest = key.replace("-", "_")
            if dest not in dests:
                raise ConfigError(f"[{name}] has unknown key {key!r}")
            defaults[dest] = value
        for key, value in top.items():
            if key in dests and key not in defaults:
                defaults[key] = value
        for key, value in cfg.get("paths", {}).items():
            if key in dests and key not in defaults:
                defaults[key] = value
        sp.set_defaults(**defaults)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _require(value, what):
    if value is None:
        raise ValidationError(f"missing {what}")
    return value


def _out_path(args, value, default_name):
    p = Path(value) if value else Path(default_name)
    if not p.is_absolute() and getattr(args, "output_dir", None):
        p = Path(args.output_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _load_design(path):
    data, _ = fileio.load_json(path, "design")
    key = "optimized" if "optimized" in data else "state"
    return DesignState.from_dict(data[key])


def _load_scene(path, state):
    data, _ = fileio.load_json(path, "scene")
    return scenes.scene_from_dict(state, data)


def _parse_depths(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    try:
        return tuple(float(x) for x in str(text).split(",") if x.strip())
    except ValueError as exc:
        raise ValidationError(f"bad depth list {text!r}") from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_design(args):
    if args.spec:
        data, _ = fileio.load_json(args.spec, "design_spec")
        spec = DesignSpec.from_dict(data)
    else:
        spec = DesignSpec(camera=args.camera) if args.camera is not None else DesignSpec()
    est = MirrorArrayDesigner(
        alpha=args.alpha, eval_depths=_parse_depths(args.depths), rounds=args.rounds, max_sweeps=args.iters,
        optimize=not args.no_optimize,
    ).fit(spec)
    out = Path(args.output or "design_out")
    if not out.is_absolute() and args.output_dir:
        out = Path(args.output_dir) / out
    out.mkdir(parents=True, exist_ok=True)
    prov = fileio.provenance({"spec": args.spec}, args.seed, "design")
    trace = est.trace_
    fileio.dump_json(out / "design.json", "design", {
        "initial": est.initial_state_.to_dict(),
        "optimized": est.state_.to_dict(),
        "initial_report": est.initial_report_.to_dict(),
        "final_report": est.report_.to_dict(),
        "method": trace.method if trace else "none",
        "converged": bool(trace.converged) if trace else True,
        "evaluations": int(trace.evaluations) if trace else 0,
    }, prov)
    fileio.write_overlap_svg(out / "overlap.svg", est.state_, prov)
    fileio.write_overlap_svg(out / "overlap_initial.svg", est.initial_state_, prov)
    if trace is not None:
        fileio.write_trace_csv(out / "trace.csv", trace, prov, include_overlap=est.spec_.alpha < 1.0)
    a, b = est.initial_report_, est.report_
    print(f"cost {a.cost_total:.6g} -> {b.cost_total:.6g}")
    for d in est.spec_.eval_depths:
        print(f"full overlap at {d:g} m: {a.overlap_area(d) * 1e4:.4f} -> {b.overlap_area(d) * 1e4:.4f} cm^2")
    if b.constraint_violations:
        print(f"warning: {len(b.constraint_violations)} constraint violations remain", file=sys.stderr)
    return EXIT_OK


def cmd_render(args):
    state = _load_design(_require(args.design, "design file"))
    if args.scale != 1.0:
        state = state.with_spec(_scaled_spec(state.spec, args.scale))
    scene = _load_scene(_require(args.scene, "scene file"), state)
    img = render(state, scene, supersample=args.supersample, seed=args.seed)
    prov = fileio.provenance({"design": args.design, "scene": args.scene}, args.seed, "render")
    out = _out_path(args, args.output, "frame.pgm")
    fileio.write_pgm(out, img.pixels, 65535, prov)
    sm_path = _out_path(args, args.submap_out, str(out.with_name("submap.json")))
    fileio.dump_json(sm_path, "submap", subimage_map(state).to_dict(), prov)
    print(f"wrote {out} ({img.width}x{img.height}) and {sm_path}")
    return EXIT_OK


def _scaled_spec(spec, factor):
    from dataclasses import replace
    return replace(spec, camera=spec.camera.scaled(factor))


def _perturb(mirrors, tilt_deg, offset_mm, seed):
    rng = np.random.default_rng(seed)
    out = []
    for m in mirrors:
        e1, e2 = m.frame_axes
        phi = rng.uniform(0, 2 * np.pi)
        ang = np.radians(tilt_deg)
        n = cal._tilt_normal(m.normal, e1, e2, ang * np.cos(phi), ang * np.sin(phi))
        out.append(m.with_plane(n, m.offset + offset_mm * 1e-3 * rng.choice([-1.0, 1.0])))
    return tuple(out)


def _mirror_deltas(design_mirrors, mirrors):
    rows = []
    for k, (a, b) in enumerate(zip(design_mirrors, mirrors)):
        ang = float(np.degrees(np.arccos(np.clip(a.normal @ b.normal, -1.0, 1.0))))
        rows.append({"mirror": k, "tilt_deg": ang, "offset_mm": (b.offset - a.offset) * 1e3})
    return rows


def cmd_calibrate(args):
    state = _load_design(_require(args.design, "design file"))
    spec = state.spec
    if args.synth:
        scene = _load_scene(_require(args.scene, "scene file (needed with --synth)"), state)
        obs = synth_observations(state, scene, args.noise, seed=args.seed)
    else:
        obs = fileio.read_observations_csv(_require(args.observations, "observations CSV or --synth"))
        scene = _load_scene(_require(args.scene, "scene file with board poses"), state)
    if not scene.checkerboards:
        raise ValidationError("the scene has no checkerboards")
    init = _perturb(state.mirrors, args.perturb_tilt_deg, args.perturb_offset_mm, args.seed)
    problem = cal.CalibrationProblem(spec.camera, spec.camera_pose, obs, scene.checkerboards, init,
                                     spec.rows, spec.cols)
    prov = fileio.provenance({"design": args.design, "scene": args.scene, "observations": args.observations},
                             args.seed, "calibrate")
    out = _out_path(args, args.output, "calib.json")
    try:
        res = cal.levenberg_marquardt(problem, max_iter=args.max_iter, joint_boards=args.joint)
    except RankDeficiencyError as exc:
        fileio.dump_json(out, "calibration", {"failed": True, "error": str(exc),
                                              "mirror_index": exc.mirror_index}, prov)
        raise
    data = res.to_dict()
    data["deltas_from_design"] = _mirror_deltas(state.mirrors, res.mirrors)
    data["reference_rms_spatial_mm"] = REFERENCE_SPATIAL_MM
    data["failed"] = not res.converged
    fileio.dump_json(out, "calibration", data, prov)
    print(f"rms {res.rms_px:.4g} px, spatial rms {res.rms_spatial_mm:.4g} mm "
          f"(reference hardware magnitude {REFERENCE_SPATIAL_MM:.2f} mm), "
          f"{res.iterations} iterations, {'converged' if res.converged else 'NOT converged'}")
    if not res.converged:
        raise NumericalError("calibration did not converge; best-so-far result saved")
    return EXIT_OK


def cmd_decode(args):
    img = fileio.read_pgm(_require(args.frame, "frame"))
    raw = RawImage(img.shape[1], img.shape[0], img)
    data, _ = fileio.load_json(_require(args.calibration, "calibration file"), "calibration")
    if data.get("failed") and "mirrors" not in data:
        raise ValidationError("calibration file records a failed calibration")
    calib = cal.CalibrationResult.from_dict(data)
    sm_data, _ = fileio.load_json(_require(args.submap, "sub-image map"), "submap")
    submap = SubImageMap.from_dict(sm_data)
    if (submap.width, submap.height) != (raw.width, raw.height):
        raise ValidationError("sub-image map and frame sizes differ")
    if calib.intrinsics is not None and (calib.intrinsics.width, calib.intrinsics.height) != (raw.width, raw.height):
        factor = raw.width / calib.intrinsics.width
        calib.intrinsics = calib.intrinsics.scaled(factor)
    lf = decode_frame(raw, calib, submap, source=Path(args.frame).name)
    prov = fileio.provenance({"frame": args.frame, "calibration": args.calibration, "submap": args.submap},
                             args.seed, "decode")
    out = Path(args.output or "lf")
    if not out.is_absolute() and args.output_dir:
        out = Path(args.output_dir) / out
    fileio.write_lightfield(out, lf, prov, tile=args.tile)
    S, T, U, V = lf.dims
    print(f"wrote {S}x{T} views of {U}x{V} to {out}")
    return EXIT_OK


def cmd_features(args):
    lf = fileio.read_lightfield(_require(args.lightfield, "light-field directory"))
    S, T = lf.views.shape[:2]
    config = FilterConfig(args.max_dist, args.n_min, args.ratio).resolved(S * T)
    feats = extract_features(lf, config, min_depth=args.min_depth, band_px=args.band_px)
    prov = fileio.provenance({"lightfield": args.lightfield}, args.seed, "features")
    out = _out_path(args, args.output, "features.csv")
    fileio.write_features_csv(out, feats, prov)
    if args.json:
        fileio.dump_json(_out_path(args, args.json, "features.json"), "features",
                         {"config": {"max_dist_px": config.max_dist_px, "n_min": config.n_min,
                                     "match_ratio": config.match_ratio},
                          "features": [f.to_dict() for f in feats]}, prov)
    print(f"{len(feats)} features written to {out}")
    return EXIT_OK


def cmd_export_obj(args):
    src = _require(args.design, "design file or OBJ")
    if str(src).lower().endswith(".obj"):
        quads = fileio.read_obj(src)
    else:
        quads = [m.world_vertices for m in _load_design(src).mirrors]
    prov = fileio.provenance({"design": src}, args.seed, "export-obj")
    out = _out_path(args, args.output, "mount.obj")
    fileio.write_obj(out, quads, prov)
    print(f"wrote {len(quads)} faces to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="mirrorfield", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mirrorfield {__version__}")
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sps = {}

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--output-dir", default=None)
        sps[name] = sp
        return sp

    sp = add("design", cmd_design, "initialize and optimize a mirror array")
    sp.add_argument("spec", nargs="?", help="design spec JSON (defaults if omitted)")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--depths", help="comma-separated evaluation depths in meters")
    sp.add_argument("--iters", type=int, default=8, help="maximum sweeps per penalty round")
    sp.add_argument("--rounds", type=int, default=3)
    sp.add_argument("--no-optimize", action="store_true")
    sp.add_argument("-o", "--output", help="output directory")
    sp.set_defaults(camera=None)

    sp = add("render", cmd_render, "ray-trace a raw frame")
    sp.add_argument("design", nargs="?")
    sp.add_argument("scene", nargs="?")
    sp.add_argument("--supersample", type=int, default=1)
    sp.add_argument("--scale", type=float, default=1.0, help="resolution factor for the base camera")
    sp.add_argument("--submap-out", default=None)
    sp.add_argument("-o", "--output")

    sp = add("calibrate", cmd_calibrate, "estimate mirror planes from corner observations")
    sp.add_argument("design", nargs="?")
    sp.add_argument("--observations")
    sp.add_argument("--scene")
    sp.add_argument("--synth", action="store_true", help="synthesize observations from the scene")
    sp.add_argument("--noise", type=float, default=0.0, help="synthetic corner noise (px)")
    sp.add_argument("--perturb-tilt-deg", type=float, default=0.0)
    sp.add_argument("--perturb-offset-mm", type=float, default=0.0)
    sp.add_argument("--max-iter", type=int, default=200)
    sp.add_argument("--joint", action="store_true", help="also estimate board poses")
    sp.add_argument("-o", "--output")

    sp = add("decode", cmd_decode, "decode a raw frame into a 4D light field")
    sp.add_argument("frame", nargs="?")
    sp.add_argument("calibration", nargs="?")
    sp.add_argument("submap", nargs="?")
    sp.add_argument("--tile", action="store_true")
    sp.add_argument("-o", "--output")

    sp = add("features", cmd_features, "extract 4D features from a light field")
    sp.add_argument("lightfield", nargs="?")
    sp.add_argument("--max-dist", type=float, default=1.0)
    sp.add_argument("--n-min", type=int, default=None)
    sp.add_argument("--ratio", type=float, default=0.8)
    sp.add_argument("--min-depth", type=float, default=None, help="nearest scene depth, enables epipolar gating")
    sp.add_argument("--band-px", type=float, default=None)
    sp.add_argument("--json", default=None)
    sp.add_argument("-o", "--output")

    sp = add("export-obj", cmd_export_obj, "export mirror quads as an OBJ mesh")
    sp.add_argument("design", nargs="?", help="design JSON or an OBJ to re-export")
    sp.add_argument("-o", "--output")
    return parser, sps


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, sps = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            cfg = load_config(known.config)
            _apply_config(parser, sps, cfg)
            if "camera" in cfg:
                sps["design"].set_defaults(camera=geo.CameraIntrinsics.from_dict(cfg["camera"]))
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if isinstance(exc.cause, NumericalError) else EXIT_VALIDATION
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MirrorfieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
