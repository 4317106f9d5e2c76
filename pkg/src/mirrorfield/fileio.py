"""File formats: versioned JSON, binary PGM, CSV tables, SVG plots and OBJ meshes.

Every writer takes a ``provenance`` mapping (tool version, input hashes,
seed) and embeds it in the file: as a top-level key in JSON, as a header
comment in PGM, CSV, SVG and OBJ.  Nothing time-dependent is written, so
identical inputs give byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import SchemaVersionError, ValidationError
from .features import Feature4D
from .lightfield import LightField4D, RectifiedGridModel
from .simulate import Observation, RawImage

__all__ = [
    "SCHEMA_VERSIONS",
    "dump_json",
    "load_json",
    "provenance",
    "read_features_csv",
    "read_lightfield",
    "read_obj",
    "read_observations_csv",
    "read_pgm",
    "sha256_file",
    "write_features_csv",
    "write_lightfield",
    "write_obj",
    "write_observations_csv",
    "write_overlap_svg",
    "write_pgm",
    "write_trace_csv",
]

SCHEMA_VERSIONS = {
    "design": "1.0",
    "design_spec": "1.0",
    "scene": "1.0",
    "submap": "1.0",
    "calibration": "1.0",
    "lightfield": "1.0",
    "features": "1.0",
    "config": "1.0",
}


# ---------------------------------------------------------------------------
# Provenance
# ---------------------------------------------------------------------------


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def provenance(inputs=None, seed=None, command=None):
    """Tool version, sha256 of each named input file, and the RNG seed."""
    hashes = {}
    for name, path in sorted((inputs or {}).items()):
        if path is None:
            continue
        p = Path(path)
        if p.is_dir():
            h = hashlib.sha256()
            for child in sorted(p.iterdir()):
                if child.is_file():
                    h.update(child.name.encode())
                    h.update(sha256_file(child).encode())
            hashes[name] = h.hexdigest()
        else:
            hashes[name] = sha256_file(p)
    out = {"tool": "mirrorfield", "version": __version__, "inputs": hashes, "seed": seed}
    if command is not None:
        out["command"] = command
    return out


def _provenance_line(prov):
    return json.dumps(prov or {}, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dump_json(path, kind, data, prov=None):
    """Write ``{"schema", "schema_version", "provenance", "data"}`` deterministically."""
    if kind not in SCHEMA_VERSIONS:
        raise ValidationError(f"unknown schema kind {kind!r}")
    doc = {
        "schema": f"mirrorfield.{kind}",
        "schema_version": SCHEMA_VERSIONS[kind],
        "provenance": prov or {},
        "data": data,
    }
    text = json.dumps(doc, sort_keys=True, indent=2, default=_jsonable) + "\n"
    Path(path).write_text(text)
    return text


def load_json(path, kind):
    """Read a versioned JSON file, returning ``(data, provenance)``.

    Files written by a newer major schema version are refused.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "schema" not in doc:
        raise ValidationError(f"{path}: missing schema header")
    if doc["schema"] != f"mirrorfield.{kind}":
        raise ValidationError(f"{path}: expected schema mirrorfield.{kind}, found {doc['schema']}")
    have = str(doc.get("schema_version", "0.0"))
    want = SCHEMA_VERSIONS[kind]
    if int(have.split(".")[0]) > int(want.split(".")[0]):
        raise SchemaVersionError(f"{path}: schema version {have} is newer than supported {want}")
    return doc["data"], doc.get("provenance", {})


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------


def write_pgm(path, pixels, maxval=65535, prov=None):
    """Binary (P5) graymap; ``pixels`` in [0, 1] are scaled to ``maxval``."""
    a = np.asarray(pixels, dtype=float)
    if a.ndim != 2:
        raise ValidationError("PGM images must be 2D")
    if maxval not in (255, 65535):
        raise ValidationError("maxval must be 255 or 65535")
    q = np.rint(np.clip(a, 0.0, 1.0) * maxval)
    body = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    h, w = a.shape
    header = f"P5\n# mirrorfield {_provenance_line(prov)}\n{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(header + body)


def _pgm_tokens(data):
    """Header tokens and the offset of the raster (comments skipped)."""
    tokens, i = [], 0
    comments = []
    while len(tokens) < 4:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            j = data.index(b"\n", i)
            comments.append(data[i + 1:j].decode(errors="replace").strip())
            i = j + 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        tokens.append(data[i:j].decode())
        i = j
    return tokens, i + 1, comments


def read_pgm(path, with_comments=False):
    """Pixels of a binary PGM as floats in [0, 1] (and header comments if asked)."""
    data = Path(path).read_bytes()
    tokens, off, comments = _pgm_tokens(data)
    if tokens[0] != "P5":
        raise ValidationError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    raster = np.frombuffer(data, dtype=dt, count=w * h, offset=off)
    img = raster.reshape(h, w).astype(float) / maxval
    return (img, comments) if with_comments else img


def read_raw_image(path):
    img = read_pgm(path)
    return RawImage(img.shape[1], img.shape[0], img)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _write_csv(path, header, rows, prov):
    buf = io.StringIO()
    buf.write(f"# mirrorfield {_provenance_line(prov)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    Path(path).write_text(buf.getvalue())


def _read_csv(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_observations_csv(path, observations, prov=None):
    rows = [(o.mirror_index, o.corner_id[0], o.corner_id[1], o.corner_id[2], float(o.pixel[0]), float(o.pixel[1]))
            for o in observations]
    _write_csv(path, ["mirror_index", "board", "row", "col", "px", "py"], rows, prov)


def read_observations_csv(path):
    try:
        rows = _read_csv(path)
        return [Observation(int(r["mirror_index"]), (int(r["board"]), int(r["row"]), int(r["col"])),
                            np.array([float(r["px"]), float(r["py"])])) for r in rows]
    except (KeyError, ValueError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed observation table ({exc})") from exc


def write_features_csv(path, features, prov=None):
    rows = [(float(f.pixel[0]), float(f.pixel[1]), float(f.slope), int(f.support_count), float(f.residual_rms_px))
            for f in features]
    _write_csv(path, ["u", "v", "slope", "support", "residual"], rows, prov)


def read_features_csv(path):
    return [Feature4D(np.array([float(r["u"]), float(r["v"])]), float(r["slope"]), int(r["support"]),
                      float(r["residual"])) for r in _read_csv(path)]


def write_trace_csv(path, trace, prov=None, include_overlap=True):
    """Optimizer trace; the overlap column is left out when it carries no weight (alpha = 1)."""
    cols = ["round", "iteration", "weight", "penalized", "cost_total", "cost_grid", "cost_overlap", "penalty"]
    if not include_overlap:
        cols.remove("cost_overlap")
    _write_csv(path, cols, [[row[c] for c in cols] for row in trace.rows], prov)


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------


def _fmt(x):
    return f"{x:.3f}"


def write_overlap_svg(path, state, prov=None, size=320):
    """Footprints of every mirror at each evaluation depth, full overlap in green.

    One panel per depth, drawn in the evaluation plane's 2D frame (mm).
    """
    from .design import fov_footprint, full_overlap

    frame = state.eval_frame
    depths = list(state.spec.eval_depths)
    panels = []
    for d in depths:
        origin = frame.origin(d)
        polys = []
        for k in range(state.n_mirrors):
            fp = fov_footprint(state, k, d)
            polys.append((fp.vertices - origin) @ frame.axes2d.T * 1000.0)
        ov, area = full_overlap(state, d)
        ov2 = (ov.vertices - origin) @ frame.axes2d.T * 1000.0 if not ov.is_empty else np.zeros((0, 2))
        panels.append((d, polys, ov2, area))
    extent = max(float(np.max(np.abs(p))) for _, polys, _, _ in panels for p in polys) * 1.05
    pad = 20
    W = len(panels) * (size + pad) + pad
    H = size + 2 * pad + 20
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f"<!-- mirrorfield {_provenance_line(prov).replace('--', '-')} -->",
           f'<rect width="{W}" height="{H}" fill="white"/>']
    for i, (d, polys, ov2, area) in enumerate(panels):
        x0 = pad + i * (size + pad)
        y0 = pad + 20

        def to_px(p):
            return [(x0 + (q[0] / extent + 1) * size / 2, y0 + (1 - q[1] / extent) * size / 2) for q in p]

        out.append(f'<text x="{x0}" y="{pad + 8}" font-family="sans-serif" font-size="12">'
                   f'depth {d:.3f} m, full overlap {area * 1e4:.3f} cm2</text>')
        out.append(f'<rect x="{x0}" y="{y0}" width="{size}" height="{size}" fill="none" stroke="#ccc"/>')
        if len(ov2) >= 3:
            pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in to_px(ov2))
            out.append(f'<polygon points="{pts}" fill="#2ca02c" fill-opacity="0.6" stroke="none"/>')
        for k, p in enumerate(polys):
            pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in to_px(p))
            out.append(f'<polygon points="{pts}" fill="none" stroke="#1f77b4" stroke-width="1" data-mirror="{k}"/>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------


def write_obj(path, quads, prov=None):
    """Mirror extents as quad faces; ``quads`` is a list of (4, 3) vertex arrays."""
    lines = [f"# mirrorfield {_provenance_line(prov)}", "o mirrors"]
    faces = []
    n = 0
    for q in quads:
        q = np.asarray(q, dtype=float)
        if q.shape != (4, 3):
            raise ValidationError("each face needs 4 vertices")
        for v in q:
            lines.append("v " + " ".join(repr(float(c)) for c in v))
        faces.append("f " + " ".join(str(n + i + 1) for i in range(4)))
        n += 4
    Path(path).write_text("\n".join(lines + faces) + "\n")


def read_obj(path):
    """Quad faces of an OBJ file as a list of (4, 3) arrays."""
    verts, faces = [], []
    for ln in Path(path).read_text().splitlines():
        parts = ln.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
    verts = np.array(verts, dtype=float).reshape(-1, 3)
    return [verts[f] for f in faces]


# ---------------------------------------------------------------------------
# Light-field directory
# ---------------------------------------------------------------------------


def write_lightfield(directory, lf, prov=None, tile=False):
    """``view_s_t.pgm`` + ``mask_s_t.pgm`` per view, ``lf.json``, optional ``tile.pgm``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    S, T = lf.views.shape[:2]
    for s in range(S):
        for t in range(T):
            write_pgm(d / f"view_{s}_{t}.pgm", np.where(lf.masks[s, t], lf.views[s, t], 0.0), 65535, prov)
            write_pgm(d / f"mask_{s}_{t}.pgm", lf.masks[s, t].astype(float), 255, prov)
    S_, T_, U, V = lf.dims
    dump_json(d / "lf.json", "lightfield", {
        "dims": {"S": S_, "T": T_, "U": U, "V": V},
        "grid": lf.grid.to_dict(),
        "source": lf.source,
        "meta": lf.meta,
    }, prov)
    if tile:
        write_pgm(d / "tile.pgm", lf.tile(), 65535, prov)


def read_lightfield(directory):
    d = Path(directory)
    data, _ = load_json(d / "lf.json", "lightfield")
    dims = data["dims"]
    S, T, U, V = dims["S"], dims["T"], dims["U"], dims["V"]
    views = np.zeros((S, T, V, U))
    masks = np.zeros((S, T, V, U), dtype=bool)
    for s in range(S):
        for t in range(T):
            views[s, t] = read_pgm(d / f"view_{s}_{t}.pgm")
            masks[s, t] = read_pgm(d / f"mask_{s}_{t}.pgm") > 0.5
    return LightField4D(views, masks, RectifiedGridModel.from_dict(data["grid"]), data.get("source", ""),
                        data.get("meta", {}))


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
