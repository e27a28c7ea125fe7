"""File formats.

Histograms and reconstructed distributions travel as sparse CSV tables
(`c_s,c_i1,c_i2,frequency` for three axes) with a JSON sidecar at
``<file>.json`` carrying the dense shape, axis kind, provenance hash, seed
and detector parameters.  Quasi-distribution grids are dense CSV
(`W_i1,W_i2,P`), criterion/depth reports are flat CSV, fit results are JSON.
All writers format floats via ``repr`` so identical inputs produce identical
bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from ._version import __version__
from .detector_model import Histogram3D
from .errors import InputError
from .field_model import PHOTOCOUNTS, JointDist
from .quasidist import QuasiGrid

HIST_HEADER_3D = ["c_s", "c_i1", "c_i2", "frequency"]


def config_hash(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def _write_sidecar(path, meta: dict) -> None:
    meta = dict(meta)
    meta.setdefault("tool_version", __version__)
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_sidecar(path) -> dict:
    sp = sidecar_path(path)
    if not sp.exists():
        return {}
    try:
        with open(sp) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed sidecar {sp}: {exc}") from exc


def write_histogram(path, hist: Histogram3D, meta: dict | None = None) -> None:
    path = Path(path)
    vals = hist.values
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HIST_HEADER_3D)
        for idx in np.argwhere(vals != 0.0):
            writer.writerow([int(idx[0]), int(idx[1]), int(idx[2]), repr(float(vals[tuple(idx)]))])
    meta = dict(meta or {})
    meta.update(
        {
            "format": "histogram-3d",
            "shape": list(vals.shape),
            "trial_count": int(hist.trial_count),
            "axis_kind": meta.get("axis_kind", PHOTOCOUNTS),
        }
    )
    _write_sidecar(path, meta)


def write_dist3d(path, dist: JointDist, meta: dict | None = None) -> None:
    """Reconstructed 3D photon distributions reuse the histogram table layout;
    the sidecar's axis_kind distinguishes them."""
    meta = dict(meta or {})
    meta["axis_kind"] = dist.axis_kind
    meta["tail_mass"] = float(dist.tail_mass)
    write_histogram(path, Histogram3D(dist.values, trial_count=0), meta)


def read_histogram(path) -> tuple[Histogram3D, dict]:
    path = Path(path)
    meta = read_sidecar(path)
    rows = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot open histogram file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != HIST_HEADER_3D:
            raise InputError(
                f"{path}:1: expected header {','.join(HIST_HEADER_3D)}, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise InputError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                c = tuple(int(x) for x in row[:3])
                v = float(row[3])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
            if min(c) < 0:
                raise InputError(f"{path}:{lineno}: negative photocount index {c}")
            if v < 0:
                raise InputError(f"{path}:{lineno}: negative frequency {v}")
            rows.append((c, v))
    if "shape" in meta:
        shape = tuple(int(x) for x in meta["shape"])
    elif rows:
        shape = tuple(max(c[i] for c, _ in rows) + 1 for i in range(3))
    else:
        raise InputError(f"{path}: empty histogram and no sidecar shape")
    vals = np.zeros(shape)
    for c, v in rows:
        if any(ci >= si for ci, si in zip(c, shape)):
            raise InputError(f"{path}: cell {c} outside sidecar shape {shape}")
        vals[c] = v
    return Histogram3D(vals, trial_count=int(meta.get("trial_count", 0))), meta


def write_dist2d(path, dist: JointDist, meta: dict | None = None) -> None:
    path = Path(path)
    if dist.axis_kind == PHOTOCOUNTS:
        header = ["c_i1", "c_i2", "frequency"]
    else:
        header = ["n_i1", "n_i2", "probability"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for idx in np.argwhere(dist.values != 0.0):
            writer.writerow([int(idx[0]), int(idx[1]), repr(float(dist.values[tuple(idx)]))])
    meta = dict(meta or {})
    meta.update(
        {
            "format": "dist-2d",
            "shape": list(dist.values.shape),
            "axis_kind": dist.axis_kind,
            "tail_mass": float(dist.tail_mass),
            "signed": bool(dist.signed),
        }
    )
    _write_sidecar(path, meta)


def read_dist2d(path) -> tuple[JointDist, dict]:
    path = Path(path)
    meta = read_sidecar(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != 3:
            raise InputError(f"{path}:1: expected a 3-column table, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append(((int(row[0]), int(row[1])), float(row[2])))
            except (ValueError, IndexError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    if "shape" in meta:
        shape = tuple(int(x) for x in meta["shape"])
    elif rows:
        shape = tuple(max(c[i] for c, _ in rows) + 1 for i in range(2))
    else:
        raise InputError(f"{path}: empty table and no sidecar shape")
    vals = np.zeros(shape)
    for c, v in rows:
        vals[c] = v
    kind = meta.get("axis_kind", PHOTOCOUNTS if header[0].startswith("c") else "photons")
    return (
        JointDist(vals, kind, tail_mass=float(meta.get("tail_mass", 0.0)),
                  signed=bool(meta.get("signed", False))),
        meta,
    )


def write_quasigrid(path, q: QuasiGrid, meta: dict | None = None) -> None:
    path = Path(path)
    from .quasidist import negativity_report

    rep = negativity_report(q)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["W_i1", "W_i2", "P"])
        for i, w1 in enumerate(q.w1):
            for j, w2 in enumerate(q.w2):
                writer.writerow([repr(float(w1)), repr(float(w2)), repr(float(q.values[i, j]))])
    meta = dict(meta or {})
    meta.update(
        {
            "format": "quasigrid",
            "s": q.s,
            "step": q.step,
            "truncation_order": list(q.truncation_order),
            "total_mass": q.total_mass,
            "negative_mass": rep.negative_mass,
            "min_value": rep.min_value,
            "min_location": list(rep.min_location),
        }
    )
    _write_sidecar(path, meta)


CRITERIA_HEADER = ["criterion", "indices", "value", "tau", "s_th", "saturated"]


def write_criteria_csv(path, rows: list[dict], meta: dict | None = None) -> None:
    """Flat criterion/depth table; ``rows`` entries may omit tau fields."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CRITERIA_HEADER)
        for row in rows:
            writer.writerow(
                [
                    row.get("criterion", ""),
                    _fmt_indices(row.get("indices")),
                    _fmt_float(row.get("value")),
                    _fmt_float(row.get("tau")),
                    _fmt_float(row.get("s_th")),
                    {True: "true", False: "false", None: ""}[row.get("saturated")],
                ]
            )
    if meta is not None:
        _write_sidecar(path, meta)


def _fmt_indices(idx) -> str:
    if idx is None:
        return ""
    return json.dumps(idx, separators=(",", ":"))


def _fmt_float(x) -> str:
    if x is None:
        return "NA"
    x = float(x)
    if np.isnan(x):
        return "NA"
    return repr(x)


def write_table_csv(path, header: list[str], rows: list[list], meta: dict | None = None) -> None:
    """Generic long-format table writer (figure-data CSVs)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            out = []
            for x in row:
                if isinstance(x, bool):
                    out.append("true" if x else "false")
                elif isinstance(x, (int, np.integer)):
                    out.append(str(int(x)))
                elif x is None or isinstance(x, (float, np.floating)):
                    out.append(_fmt_float(x))
                else:
                    out.append(str(x))
            writer.writerow(out)
    if meta is not None:
        _write_sidecar(path, meta)


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def read_config_file(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: line {exc.lineno}: {exc.msg}") from exc
