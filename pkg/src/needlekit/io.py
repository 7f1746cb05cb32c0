"""On-disk formats: raw-u8 masks with a JSON header, and needle lists."""

from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np

from .core import NeedleCurve, PointCloud, Polyline, VolumeMeta, mask_to_points, sample_equidistant
from .errors import FormatError, InvalidInput

N_WRITE_SAMPLES = 100


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix == ".raw":
        p = p.with_suffix(".json")
    if p.suffix != ".json":
        p = p.with_name(p.name + ".json")
    return p, p.with_suffix(".raw")


def write_mask(path, mask, meta: VolumeMeta) -> Path:
    header, raw = _paths(path)
    mask = np.asarray(mask)
    if mask.shape != meta.dims:
        raise InvalidInput(f"mask shape {mask.shape} does not match dims {meta.dims}")
    header.parent.mkdir(parents=True, exist_ok=True)
    doc = {"dims": list(meta.dims), "spacing_mm": list(meta.spacing_mm), "encoding": "raw-u8"}
    header.write_text(json.dumps(doc) + "\n")
    # x fastest, then y, then z
    raw.write_bytes((mask != 0).astype(np.uint8).ravel(order="F").tobytes())
    return header


def _load_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError("file not found", source=str(path)) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON ({exc.msg})", source=str(path),
                          field=f"line {exc.lineno} column {exc.colno}") from None


def read_header(path) -> VolumeMeta:
    header, _ = _paths(path)
    doc = _load_json(header)
    if not isinstance(doc, dict):
        raise FormatError("header must be a JSON object", source=str(header))
    for key in ("dims", "spacing_mm", "encoding"):
        if key not in doc:
            raise FormatError("missing field", source=str(header), field=key)
    if doc["encoding"] != "raw-u8":
        raise FormatError(f"unsupported encoding {doc['encoding']!r}", source=str(header), field="encoding")
    for key, kind in (("dims", int), ("spacing_mm", (int, float))):
        val = doc[key]
        if not (isinstance(val, list) and len(val) == 3 and all(
                isinstance(v, kind) and not isinstance(v, bool) for v in val)):
            raise FormatError("expected a list of three numbers", source=str(header), field=key)
    try:
        return VolumeMeta(tuple(doc["dims"]), tuple(doc["spacing_mm"]))
    except InvalidInput as exc:
        raise FormatError(str(exc), source=str(header), field="dims/spacing_mm") from None


def read_mask_array(path) -> tuple[np.ndarray, VolumeMeta]:
    header, raw = _paths(path)
    meta = read_header(header)
    try:
        data = raw.read_bytes()
    except FileNotFoundError:
        raise FormatError("raw data file not found", source=str(raw)) from None
    expected = int(np.prod(meta.dims))
    if len(data) != expected:
        raise FormatError(f"size mismatch: expected {expected} bytes, got {len(data)}",
                          source=str(raw), field="size")
    flat = np.frombuffer(data, dtype=np.uint8)
    bad = np.flatnonzero(flat > 1)
    if len(bad):
        raise FormatError(f"value {flat[bad[0]]} is not 0/1", source=str(raw), field=f"byte offset {bad[0]}")
    return flat.reshape(meta.dims, order="F").astype(bool), meta


def read_mask(path) -> PointCloud:
    mask, meta = read_mask_array(path)
    return mask_to_points(mask, meta)


def needle_to_dict(traj, n_samples: int = N_WRITE_SAMPLES) -> dict:
    doc = {"points_mm": sample_equidistant(traj, n_samples).tolist()}
    if isinstance(traj, NeedleCurve):
        doc.update(degree=traj.degree, coeff_x=list(traj.coeff_x), coeff_y=list(traj.coeff_y))
    else:
        doc["vertices_mm"] = traj.vertices.tolist()
    return doc


def dumps_needles(needles) -> str:
    return json.dumps([needle_to_dict(n) for n in needles], indent=2) + "\n"


def write_needles(path, needles) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_needles(needles))
    return path


def _points(value, source, field) -> np.ndarray:
    if not isinstance(value, list) or len(value) < 2:
        raise FormatError("expected a list of at least two [x, y, z] points", source, field)
    for i, p in enumerate(value):
        if not (isinstance(p, list) and len(p) == 3 and all(
                isinstance(c, (int, float)) and not isinstance(c, bool) and math.isfinite(c) for c in p)):
            raise FormatError("expected [x, y, z] with finite numbers", source, f"{field}[{i}]")
    pts = np.asarray(value, dtype=float)
    bad = np.flatnonzero(np.diff(pts[:, 2]) <= 0)
    if len(bad):
        raise FormatError("z must be strictly increasing bottom to tip", source, f"{field}[{bad[0] + 1}][2]")
    return pts


def parse_needles(doc, source: str = "<needles>") -> list:
    if not isinstance(doc, list):
        raise FormatError("expected a JSON list of needles", source, "$")
    out = []
    for i, item in enumerate(doc):
        where = f"[{i}]"
        if not isinstance(item, dict):
            raise FormatError("needle must be an object", source, where)
        if "points_mm" not in item:
            raise FormatError("missing field", source, f"{where}.points_mm")
        pts = _points(item["points_mm"], source, f"{where}.points_mm")
        if "coeff_x" in item or "coeff_y" in item or "degree" in item:
            deg = item.get("degree")
            if deg not in (1, 2, 3):
                raise FormatError("degree must be 1, 2 or 3", source, f"{where}.degree")
            for key in ("coeff_x", "coeff_y"):
                c = item.get(key)
                if not (isinstance(c, list) and len(c) == deg + 1 and all(
                        isinstance(v, (int, float)) and not isinstance(v, bool) for v in c)):
                    raise FormatError(f"expected {deg + 1} coefficients", source, f"{where}.{key}")
            try:
                out.append(NeedleCurve(deg, tuple(item["coeff_x"]), tuple(item["coeff_y"]),
                                       pts[0, 2], pts[-1, 2]))
            except InvalidInput as exc:
                raise FormatError(str(exc), source, where) from None
        elif "vertices_mm" in item:
            out.append(Polyline(_points(item["vertices_mm"], source, f"{where}.vertices_mm")))
        else:
            out.append(Polyline(pts))
    return out


def read_needles(path) -> list:
    path = Path(path)
    return parse_needles(_load_json(path), str(path))


def read_control_points(path) -> list[np.ndarray]:
    """Annotated control points of each needle in a needle file."""
    path = Path(path)
    doc = _load_json(path)
    parse_needles(doc, str(path))
    return [np.asarray(item["points_mm"], dtype=float) for item in doc]


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def stem(path) -> str:
    return os.path.splitext(os.path.basename(str(path)))[0]
