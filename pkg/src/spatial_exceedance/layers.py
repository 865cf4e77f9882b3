"""Reading and writing GeoJSON layers, grid CSVs and covariate tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from shapely.geometry import mapping, shape

from .errors import InputError
from .geo_features import ConcentrationGrid

POLYGONAL = ("Polygon", "MultiPolygon")
LINEAR = ("LineString", "MultiLineString")


def _require(path):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"input file not found: {p}")
    return p


def read_geojson(path, expect=None):
    """Return [(geometry, properties)] from a FeatureCollection."""
    p = _require(path)
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{p}: not valid JSON ({exc})") from None
    if doc.get("type") != "FeatureCollection":
        raise InputError(f"{p}: expected a GeoJSON FeatureCollection")
    out = []
    for k, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry")
        if geom is None:
            raise InputError(f"{p}: feature {k} has no geometry")
        g = shape(geom)
        if expect and g.geom_type not in expect:
            raise InputError(f"{p}: feature {k} is {g.geom_type}, expected one of {expect}")
        out.append((g, dict(feat.get("properties") or {})))
    return out


def write_geojson(features, path):
    """Write [(geometry, properties)] as a FeatureCollection."""
    doc = {
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "properties": props, "geometry": mapping(geom)}
            for geom, props in features
        ],
    }
    Path(path).write_text(json.dumps(doc))


def read_grid(path, spacing=20.0):
    p = _require(path)
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y", "value"]:
            raise InputError(f"{p}: grid header must be 'x,y,value'")
        rows = [r for r in reader if r]
    try:
        arr = np.array(rows, dtype=float).reshape(-1, 3)
    except ValueError:
        raise InputError(f"{p}: non-numeric grid entry") from None
    return ConcentrationGrid(arr[:, :2], arr[:, 2], spacing)


def write_grid(grid, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "value"])
        for (x, y), v in zip(grid.xy, grid.values):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


def read_table(path, key):
    """CSV rows keyed by column `key`; values kept as strings."""
    p = _require(path)
    with open(p, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and key not in rows[0]:
        raise InputError(f"{p}: missing column {key!r}")
    table = {}
    for r in rows:
        if r[key] in table:
            raise InputError(f"{p}: duplicate {key} {r[key]!r}")
        table[r[key]] = r
    return table


def write_table(rows, columns, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


COVARIATE_FIXED = ("site_id", "ward_id", "borough_id", "concentration", "exceeds")


def write_covariate_table(records, covariate_names, path):
    """One row per SiteRecord: ids, concentration, exceedance flag, covariates."""
    cols = list(COVARIATE_FIXED) + list(covariate_names)
    rows = []
    for r in records:
        row = {
            "site_id": r.site_id,
            "ward_id": r.ward_id,
            "borough_id": r.borough_id,
            "concentration": float(r.concentration),
            "exceeds": bool(r.exceeds),
        }
        for n in covariate_names:
            row[n] = float(r.covariates[n])
        rows.append(row)
    write_table(rows, cols, path)


def read_covariate_table(path):
    p = _require(path)
    with open(p, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if list(cols[: len(COVARIATE_FIXED)]) != list(COVARIATE_FIXED):
            raise InputError(f"{p}: header must start with {','.join(COVARIATE_FIXED)}")
        rows = list(reader)
    names = tuple(cols[len(COVARIATE_FIXED):])
    try:
        values = np.array([[float(r[n]) for n in names] for r in rows], dtype=float)
        conc = np.array([float(r["concentration"]) for r in rows])
    except ValueError:
        raise InputError(f"{p}: non-numeric covariate value") from None
    return {
        "site_id": [r["site_id"] for r in rows],
        "ward_id": [r["ward_id"] for r in rows],
        "borough_id": [r["borough_id"] for r in rows],
        "concentration": conc,
        "exceeds": np.array([int(r["exceeds"]) for r in rows], dtype=float),
        "names": names,
        "values": values.reshape(len(rows), len(names)),
    }
