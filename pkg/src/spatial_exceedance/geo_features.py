"""Covariate extraction from planar vector layers and a concentration grid.

All coordinates are projected metres.  Buffers are Minkowski dilations of the
site polygon, so a 100 m buffer around a school is the set of points within
100 m of any part of its grounds, footprint included.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import shapely
from shapely.geometry import MultiLineString, MultiPolygon, Polygon, box
from shapely.strtree import STRtree

from .errors import (
    EmptyFeatureError,
    GeometryError,
    InputError,
    UnassignedSiteError,
    UncoveredSiteError,
)

# Fallback radius for sites too small to contain a grid point.
FALLBACK_RADIUS_M = 20.0
# Resolution used when a buffer polygon is materialised for output.
BUFFER_QUAD_SEGS = 64


def validate_polygon(poly, name="polygon"):
    """Raise GeometryError unless `poly` is a valid (multi)polygon of positive area."""
    if not isinstance(poly, (Polygon, MultiPolygon)):
        raise GeometryError(f"{name}: expected Polygon, got {poly.geom_type}")
    if poly.is_empty or not poly.is_valid:
        raise GeometryError(f"{name}: invalid or self-intersecting polygon")
    if not poly.area > 1e-9:
        raise GeometryError(f"{name}: polygon area must be positive")
    return poly


def _check_radius(radius):
    if not (np.isfinite(radius) and radius > 0):
        raise InputError(f"buffer radius must be positive, got {radius!r}")


@dataclass(frozen=True)
class ConcentrationGrid:
    """Point samples of annual mean concentration (µg/m³)."""

    xy: np.ndarray
    values: np.ndarray
    spacing: float = 20.0
    _tree: STRtree = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        xy = np.ascontiguousarray(self.xy, dtype=float).reshape(-1, 2)
        values = np.ascontiguousarray(self.values, dtype=float).ravel()
        if len(xy) != len(values):
            raise InputError("grid coordinates and values differ in length")
        if len(values) == 0:
            raise InputError("concentration grid is empty")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise InputError("grid values must be finite and positive")
        if len(np.unique(xy, axis=0)) != len(xy):
            raise InputError("concentration grid contains duplicate points")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_tree", STRtree(shapely.points(xy)))

    def __len__(self):
        return len(self.values)


@dataclass
class SiteRecord:
    site_id: str
    polygon: Polygon
    ward_id: str
    borough_id: str
    concentration: float
    exceeds: bool
    covariates: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# distances, counts, intensities


def min_distance(site, features):
    """Shortest straight-line distance in km from `site` to any feature.

    Interior points of the polygon count, so a feature inside or touching the
    site gives 0.
    """
    feats = list(features)
    if not feats:
        raise EmptyFeatureError("min_distance needs at least one feature")
    d = shapely.distance(np.asarray(feats, dtype=object), site)
    return float(np.min(d)) / 1000.0


def _is_convex(site):
    if not isinstance(site, Polygon) or site.interiors:
        return False
    return abs(site.convex_hull.area - site.area) <= 1e-12 * max(site.area, 1.0)


def dilation_area(site, radius):
    """Exact area of the Minkowski dilation of `site` by a disc of `radius`.

    Convex polygons use the Steiner formula.  Non-convex outlines use two
    polygonal buffers and cancel the leading chord-approximation error.
    """
    _check_radius(radius)
    if _is_convex(site):
        return site.area + site.exterior.length * radius + math.pi * radius**2
    coarse = site.buffer(radius, quad_segs=128).area
    fine = site.buffer(radius, quad_segs=256).area
    return (4.0 * fine - coarse) / 3.0


def buffer_region(site, radius):
    """Polygonal approximation of the dilation of `site` by `radius`."""
    _check_radius(radius)
    return site.buffer(radius, quad_segs=BUFFER_QUAD_SEGS)


def count_within_buffer(site, points, radius):
    """Number of points whose distance to `site` is at most `radius`."""
    _check_radius(radius)
    pts = list(points)
    if not pts:
        return 0
    d = shapely.distance(np.asarray(pts, dtype=object), site)
    return int(np.count_nonzero(d <= radius))


def _polygon_edges(site):
    parts = site.geoms if isinstance(site, MultiPolygon) else [site]
    rings = [r for part in parts for r in (part.exterior, *part.interiors)]
    starts, ends = [], []
    for ring in rings:
        c = np.asarray(ring.coords, dtype=float)
        starts.append(c[:-1])
        ends.append(c[1:])
    return np.vstack(starts), np.vstack(ends)


def _linear_interval(s0, s1, lo, hi):
    """t-interval where lo <= s0 + s1*t <= hi, vectorised; NaN marks empty."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - s0) / s1
        tb = (hi - s0) / s1
    t_lo = np.minimum(ta, tb)
    t_hi = np.maximum(ta, tb)
    flat = s1 == 0
    inside = (s0 >= lo) & (s0 <= hi)
    t_lo = np.where(flat, np.where(inside, -np.inf, np.nan), t_lo)
    t_hi = np.where(flat, np.where(inside, np.inf, np.nan), t_hi)
    return t_lo, t_hi


def _capsule_intervals(a, d, p, q, radius):
    """Parameter intervals of segment a + t*d lying within `radius` of each edge p->q."""
    lo = np.full(len(p), np.inf)
    hi = np.full(len(p), -np.inf)
    dd = d @ d
    for c in (p, q):
        w = a - c
        b = 2.0 * (w @ d)
        cc = np.einsum("ij,ij->i", w, w) - radius * radius
        disc = b * b - 4.0 * dd * cc
        ok = disc >= 0
        root = np.sqrt(np.where(ok, disc, 0.0))
        lo = np.where(ok, np.minimum(lo, (-b - root) / (2.0 * dd)), lo)
        hi = np.where(ok, np.maximum(hi, (-b + root) / (2.0 * dd)), hi)
    u = q - p
    length = np.hypot(u[:, 0], u[:, 1])
    good = length > 0
    safe = np.where(good, length, 1.0)
    uhat = u / safe[:, None]
    nhat = np.column_stack([-uhat[:, 1], uhat[:, 0]])
    w = a - p
    s0 = np.einsum("ij,ij->i", w, uhat)
    s1 = uhat @ d
    n0 = np.einsum("ij,ij->i", w, nhat)
    n1 = nhat @ d
    a_lo, a_hi = _linear_interval(s0, s1, 0.0, length)
    b_lo, b_hi = _linear_interval(n0, n1, -radius, radius)
    r_lo = np.maximum(a_lo, b_lo)
    r_hi = np.minimum(a_hi, b_hi)
    rect = good & ~np.isnan(r_lo) & ~np.isnan(r_hi) & (r_lo <= r_hi)
    lo = np.where(rect, np.minimum(lo, r_lo), lo)
    hi = np.where(rect, np.maximum(hi, r_hi), hi)
    return lo, hi


def _interior_intervals(site, a, d, p, q):
    """Parameter intervals of the segment that lie inside the polygon."""
    u = q - p
    denom = d[0] * u[:, 1] - d[1] * u[:, 0]
    w = p - a
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[:, 0] * u[:, 1] - w[:, 1] * u[:, 0]) / denom
        s = (w[:, 0] * d[1] - w[:, 1] * d[0]) / denom
    hit = (denom != 0) & (t > 0) & (t < 1) & (s >= 0) & (s <= 1)
    cuts = np.unique(np.concatenate([[0.0, 1.0], t[hit]]))
    mids = 0.5 * (cuts[:-1] + cuts[1:])
    mx = a[0] + mids * d[0]
    my = a[1] + mids * d[1]
    inside = shapely.contains_xy(site, mx, my)
    return [(cuts[i], cuts[i + 1]) for i in np.flatnonzero(inside)]


def _union_measure(intervals):
    total = 0.0
    cur_lo = cur_hi = None
    for lo, hi in sorted(intervals):
        if cur_hi is None or lo > cur_hi:
            if cur_hi is not None:
                total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    if cur_hi is not None:
        total += cur_hi - cur_lo
    return total


def _segment_length_within(site, edges, a, b, radius):
    d = b - a
    seg_len = math.hypot(d[0], d[1])
    if seg_len == 0.0:
        return 0.0
    p, q = edges
    lo, hi = _capsule_intervals(a, d, p, q, radius)
    lo = np.maximum(lo, 0.0)
    hi = np.minimum(hi, 1.0)
    keep = lo < hi
    pieces = list(zip(lo[keep].tolist(), hi[keep].tolist()))
    pieces.extend(_interior_intervals(site, a, d, p, q))
    return _union_measure(pieces) * seg_len


def _line_parts(line):
    if isinstance(line, MultiLineString):
        return list(line.geoms)
    return [line]


def clipped_length(site, lines, radius):
    """Total length of `lines` lying within `radius` of `site` (metres)."""
    _check_radius(radius)
    starts, ends = [], []
    for line in lines:
        for part in _line_parts(line):
            c = np.asarray(part.coords, dtype=float)
            starts.append(c[:-1])
            ends.append(c[1:])
    if not starts:
        return 0.0
    a_all = np.vstack(starts)
    b_all = np.vstack(ends)
    # segments farther than the radius contribute nothing
    near = shapely.distance(shapely.linestrings(np.stack([a_all, b_all], axis=1)), site) <= radius
    a_all, b_all = a_all[near], b_all[near]
    whole = np.zeros(len(a_all), dtype=bool)
    if _is_convex(site) and len(a_all):
        # the dilation of a convex set is convex: both ends inside means all inside
        da = shapely.distance(shapely.points(a_all), site)
        db = shapely.distance(shapely.points(b_all), site)
        whole = (da <= radius) & (db <= radius)
    total = 0.0
    for a, b in zip(a_all[whole], b_all[whole]):
        total += math.hypot(b[0] - a[0], b[1] - a[1])
    if (~whole).any():
        edges = _polygon_edges(site)
        for a, b in zip(a_all[~whole], b_all[~whole]):
            total += _segment_length_within(site, edges, a, b, radius)
    return total


def line_intensity_within_buffer(site, lines, radius):
    """Line length per unit area (m/m²) inside the `radius` dilation of `site`."""
    length = clipped_length(site, lines, radius)
    if length == 0.0:
        return 0.0
    return length / dilation_area(site, radius)


# ---------------------------------------------------------------------------
# exposure assignment


def aggregate_grid_over_polygon(site, grid, site_id=None):
    """Mean grid concentration over a site polygon.

    Uses the points covered by the polygon (boundary included); when there are
    none, the points within 20 m of the polygon.
    """
    x0, y0, x1, y1 = site.bounds
    r = FALLBACK_RADIUS_M
    cand = np.sort(grid._tree.query(box(x0 - r, y0 - r, x1 + r, y1 + r)))
    if len(cand):
        pts = grid.xy[cand]
        covered = shapely.intersects_xy(site, pts[:, 0], pts[:, 1])
        if covered.any():
            return float(np.mean(grid.values[cand[covered]]))
        d = shapely.distance(shapely.points(pts), site)
        near = d <= FALLBACK_RADIUS_M
        if near.any():
            return float(np.mean(grid.values[cand[near]]))
    raise UncoveredSiteError(site_id if site_id is not None else "<unnamed>")


def dichotomize(value, threshold):
    """True when `value` strictly exceeds `threshold`."""
    if not np.isfinite(value):
        raise InputError(f"concentration must be finite, got {value!r}")
    if not threshold > 0:
        raise InputError(f"threshold must be positive, got {threshold!r}")
    return bool(value > threshold)


def assign_containing_region(site, regions, site_id=None):
    """Id of the region containing the site's centroid.

    A centroid on a shared boundary goes to the lexicographically smallest
    region id among those covering it.
    """
    c = site.centroid
    hits = [rid for rid, poly in regions if poly.covers(c)]
    if not hits:
        raise UnassignedSiteError(site_id if site_id is not None else "<unnamed>")
    return min(hits)


# ---------------------------------------------------------------------------
# batched extraction over many sites


class RegionIndex:
    """Spatial index over (region_id, polygon) pairs for centroid assignment."""

    def __init__(self, regions):
        regions = list(regions)
        self.ids = [rid for rid, _ in regions]
        self.polygons = [poly for _, poly in regions]
        self._tree = STRtree(self.polygons)

    def assign(self, site, site_id=None):
        c = site.centroid
        cand = self._tree.query(c, predicate="intersects")
        hits = [self.ids[i] for i in cand]
        if not hits:
            raise UnassignedSiteError(site_id if site_id is not None else "<unnamed>")
        return min(hits)


class FeatureLayer:
    """A geometry collection with an STR-tree for per-site queries."""

    def __init__(self, geometries: Sequence, name: str = "layer"):
        self.name = name
        self.geometries = np.asarray(list(geometries), dtype=object)
        self._tree = STRtree(self.geometries) if len(self.geometries) else None

    def __len__(self):
        return len(self.geometries)

    def _candidates(self, site, radius):
        if self._tree is None:
            return np.empty(0, dtype=np.intp)
        x0, y0, x1, y1 = site.bounds
        idx = self._tree.query(box(x0 - radius, y0 - radius, x1 + radius, y1 + radius))
        return np.sort(idx)

    def min_distance(self, site):
        return float(self.min_distances([site])[0])

    def min_distances(self, sites):
        """Nearest-feature distance (km) for each site."""
        if self._tree is None:
            raise EmptyFeatureError(f"layer {self.name!r} has no features")
        sites = np.asarray(list(sites), dtype=object)
        (src, _), dist = self._tree.query_nearest(sites, return_distance=True)
        out = np.full(len(sites), np.inf)
        np.minimum.at(out, src, dist)
        return out / 1000.0

    def count_within(self, site, radius):
        return int(self.counts_within([site], radius)[0])

    def counts_within(self, sites, radius):
        """Points within `radius` (closed) of each site."""
        _check_radius(radius)
        sites = np.asarray(list(sites), dtype=object)
        if self._tree is None:
            return np.zeros(len(sites), dtype=np.int64)
        # generous prefilter; the exact closed-ball test is the explicit distance below
        src, tgt = self._tree.query(sites, predicate="dwithin", distance=radius * (1 + 1e-9) + 1e-9)
        d = shapely.distance(sites[src], self.geometries[tgt])
        src = src[d <= radius]
        return np.bincount(src, minlength=len(sites)).astype(np.int64)

    def intensity_within(self, site, radius):
        _check_radius(radius)
        idx = self._candidates(site, radius)
        if len(idx) == 0:
            return 0.0
        return line_intensity_within_buffer(site, self.geometries[idx], radius)


@dataclass(frozen=True)
class FeatureSpec:
    """One site-level covariate: how to compute it and from which layer.

    kind is one of ``distance`` (km to nearest feature), ``count`` (points
    within `radius` m), ``intensity`` (line length per m² within `radius` m)
    or ``property`` (a numeric attribute of the site feature itself).
    """

    name: str
    kind: str
    source: str
    radius: float | None = None

    def __post_init__(self):
        if self.kind not in ("distance", "count", "intensity", "property"):
            raise InputError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind in ("count", "intensity"):
            if self.radius is None:
                raise InputError(f"feature {self.name!r}: {self.kind} needs a radius")
            _check_radius(self.radius)

    @classmethod
    def parse(cls, name, text):
        parts = text.split()
        if len(parts) < 2:
            raise InputError(f"feature {name!r}: expected '<kind> <source> [radius]'")
        radius = float(parts[2]) if len(parts) > 2 else None
        return cls(name, parts[0], parts[1], radius)

    def to_text(self):
        if self.radius is None:
            return f"{self.kind} {self.source}"
        return f"{self.kind} {self.source} {self.radius:g}"


def compute_site_feature(spec, site, layers, properties):
    """Value of one feature spec for a single site."""
    if spec.kind == "property":
        try:
            return float(properties[spec.source])
        except KeyError:
            raise InputError(f"site attribute {spec.source!r} missing") from None
        except (TypeError, ValueError):
            raise InputError(f"site attribute {spec.source!r} is not numeric") from None
    layer = _layer(layers, spec)
    if spec.kind == "distance":
        return layer.min_distance(site)
    if spec.kind == "count":
        return float(layer.count_within(site, spec.radius))
    return layer.intensity_within(site, spec.radius)


def _layer(layers, spec):
    try:
        return layers[spec.source]
    except KeyError:
        raise InputError(f"feature {spec.name!r}: no layer named {spec.source!r}") from None


def extract_covariates(
    sites: Sequence[tuple[str, Polygon, Mapping]],
    layers: Mapping[str, FeatureLayer],
    specs: Iterable[FeatureSpec],
):
    """Evaluate every feature spec for every site; returns an (S, k) array."""
    specs = list(specs)
    polys = [poly for _, poly, _ in sites]
    out = np.empty((len(sites), len(specs)))
    for j, spec in enumerate(specs):
        if spec.kind == "property":
            out[:, j] = [compute_site_feature(spec, None, layers, props) for _, _, props in sites]
        elif spec.kind == "distance":
            out[:, j] = _layer(layers, spec).min_distances(polys)
        elif spec.kind == "count":
            out[:, j] = _layer(layers, spec).counts_within(polys, spec.radius)
        else:
            layer = _layer(layers, spec)
            out[:, j] = [layer.intensity_within(p, spec.radius) for p in polys]
    if not np.all(np.isfinite(out)):
        raise InputError("non-finite covariate value produced")
    return out
