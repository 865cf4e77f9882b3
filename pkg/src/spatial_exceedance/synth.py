"""Synthetic study area with known ground truth for end-to-end validation.

The generator builds a jittered-lattice ward tessellation, groups wards into
contiguous boroughs, places school polygons and point/line layers, extracts
the site covariates with the production feature code, draws the latent
effects and outcome from the model itself and finally writes a
concentration grid consistent with that outcome.
"""

from __future__ import annotations

import functools
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import shapely
from scipy import optimize, stats
from shapely.affinity import rotate
from shapely.geometry import LineString, MultiLineString, Point, Polygon, box
from shapely.strtree import STRtree

from .adjacency import AdjacencyGraph, build_adjacency
from .errors import InputError
from .geo_features import ConcentrationGrid, FeatureLayer, FeatureSpec, extract_covariates
from .model import ModelDataset, ParameterState, PriorSpec, linear_predictor

# (mean, sd, min, max) in the working units of each covariate
MARGINALS = {
    "bus_stops_100m": (1.54, 1.64, 0.0, 19.0),
    "bus_stops_400m": (11.73, 5.79, 0.0, 53.0),
    "traffic_lights_100m": (1.14, 2.99, 0.0, 27.0),
    "traffic_lights_400m": (10.74, 15.96, 0.0, 130.0),
    "dist_main_road_km": (0.25, 0.28, 0.01, 2.78),
    "dist_ferry_km": (6.05, 4.32, 0.05, 19.07),
    "dist_underground_km": (2.59, 3.08, 0.01, 18.79),
    "road_intensity_100m": (0.02, 0.01, 0.0, 0.03),
    "road_intensity_400m": (0.02, 0.01, 0.0, 0.03),
    "vehicle_speed": (29.46, 5.42, 15.10, 54.56),
    "bus_fuel": (4.69, 2.33, 1.75, 13.69),
    "school_green_space": (10.94, 16.96, 0.0, 242.05),
    "ward_green_space_ha": (40.17, 63.99, 0.0, 605.15),
    "landuse_green_pct": (30.91, 12.72, 4.83, 59.32),
    "terraced_pct": (23.56, 0.13, 1.45, 63.83),
    "lone_parents_pct": (46.11, 8.54, 20.82, 73.58),
}

# posterior means reported for the final model, used as the ground truth
TRUE_COEFFICIENTS = {
    "bus_stops_100m": 0.33,
    "traffic_lights_400m": 0.04,
    "dist_main_road_km": -0.46,
    "dist_ferry_km": -0.36,
    "dist_underground_km": -0.67,
    "vehicle_speed": -1.22,
    "bus_fuel": 0.32,
    "school_green_space": -0.25,
    "landuse_green_pct": -0.08,
    "lone_parents_pct": 0.09,
    "terraced_pct": -0.12,
}

SITE_COVARIATES = (
    "bus_stops_100m",
    "traffic_lights_400m",
    "dist_main_road_km",
    "dist_ferry_km",
    "dist_underground_km",
    "school_green_space",
)
WARD_COVARIATES = ("vehicle_speed", "terraced_pct")
BOROUGH_COVARIATES = ("bus_fuel", "landuse_green_pct", "lone_parents_pct")
WARD_ATTRIBUTES = ("vehicle_speed", "terraced_pct", "ward_green_space_ha")
BOROUGH_ATTRIBUTES = ("bus_fuel", "landuse_green_pct", "lone_parents_pct")

# site features the generated layers support, in screening priority order
FEATURE_SPECS = (
    FeatureSpec("bus_stops_100m", "count", "bus_stops", 100.0),
    FeatureSpec("bus_stops_400m", "count", "bus_stops", 400.0),
    FeatureSpec("traffic_lights_400m", "count", "traffic_lights", 400.0),
    FeatureSpec("traffic_lights_100m", "count", "traffic_lights", 100.0),
    FeatureSpec("dist_main_road_km", "distance", "main_roads"),
    FeatureSpec("dist_ferry_km", "distance", "ferry_stations"),
    FeatureSpec("dist_underground_km", "distance", "underground_stations"),
    FeatureSpec("road_intensity_100m", "intensity", "roads", 100.0),
    FeatureSpec("road_intensity_400m", "intensity", "roads", 400.0),
    FeatureSpec("school_green_space", "property", "green_space"),
)
LAYER_FILES = {
    "bus_stops": "bus_stops.geojson",
    "traffic_lights": "traffic_lights.geojson",
    "main_roads": "main_roads.geojson",
    "roads": "roads.geojson",
    "ferry_stations": "ferry_stations.geojson",
    "underground_stations": "underground_stations.geojson",
}


@dataclass(frozen=True)
class SynthConfig:
    n_wards: int = 630
    n_boroughs: int = 33
    n_sites: int = 2861
    ward_area_km2: float = 2.5
    coefficients: dict = field(default_factory=lambda: dict(TRUE_COEFFICIENTS))
    tau_U: float = 1.0 / 0.21
    tau_V: float = 1.0 / 3.62
    tau_s: float = 1.0 / 0.02
    site_effects: bool = True
    concentration_range: tuple = (23.79, 61.67)
    threshold: float = 40.0
    target_exceedance: float = 495 / 2861
    concentration_per_logit: float = 2.0
    marginals: dict = field(default_factory=lambda: dict(MARGINALS))
    bus_stop_copula_rho: float = 0.95
    light_copula_rho: float = 0.7
    small_site_fraction: float = 22 / 2861
    min_site_spacing_m: float = 200.0
    gradient_noise: float = 0.25
    seed: int = 2016

    def __post_init__(self):
        if min(self.n_wards, self.n_boroughs, self.n_sites) < 1:
            raise InputError("ward, borough and site counts must be positive")
        if self.n_boroughs > self.n_wards:
            raise InputError("more boroughs than wards")
        if self.n_sites < self.n_wards:
            raise InputError("need at least one site per ward")
        lo, hi = self.concentration_range
        if not lo < self.threshold < hi:
            raise InputError("threshold must lie strictly inside the concentration range")
        if not 0 < self.target_exceedance < 1:
            raise InputError("target exceedance proportion must be in (0, 1)")
        for name in self.coefficients:
            if name not in SITE_COVARIATES + WARD_COVARIATES + BOROUGH_COVARIATES:
                raise InputError(f"no generator for covariate {name!r}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "concentration_range" in d:
            d["concentration_range"] = tuple(d["concentration_range"])
        if "marginals" in d:
            d["marginals"] = {k: tuple(v) for k, v in d["marginals"].items()}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown synthetic-city settings: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["concentration_range"] = list(self.concentration_range)
        d["marginals"] = {k: list(v) for k, v in self.marginals.items()}
        return d


# ---------------------------------------------------------------------------
# marginal helpers


@functools.lru_cache(maxsize=None)
def fit_truncnorm(mean, sd, lo, hi):
    """Parent normal (mu, sigma) whose truncation to [lo, hi] best matches mean and sd.

    The mean is matched with priority; when the sd is out of reach for a
    truncated normal the closest attainable value is used.
    """
    def moments(params):
        mu, log_sigma = params
        sigma = math.exp(log_sigma)
        a, b = (lo - mu) / sigma, (hi - mu) / sigma
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m, v = stats.truncnorm.stats(a, b, loc=mu, scale=sigma, moments="mv")
        if not (np.isfinite(m) and np.isfinite(v)):
            return 1e6, 1e6
        return float(m), math.sqrt(max(float(v), 0.0))

    def resid(params):
        m, s = moments(params)
        return [10.0 * (m - mean) / sd, (s - sd) / sd]

    best = None
    for start_mu in (mean, mean - sd, mean - 2 * sd, lo):
        res = optimize.least_squares(resid, [start_mu, math.log(sd)], method="lm")
        if best is None or res.cost < best.cost:
            best = res
    mu, log_sigma = best.x
    return float(mu), float(math.exp(log_sigma))


def truncnorm_ppf(u, mean, sd, lo, hi):
    mu, sigma = fit_truncnorm(mean, sd, lo, hi)
    a, b = (lo - mu) / sigma, (hi - mu) / sigma
    return stats.truncnorm.ppf(u, a, b, loc=mu, scale=sigma)


def sample_marginal(spec, size, rng):
    return truncnorm_ppf(rng.random(size), *spec)


def rank_assign(values, score):
    """Return `values` rearranged so that larger values go to larger scores."""
    out = np.empty(len(values))
    out[np.argsort(score, kind="stable")] = np.sort(values)
    return out


# ---------------------------------------------------------------------------
# ICAR sampling


class IcarSampler:
    """Exact draws from the sum-to-zero constrained ICAR via the Laplacian spectrum."""

    def __init__(self, graph):
        self.graph = graph
        lap = graph.laplacian()
        vals, vecs = np.linalg.eigh(lap)
        tol = 1e-9 * max(float(vals.max()) if len(vals) else 0.0, 1.0)
        keep = vals > tol
        self.vals = vals[keep]
        self.vecs = vecs[:, keep]
        self.labels = graph.labels
        self.sizes = np.bincount(graph.labels) if len(graph.labels) else np.zeros(0, int)

    def covariance(self, tau):
        return (self.vecs / (tau * self.vals)) @ self.vecs.T

    def draw(self, tau, rng, size=None):
        n = 1 if size is None else int(size)
        W = self.graph.n_regions
        if len(self.vals) == 0:
            out = np.zeros((n, W))
        else:
            z = rng.standard_normal((n, len(self.vals)))
            out = (z / np.sqrt(tau * self.vals)) @ self.vecs.T
            means = np.stack([np.bincount(self.labels, weights=row, minlength=len(self.sizes))
                              for row in out]) / self.sizes
            out = out - means[:, self.labels]
        return out[0] if size is None else out


def sample_icar(graph, tau_U, rng, size=None):
    return IcarSampler(graph).draw(tau_U, rng, size)


# ---------------------------------------------------------------------------
# geometry construction


def _grid_shape(n):
    best = (1, n)
    for r in range(1, int(math.isqrt(n)) + 1):
        if n % r == 0:
            best = (r, n // r)
    return best


def _ward_id(k, n):
    return f"W{k + 1:0{max(3, len(str(n)))}d}"


def _borough_id(k, n):
    return f"B{k + 1:0{max(2, len(str(n)))}d}"


def _site_id(k, n):
    return f"S{k + 1:0{max(4, len(str(n)))}d}"


def build_wards(cfg, rng):
    rows, cols = _grid_shape(cfg.n_wards)
    cell = math.sqrt(cfg.ward_area_km2) * 1000.0
    jit = 0.22 * cell
    vx = np.tile(np.arange(cols + 1) * cell, (rows + 1, 1)).astype(float)
    vy = np.tile((np.arange(rows + 1) * cell)[:, None], (1, cols + 1)).astype(float)
    dx = rng.uniform(-jit, jit, vx.shape)
    dy = rng.uniform(-jit, jit, vy.shape)
    dx[:, 0] = dx[:, -1] = 0.0
    dy[0, :] = dy[-1, :] = 0.0
    vx += dx
    vy += dy
    polys = []
    for i in range(rows):
        for j in range(cols):
            ring = [(vx[i, j], vy[i, j]), (vx[i, j + 1], vy[i, j + 1]),
                    (vx[i + 1, j + 1], vy[i + 1, j + 1]), (vx[i + 1, j], vy[i + 1, j])]
            polys.append(Polygon(ring))
    return polys, (rows, cols), (cols * cell, rows * cell)


def group_boroughs(n_boroughs, shape, rng):
    """Contiguous borough labels for a rows x cols ward lattice by randomised region growing."""
    rows, cols = shape
    n = rows * cols
    label = np.full(n, -1, dtype=np.int64)
    seeds = rng.choice(n, size=n_boroughs, replace=False)
    frontier = []
    for b, s in enumerate(seeds):
        label[s] = b
        frontier.append(s)
    while frontier:
        k = int(rng.integers(len(frontier)))
        cur = frontier[k]
        i, j = divmod(cur, cols)
        free = [(i + di) * cols + (j + dj) for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))
                if 0 <= i + di < rows and 0 <= j + dj < cols and label[(i + di) * cols + (j + dj)] < 0]
        if not free:
            frontier.pop(k)
            continue
        nxt = free[int(rng.integers(len(free)))]
        label[nxt] = label[cur]
        frontier.append(nxt)
    return label


def _random_point_in(poly, rng, tries=256):
    x0, y0, x1, y1 = poly.bounds
    xs = rng.uniform(x0, x1, tries)
    ys = rng.uniform(y0, y1, tries)
    inside = np.flatnonzero(shapely.contains_xy(poly, xs, ys))
    if len(inside) == 0:
        c = poly.representative_point()
        return c.x, c.y
    return xs[inside[0]], ys[inside[0]]


def place_sites(cfg, wards, rng):
    """One site per ward, the rest spread over randomly chosen wards."""
    n = cfg.n_sites
    order = list(range(len(wards)))
    extra = rng.integers(0, len(wards), n - len(wards)).tolist()
    owners = order + extra
    sep = cfg.min_site_spacing_m
    centres = []
    cellmap = {}

    def too_close(x, y):
        ci, cj = int(x // sep), int(y // sep)
        for a in range(ci - 1, ci + 2):
            for b in range(cj - 1, cj + 2):
                for (px, py) in cellmap.get((a, b), ()):
                    if (px - x) ** 2 + (py - y) ** 2 < sep * sep:
                        return True
        return False

    small = rng.random(n) < cfg.small_site_fraction
    polys = []
    for k, w in enumerate(owners):
        poly = wards[w]
        for _ in range(200):
            x, y = _random_point_in(poly, rng, tries=64)
            if not too_close(x, y):
                break
        cellmap.setdefault((int(x // sep), int(y // sep)), []).append((x, y))
        centres.append((x, y))
        if small[k]:
            w_, h_ = rng.uniform(6.0, 14.0, 2)
        else:
            w_, h_ = rng.uniform(40.0, 160.0, 2)
        rect = box(x - w_ / 2, y - h_ / 2, x + w_ / 2, y + h_ / 2)
        polys.append(rotate(rect, float(rng.uniform(0, 180)), origin=(x, y)))
    return polys, np.asarray(centres), np.asarray(owners)


def _centre_weighted_points(n, extent, spread, rng):
    w, h = extent
    pts = []
    while len(pts) < n:
        x = rng.normal(w / 2, spread * w, 4 * n)
        y = rng.normal(h / 2, spread * h, 4 * n)
        ok = (x >= 0) & (x <= w) & (y >= 0) & (y <= h)
        pts.extend(zip(x[ok].tolist(), y[ok].tolist()))
    return [Point(p) for p in pts[:n]]


def _main_road_candidates(n, extent, rng):
    w, h = extent
    frame = box(0, 0, w, h)
    lines = []
    for k in range(n):
        tilt = math.radians(rng.uniform(-12, 12))
        if k % 2 == 0:
            y = float(np.clip(rng.normal(h / 2, 0.3 * h), 0, h))
            dy = math.tan(tilt) * w / 2
            seg = LineString([(-w, y - 3 * dy), (2 * w, y + 3 * dy)])
        else:
            x = float(np.clip(rng.normal(w / 2, 0.3 * w), 0, w))
            dx = math.tan(tilt) * h / 2
            seg = LineString([(x - 3 * dx, -h), (x + 3 * dx, 2 * h)])
        clipped = seg.intersection(frame)
        if clipped.is_empty or clipped.geom_type != "LineString":
            clipped = LineString([(0, h / 2), (w, h / 2)]) if k % 2 == 0 else LineString([(w / 2, 0), (w / 2, h)])
        lines.append(clipped)
    return lines


def calibrate_prefix(candidates, sites, target_km):
    """Smallest prefix of `candidates` whose mean nearest distance is closest to target."""
    polys = np.asarray(sites, dtype=object)

    def mean_dist(k):
        return float(np.mean(FeatureLayer(candidates[:k]).min_distances(polys)))

    lo, hi = 1, len(candidates)
    if mean_dist(lo) <= target_km:
        return lo
    if mean_dist(hi) >= target_km:
        return hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if mean_dist(mid) > target_km:
            lo = mid
        else:
            hi = mid
    return lo if abs(mean_dist(lo) - target_km) < abs(mean_dist(hi) - target_km) else hi


def local_streets(wards, intensity, rng):
    """Per-ward street grids; a square grid of spacing g has 2/g metres per m²."""
    out = []
    for poly, rho in zip(wards, intensity):
        if rho < 0.002:
            continue
        spacing = 2.0 / rho
        cx, cy = poly.centroid.x, poly.centroid.y
        x0, y0, x1, y1 = poly.bounds
        half = math.hypot(x1 - x0, y1 - y0)
        angle = float(rng.uniform(0, 90))
        phase = float(rng.uniform(0, spacing))
        offs = np.arange(-half + phase, half, spacing)
        raw = [LineString([(cx - half, cy + o), (cx + half, cy + o)]) for o in offs]
        raw += [LineString([(cx + o, cy - half), (cx + o, cy + half)]) for o in offs]
        raw = [rotate(g, angle, origin=(cx, cy)) for g in raw]
        for g in shapely.intersection(np.asarray(raw, dtype=object), poly):
            if g.is_empty:
                continue
            parts = g.geoms if isinstance(g, MultiLineString) else [g]
            out.extend(p for p in parts if p.geom_type == "LineString" and p.length > 0)
    return out


def _sample_ring(site, inner, outer, k, rng, site_tree, self_index, site_polys, cap=40):
    """Up to k points at distance (inner, outer] from `site`, none within 100 m of another site."""
    x0, y0, x1, y1 = site.bounds
    got = []
    for _ in range(cap):
        if len(got) >= k:
            break
        m = max(8, 4 * (k - len(got)))
        xs = rng.uniform(x0 - outer, x1 + outer, m)
        ys = rng.uniform(y0 - outer, y1 + outer, m)
        pts = shapely.points(xs, ys)
        d = shapely.distance(pts, site)
        ok = (d > inner) & (d <= outer)
        if not ok.any():
            continue
        pts = pts[ok]
        src, tgt = site_tree.query(pts, predicate="dwithin", distance=100.0)
        clash = np.zeros(len(pts), dtype=bool)
        clash[src[tgt != self_index]] = True
        for p in pts[~clash]:
            if len(got) >= k:
                break
            got.append(p)
    return got


def place_point_layer(sites, k100, k_ring, rng):
    """Top up point counts site by site so the 100 m and 400 m targets are met."""
    site_arr = np.asarray(sites, dtype=object)
    tree = STRtree(site_arr)
    placed_xy = np.zeros((0, 2))
    placed = []
    for s in rng.permutation(len(sites)):
        site = site_arr[s]
        for inner, outer, want in ((0.0, 100.0, k100[s]), (100.0, 400.0, k100[s] + k_ring[s])):
            x0, y0, x1, y1 = site.bounds
            if len(placed_xy):
                near = np.flatnonzero(
                    (placed_xy[:, 0] >= x0 - outer) & (placed_xy[:, 0] <= x1 + outer)
                    & (placed_xy[:, 1] >= y0 - outer) & (placed_xy[:, 1] <= y1 + outer)
                )
                have = int(np.count_nonzero(
                    shapely.distance(shapely.points(placed_xy[near]), site) <= outer)) if len(near) else 0
            else:
                have = 0
            need = int(want) - have
            if need <= 0:
                continue
            new = _sample_ring(site, inner, outer, need, rng, tree, s, site_arr)
            if new:
                placed.extend(new)
                placed_xy = np.vstack([placed_xy, shapely.get_coordinates(np.asarray(new, dtype=object))])
    return placed


def _count_pair_targets(n, spec100, spec400, rho, score, rng):
    z = rng.multivariate_normal([0.0, 0.0], [[1.0, rho], [rho, 1.0]], size=n)
    u = stats.norm.cdf(z)
    k100 = np.rint(truncnorm_ppf(u[:, 0], *spec100))
    k400 = np.rint(truncnorm_ppf(u[:, 1], *spec400))
    order = np.argsort(k400 + 1e-3 * k100, kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[np.argsort(score, kind="stable")] = np.arange(n)
    # pairs keep their joint draw; the 400 m count follows the site's score
    return k100[order][ranks], k400[order][ranks]


def calibrated_point_layer(sites, spec100, spec400, rho, score, rng, passes=4):
    """Place points, rescaling the ring targets until the mean 400 m count is near its target."""
    n = len(sites)
    k100, k400 = _count_pair_targets(n, spec100, spec400, rho, score, rng)
    ring = np.maximum(k400 - k100, 0.0)
    state = rng.bit_generator.state
    factor = 1.0
    target = spec400[0]
    pts = []
    for _ in range(passes):
        rng.bit_generator.state = state
        pts = place_point_layer(sites, k100, np.rint(ring * factor), rng)
        realized = float(np.mean(FeatureLayer(pts).counts_within(sites, 400.0))) if pts else 0.0
        base = float(np.mean(k100))
        if abs(realized - target) <= 0.02 * target or realized <= base:
            break
        factor *= max(target - base, 0.1) / (realized - base)
    return pts


# ---------------------------------------------------------------------------
# the city


@dataclass
class City:
    config: SynthConfig
    extent: tuple
    ward_ids: list
    ward_polygons: list
    ward_borough: list
    ward_attributes: dict
    borough_ids: list
    borough_attributes: dict
    inner_boroughs: list
    site_ids: list
    site_polygons: list
    site_properties: list
    layers: dict
    graph: AdjacencyGraph
    covariates: dict
    dataset: ModelDataset
    truth: ParameterState
    eta: np.ndarray
    latent: np.ndarray
    concentration: np.ndarray
    grid: ConcentrationGrid

    @property
    def exceedance_proportion(self):
        return float(np.mean(self.dataset.y))


def _innerness(points, extent, spread, rng):
    w, h = extent
    c = np.array([w / 2, h / 2])
    d = np.hypot(*(np.asarray(points) - c).T) / math.hypot(w / 2, h / 2)
    return -d + spread * rng.standard_normal(len(d))


def concentration_from_latent(z, threshold, lo, hi, per_logit):
    """Monotone map of the latent logistic score onto (lo, hi), equal to threshold at 0."""
    z = np.asarray(z, dtype=float)
    up = (hi - threshold) * np.tanh(per_logit * z / (hi - threshold))
    down = (threshold - lo) * np.tanh(per_logit * z / (threshold - lo))
    return threshold + np.where(z > 0, up, down)


def calibrate_intercept(rest, noise, target, steps=100):
    """Bisection for the intercept giving the target share of positive latent scores."""
    S = len(rest)
    want = int(round(target * S))
    lo, hi = -1e3, 1e3
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        count = int(np.count_nonzero(mid + rest + noise > 0))
        if count == want:
            return mid
        if count < want:
            lo = mid
        else:
            hi = mid
    raise InputError("intercept calibration did not reach the target exceedance count")


def generate_city(config=None):
    """Build a synthetic city; identical configs give bit-identical cities."""
    cfg = config or SynthConfig()
    root = np.random.default_rng(cfg.seed)
    streams = root.spawn(12)
    (r_wards, r_boro, r_attr, r_sites, r_ug, r_ferry, r_main,
     r_streets, r_bus, r_lights, r_truth, r_misc) = streams

    wards, shape, extent = build_wards(cfg, r_wards)
    W = len(wards)
    ward_ids = [_ward_id(k, W) for k in range(W)]
    blabel = group_boroughs(cfg.n_boroughs, shape, r_boro)
    borough_ids = [_borough_id(k, cfg.n_boroughs) for k in range(cfg.n_boroughs)]
    ward_borough = [borough_ids[b] for b in blabel]
    graph = build_adjacency(list(zip(ward_ids, wards)))

    ward_xy = np.array([[p.centroid.x, p.centroid.y] for p in wards])
    b_xy = np.array([ward_xy[blabel == b].mean(axis=0) for b in range(cfg.n_boroughs)])
    m = cfg.marginals
    # every attribute follows the centre-periphery gradient through its own
    # noisy score, which keeps pairwise correlations moderate
    sp = cfg.gradient_noise

    def ward_score():
        return _innerness(ward_xy, extent, sp, r_attr)

    def borough_score():
        return _innerness(b_xy, extent, sp, r_attr)

    ward_attr = {
        "vehicle_speed": rank_assign(sample_marginal(m["vehicle_speed"], W, r_attr), -ward_score()),
        "terraced_pct": sample_marginal(m["terraced_pct"], W, r_attr),
        "ward_green_space_ha": rank_assign(sample_marginal(m["ward_green_space_ha"], W, r_attr), -ward_score()),
    }
    borough_attr = {
        "bus_fuel": rank_assign(sample_marginal(m["bus_fuel"], cfg.n_boroughs, r_attr), borough_score()),
        "landuse_green_pct": rank_assign(sample_marginal(m["landuse_green_pct"], cfg.n_boroughs, r_attr), -borough_score()),
        "lone_parents_pct": rank_assign(sample_marginal(m["lone_parents_pct"], cfg.n_boroughs, r_attr), borough_score()),
    }
    n_inner = max(1, cfg.n_boroughs // 3)
    dist_b = np.hypot(*(b_xy - np.array(extent) / 2).T)
    inner_boroughs = sorted(borough_ids[k] for k in np.argsort(dist_b, kind="stable")[:n_inner])

    site_polys, centres, owners = place_sites(cfg, wards, r_sites)
    S = len(site_polys)
    site_ids = [_site_id(k, S) for k in range(S)]
    green = rank_assign(sample_marginal(m["school_green_space"], S, r_misc),
                        -_innerness(centres, extent, sp, r_misc))
    site_props = [{"site_id": sid, "green_space": float(g)} for sid, g in zip(site_ids, green)]

    ug_layer = _prefix_layer(r_ug, 600, extent, 0.22, site_polys, m["dist_underground_km"][0], points=True)
    ferry_layer = _prefix_layer(r_ferry, 300, extent, 0.3, site_polys, m["dist_ferry_km"][0], points=True)
    main_layer = _prefix_layer(r_main, 400, extent, None, site_polys, m["dist_main_road_km"][0], points=False)

    street_rho = rank_assign(
        np.clip(sample_marginal(m["road_intensity_400m"], W, r_streets), 0.0, None), ward_score())
    streets = local_streets(wards, street_rho, r_streets)

    bus = calibrated_point_layer(site_polys, m["bus_stops_100m"], m["bus_stops_400m"],
                                 cfg.bus_stop_copula_rho, _innerness(centres, extent, sp, r_bus), r_bus)
    lights = calibrated_point_layer(site_polys, m["traffic_lights_100m"], m["traffic_lights_400m"],
                                    cfg.light_copula_rho, _innerness(centres, extent, sp, r_lights), r_lights)

    layers = {
        "bus_stops": bus,
        "traffic_lights": lights,
        "main_roads": main_layer,
        "roads": list(main_layer) + streets,
        "ferry_stations": ferry_layer,
        "underground_stations": ug_layer,
    }
    indexed = {k: FeatureLayer(v, k) for k, v in layers.items()}
    site_specs = [s for s in FEATURE_SPECS if s.name in SITE_COVARIATES or s.name == "bus_stops_400m"]
    sites_in = list(zip(site_ids, site_polys, site_props))
    values = extract_covariates(sites_in, indexed, site_specs)
    covariates = {s.name: values[:, j] for j, s in enumerate(site_specs)}

    x_names = [n for n in SITE_COVARIATES if n in cfg.coefficients]
    z_names = [n for n in WARD_COVARIATES if n in cfg.coefficients]
    t_names = [n for n in BOROUGH_COVARIATES if n in cfg.coefficients]
    b_index = {b: k for k, b in enumerate(borough_ids)}
    data = ModelDataset.build(
        y=np.zeros(S),
        X=np.column_stack([covariates[n] for n in x_names]) if x_names else np.zeros((S, 0)),
        Z=np.column_stack([ward_attr[n] for n in z_names]) if z_names else np.zeros((W, 0)),
        T=np.column_stack([borough_attr[n] for n in t_names]) if t_names else np.zeros((cfg.n_boroughs, 0)),
        ward_of_site=owners,
        borough_of_ward=[b_index[b] for b in ward_borough],
        x_names=x_names,
        z_names=z_names,
        t_names=t_names,
        site_ids=site_ids,
        ward_ids=ward_ids,
        borough_ids=borough_ids,
    )

    beta = np.array([cfg.coefficients[n] for n in x_names])
    gamma = np.array([cfg.coefficients[n] for n in z_names])
    theta = np.array([cfg.coefficients[n] for n in t_names])
    U = IcarSampler(graph).draw(cfg.tau_U, r_truth)
    V = r_truth.normal(0.0, 1.0 / math.sqrt(cfg.tau_V), W)
    e = r_truth.normal(0.0, 1.0 / math.sqrt(cfg.tau_s), S) if cfg.site_effects else np.zeros(S)
    noise = r_truth.logistic(0.0, 1.0, S)
    truth = ParameterState(0.0, beta, gamma, theta, U, V, e, cfg.tau_U, cfg.tau_V,
                           cfg.tau_s if cfg.site_effects else PriorSpec().prior_mean("tau_s"))
    rest = linear_predictor(truth, data)
    truth.alpha = calibrate_intercept(rest, noise, cfg.target_exceedance)
    eta = rest + truth.alpha
    latent = eta + noise
    lo, hi = cfg.concentration_range
    conc = concentration_from_latent(latent, cfg.threshold, lo, hi, cfg.concentration_per_logit)
    y = (latent > 0).astype(float)
    # keep dichotomisation unambiguous at the threshold
    conc = np.where(np.abs(conc - cfg.threshold) < 1e-9,
                    cfg.threshold + np.where(y > 0, 1e-6, -1e-6), conc)
    data = data.with_outcome(y)
    grid = build_grid(site_polys, conc)

    return City(
        config=cfg,
        extent=extent,
        ward_ids=ward_ids,
        ward_polygons=wards,
        ward_borough=ward_borough,
        ward_attributes=ward_attr,
        borough_ids=borough_ids,
        borough_attributes=borough_attr,
        inner_boroughs=inner_boroughs,
        site_ids=site_ids,
        site_polygons=site_polys,
        site_properties=site_props,
        layers=layers,
        graph=graph,
        covariates=covariates,
        dataset=data,
        truth=truth,
        eta=eta,
        latent=latent,
        concentration=conc,
        grid=grid,
    )


def _prefix_layer(rng, n, extent, spread, sites, target_km, points):
    cands = (_centre_weighted_points(n, extent, spread, rng) if points
             else _main_road_candidates(n, extent, rng))
    k = calibrate_prefix(cands, sites, target_km)
    return cands[:k]


def build_grid(site_polys, conc, spacing=20.0, reach=30.0):
    """Lattice points within `reach` of each site, valued at that site's concentration."""
    keys = {}
    for poly, c in zip(site_polys, conc):
        x0, y0, x1, y1 = poly.bounds
        ix = np.arange(math.floor((x0 - reach) / spacing), math.ceil((x1 + reach) / spacing) + 1)
        iy = np.arange(math.floor((y0 - reach) / spacing), math.ceil((y1 + reach) / spacing) + 1)
        gx, gy = np.meshgrid(ix, iy)
        gx, gy = gx.ravel(), gy.ravel()
        d = shapely.distance(shapely.points(gx * spacing, gy * spacing), poly)
        for a, b in zip(gx[d <= reach].tolist(), gy[d <= reach].tolist()):
            keys.setdefault((a, b), float(c))
    items = sorted(keys.items())
    xy = np.array([[a * spacing, b * spacing] for (a, b), _ in items], dtype=float)
    vals = np.array([v for _, v in items], dtype=float)
    return ConcentrationGrid(xy, vals, spacing)


# ---------------------------------------------------------------------------
# files


def _candidate_order(cfg):
    # true covariates first, then a correlated candidate the screen should drop
    names = [n for n in SITE_COVARIATES + WARD_COVARIATES + BOROUGH_COVARIATES if n in cfg.coefficients]
    return names + ["bus_stops_400m"]


def default_run_config(city, directory=None):
    """Key-value run configuration matching the files written by write_city."""
    cfg = city.config
    lines = [
        "# synthetic city run configuration",
        "sites = sites.geojson",
        "wards = wards.geojson",
        "boroughs = boroughs.csv",
        "grid = grid.csv",
    ]
    lines += [f"layer.{k} = {v}" for k, v in LAYER_FILES.items()]
    lines += [f"feature.{s.name} = {s.to_text()}" for s in FEATURE_SPECS]
    lines += [
        f"ward_attributes = {', '.join(WARD_ATTRIBUTES)}",
        f"borough_attributes = {', '.join(BOROUGH_ATTRIBUTES)}",
        f"covariates = {', '.join(_candidate_order(cfg))}",
        f"threshold = {cfg.threshold:g}",
        "thresholds = 40, 35",
        f"seed = {cfg.seed}",
    ]
    return "\n".join(lines) + "\n"


def write_city(city, directory):
    """Write layers, tables, grid, ground truth and a ready-to-run config."""
    from .layers import write_geojson, write_grid, write_table

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_geojson(list(zip(city.site_polygons, city.site_properties)), d / "sites.geojson")
    wfeats = []
    for k, (wid, poly) in enumerate(zip(city.ward_ids, city.ward_polygons)):
        props = {"ward_id": wid, "borough_id": city.ward_borough[k]}
        props.update({n: float(v[k]) for n, v in city.ward_attributes.items()})
        wfeats.append((poly, props))
    write_geojson(wfeats, d / "wards.geojson")
    rows = []
    for k, bid in enumerate(city.borough_ids):
        row = {"borough_id": bid, "inner": int(bid in city.inner_boroughs)}
        row.update({n: float(v[k]) for n, v in city.borough_attributes.items()})
        rows.append(row)
    write_table(rows, ["borough_id", "inner", *city.borough_attributes], d / "boroughs.csv")
    for name, fname in LAYER_FILES.items():
        write_geojson([(g, {}) for g in city.layers[name]], d / fname)
    write_grid(city.grid, d / "grid.csv")
    t = city.truth
    data = city.dataset
    truth = {
        "alpha": t.alpha,
        "coefficients": dict(zip(data.coef_names, map(float, np.concatenate([t.beta, t.gamma, t.theta])))),
        "tau_U": t.tau_U,
        "tau_V": t.tau_V,
        "tau_s": t.tau_s,
        "exceedance_proportion": city.exceedance_proportion,
        "inner_boroughs": city.inner_boroughs,
        "config": city.config.to_dict(),
    }
    (d / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True))
    (d / "run.cfg").write_text(default_run_config(city, d))
    return d
