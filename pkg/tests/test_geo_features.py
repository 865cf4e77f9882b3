import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.affinity import rotate
from shapely.geometry import LineString, MultiPolygon, Point, Polygon, box

from oracles import clipped_segment_length
from spatial_exceedance.errors import (
    EmptyFeatureError,
    GeometryError,
    InputError,
    UnassignedSiteError,
    UncoveredSiteError,
)
from spatial_exceedance.geo_features import (
    ConcentrationGrid,
    FeatureLayer,
    FeatureSpec,
    RegionIndex,
    aggregate_grid_over_polygon,
    assign_containing_region,
    buffer_region,
    clipped_length,
    count_within_buffer,
    dichotomize,
    dilation_area,
    extract_covariates,
    line_intensity_within_buffer,
    min_distance,
    validate_polygon,
)

SQUARE = box(0, 0, 10, 10)


# --- min_distance ---------------------------------------------------------


def test_distance_square_to_vertical_line():
    assert min_distance(SQUARE, [LineString([(20, -50), (20, 50)])]) == pytest.approx(0.010, abs=1e-15)


def test_distance_point_inside_is_zero():
    assert min_distance(SQUARE, [Point(5, 5)]) == 0.0


def test_distance_empty_collection_raises():
    with pytest.raises(EmptyFeatureError):
        min_distance(SQUARE, [])
    with pytest.raises(EmptyFeatureError):
        FeatureLayer([]).min_distances([SQUARE])


def test_distance_crossing_line_is_zero():
    assert min_distance(SQUARE, [LineString([(-5, 5), (15, 5)])]) == 0.0


# --- buffers ----------------------------------------------------------------


def test_buffer_area_matches_dilation_formula():
    expected = 100 + 4 * 10 * 100 + math.pi * 100**2
    assert dilation_area(SQUARE, 100) == pytest.approx(expected, rel=1e-15)
    assert expected == pytest.approx(35516, abs=1)
    # the materialised polygon is a close chordal approximation
    assert buffer_region(SQUARE, 100).area == pytest.approx(expected, rel=1e-3)


def test_buffer_contains_site_and_is_larger():
    b = buffer_region(SQUARE, 5)
    assert b.contains(SQUARE)
    assert b.area > SQUARE.area


@pytest.mark.parametrize("r", [0, -1, float("nan")])
def test_nonpositive_radius_rejected(r):
    with pytest.raises(InputError):
        buffer_region(SQUARE, r)
    with pytest.raises(InputError):
        count_within_buffer(SQUARE, [Point(0, 0)], r)


def test_nonconvex_dilation_area_close_to_fine_buffer():
    ell = Polygon([(0, 0), (40, 0), (40, 10), (10, 10), (10, 40), (0, 40)])
    fine = ell.buffer(100, quad_segs=2048).area
    assert dilation_area(ell, 100) == pytest.approx(fine, rel=1e-7)


def test_degenerate_polygon_rejected_at_validation():
    with pytest.raises(GeometryError):
        validate_polygon(Polygon([(0, 0), (1, 0), (2, 0)]))
    with pytest.raises(GeometryError):
        validate_polygon(Polygon([(0, 0), (2, 2), (2, 0), (0, 2)]))


# --- counts -------------------------------------------------------------------


def test_point_at_exact_radius_is_counted():
    assert count_within_buffer(SQUARE, [Point(110, 5)], 100) == 1
    assert count_within_buffer(SQUARE, [Point(110.000001, 5)], 100) == 0
    assert FeatureLayer([Point(110, 5)]).count_within(SQUARE, 100) == 1


def test_empty_points_give_zero():
    assert count_within_buffer(SQUARE, [], 100) == 0
    assert FeatureLayer([]).count_within(SQUARE, 100) == 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-500, 500), st.floats(-500, 500)), max_size=30),
       st.floats(1, 300), st.floats(0, 200))
def test_count_monotone_in_radius(pts, r, extra):
    points = [Point(p) for p in pts]
    layer = FeatureLayer(points)
    assert layer.count_within(SQUARE, r) <= layer.count_within(SQUARE, r + extra)


# --- intensities ------------------------------------------------------------------


def test_no_lines_in_buffer_give_zero():
    far = LineString([(1000, 1000), (2000, 1000)])
    assert line_intensity_within_buffer(SQUARE, [far], 100) == 0.0
    assert line_intensity_within_buffer(SQUARE, [], 100) == 0.0


def test_single_chord_is_length_over_area():
    # horizontal line through the middle of the square: clipped length is 10 + 2*100
    chord = LineString([(-1000, 5), (1000, 5)])
    area = 100 + 4000 + math.pi * 1e4
    assert line_intensity_within_buffer(SQUARE, [chord], 100) == pytest.approx(210 / area, rel=1e-14)


def test_clipped_length_through_rounded_corner():
    # y = -50 line below the square: within 100 m for x in [-sqrt(7500), 10 + sqrt(7500)]
    line = LineString([(-500, -50), (500, -50)])
    expected = 10 + 2 * math.sqrt(100**2 - 50**2)
    assert clipped_length(SQUARE, [line], 100) == pytest.approx(expected, rel=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.floats(-300, 300), st.floats(-300, 300), st.floats(-300, 300), st.floats(-300, 300),
       st.floats(1, 200), st.floats(0, 200))
def test_intensity_numerator_monotone(x0, y0, x1, y1, r, extra):
    line = LineString([(x0, y0), (x1, y1)])
    assert clipped_length(SQUARE, [line], r) <= clipped_length(SQUARE, [line], r + extra) + 1e-9


def test_nonconvex_site_clipped_length_matches_oracle():
    ell = Polygon([(0, 0), (40, 0), (40, 10), (10, 10), (10, 40), (0, 40)])
    coords = list(ell.exterior.coords)
    rng = np.random.default_rng(3)
    for _ in range(10):
        a, b = rng.uniform(-150, 200, size=(2, 2))
        got = clipped_length(ell, [LineString([a, b])], 60)
        want = clipped_segment_length(a, b, coords, 60)
        assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


# --- grid aggregation -------------------------------------------------------------------


def grid(points, values):
    return ConcentrationGrid(np.asarray(points, dtype=float), np.asarray(values, dtype=float), 20.0)


def test_grid_mean_of_interior_points():
    g = grid([(2, 2), (8, 8), (50, 50)], [10, 20, 99])
    assert aggregate_grid_over_polygon(SQUARE, g) == 15.0


def test_grid_boundary_point_counts_as_covered():
    g = grid([(10, 5), (50, 50)], [12, 99])
    assert aggregate_grid_over_polygon(SQUARE, g) == 12.0


def test_grid_fallback_within_20m():
    g = grid([(25, 5), (100, 100)], [30, 99])
    assert aggregate_grid_over_polygon(SQUARE, g) == 30.0


def test_grid_uncovered_site_names_site():
    g = grid([(100, 100)], [30])
    with pytest.raises(UncoveredSiteError) as exc:
        aggregate_grid_over_polygon(SQUARE, g, "S42")
    assert "S42" in str(exc.value)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(-3, 3), st.integers(-3, 3), st.floats(1, 100)),
                min_size=1, max_size=40, unique_by=lambda t: (t[0], t[1])))
def test_grid_mean_within_contributing_range(cells):
    pts = [(5 + 6 * i, 5 + 6 * j) for i, j, _ in cells]
    vals = [v for _, _, v in cells]
    g = grid(pts, vals)
    try:
        m = aggregate_grid_over_polygon(SQUARE, g)
    except UncoveredSiteError:
        return
    assert min(vals) - 1e-12 <= m <= max(vals) + 1e-12


def test_grid_invariants():
    with pytest.raises(InputError):
        grid([(0, 0)], [0.0])
    with pytest.raises(InputError):
        grid([(0, 0), (0, 0)], [1.0, 2.0])
    with pytest.raises(InputError):
        grid([(0, 0)], [float("inf")])


# --- dichotomisation and assignment -------------------------------------------------------


def test_dichotomize_cases():
    assert dichotomize(41.0, 40) is True
    assert dichotomize(40.0, 40) is False
    assert dichotomize(23.79, 40) is False
    with pytest.raises(InputError):
        dichotomize(float("nan"), 40)
    with pytest.raises(InputError):
        dichotomize(30.0, 0)


@settings(max_examples=100)
@given(st.floats(0.1, 100), st.floats(0.1, 100), st.floats(0.1, 100))
def test_dichotomize_threshold_monotone(v, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    if dichotomize(v, hi):
        assert dichotomize(v, lo)


def test_region_assignment_and_tie_break():
    a = box(0, 0, 10, 10)
    b = box(10, 0, 20, 10)
    regions = [("B", b), ("A", a)]
    assert assign_containing_region(box(2, 2, 4, 4), regions) == "A"
    straddle = box(9, 4, 11, 6)  # centroid (10, 5) on the shared edge
    assert assign_containing_region(straddle, regions) == "A"
    assert RegionIndex(regions).assign(straddle) == "A"
    with pytest.raises(UnassignedSiteError):
        assign_containing_region(box(30, 30, 31, 31), regions, "S9")
    with pytest.raises(UnassignedSiteError):
        RegionIndex(regions).assign(box(30, 30, 31, 31), "S9")


# --- batch extraction -----------------------------------------------------------------------


def test_extract_covariates_matches_single_site_functions():
    rng = np.random.default_rng(5)
    sites = []
    for k in range(20):
        x, y = rng.uniform(0, 2000, 2)
        poly = rotate(box(x, y, x + 60, y + 40), float(rng.uniform(0, 90)))
        sites.append((f"S{k}", poly, {"green": float(k)}))
    pts = [Point(p) for p in rng.uniform(0, 2000, (300, 2))]
    lines = [LineString(rng.uniform(0, 2000, (3, 2))) for _ in range(30)]
    layers = {"pts": FeatureLayer(pts), "lines": FeatureLayer(lines)}
    specs = [
        FeatureSpec("n100", "count", "pts", 100),
        FeatureSpec("d", "distance", "lines"),
        FeatureSpec("i400", "intensity", "lines", 400),
        FeatureSpec("g", "property", "green"),
    ]
    out = extract_covariates(sites, layers, specs)
    for k, (_, poly, props) in enumerate(sites):
        assert out[k, 0] == count_within_buffer(poly, pts, 100)
        assert out[k, 1] == pytest.approx(min_distance(poly, lines), rel=1e-12)
        assert out[k, 2] == pytest.approx(line_intensity_within_buffer(poly, lines, 400), rel=1e-12)
        assert out[k, 3] == props["green"]
    # pure: same inputs, bit-identical output
    assert np.array_equal(out, extract_covariates(sites, layers, specs))


def test_feature_spec_parsing():
    spec = FeatureSpec.parse("bus", "count bus_stops 100")
    assert (spec.kind, spec.source, spec.radius) == ("count", "bus_stops", 100.0)
    assert FeatureSpec.parse("bus", spec.to_text()) == spec
    with pytest.raises(InputError):
        FeatureSpec.parse("x", "count bus_stops")
    with pytest.raises(InputError):
        FeatureSpec.parse("x", "volume bus 100")


def test_multipolygon_site_distance():
    mp = MultiPolygon([box(0, 0, 10, 10), box(100, 0, 110, 10)])
    assert min_distance(mp, [Point(60, 5)]) == pytest.approx(0.040)
