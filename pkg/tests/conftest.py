import sys
from pathlib import Path

import numpy as np
import pytest
import shapely
from shapely.geometry import LineString, Point, box

sys.path.insert(0, str(Path(__file__).parent))

from spatial_exceedance.adjacency import AdjacencyGraph  # noqa: E402
from spatial_exceedance.model import ModelDataset  # noqa: E402
from spatial_exceedance.synth import SynthConfig, generate_city  # noqa: E402

SMALL_CITY = dict(n_wards=48, n_boroughs=6, n_sites=240, seed=11)

# (number, title, outcome, detail) for each acceptance check that ran
ACCEPTANCE = []


def random_scene(rng):
    """A convex site polygon plus up to 50 points and 50 polylines nearby."""
    pts = rng.uniform(-60, 60, size=(rng.integers(3, 9), 2))
    site = shapely.convex_hull(shapely.multipoints(pts))
    if site.geom_type != "Polygon" or site.area < 10:
        site = box(-20, -15, 25, 30)
    n_pts = int(rng.integers(0, 51))
    points = [Point(xy) for xy in rng.uniform(-600, 600, size=(n_pts, 2))]
    lines = []
    for _ in range(int(rng.integers(1, 51))):
        k = int(rng.integers(2, 5))
        lines.append(LineString(rng.uniform(-700, 700, size=(k, 2))))
    return site, points, lines


def path_graph(n):
    return AdjacencyGraph.from_edges([f"W{i}" for i in range(n)], [(i, i + 1) for i in range(n - 1)])


def empty_dataset(n_wards, sites_per_ward=1, ward_ids=None):
    """Covariate-free dataset, used for prior-only runs."""
    S = n_wards * sites_per_ward
    return ModelDataset.build(
        y=np.zeros(S),
        X=np.zeros((S, 0)),
        Z=np.zeros((n_wards, 0)),
        T=np.zeros((1, 0)),
        ward_of_site=np.repeat(np.arange(n_wards), sites_per_ward),
        borough_of_ward=np.zeros(n_wards, dtype=int),
        ward_ids=ward_ids or [f"W{i}" for i in range(n_wards)],
    )


@pytest.fixture(scope="session")
def small_city():
    return generate_city(SynthConfig(**SMALL_CITY))


@pytest.fixture(scope="session")
def default_city():
    return generate_city(SynthConfig())


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        ACCEPTANCE.append((marker.args[0], marker.args[1], rep.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, detail in sorted(ACCEPTANCE):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {number} [{verdict}] {title}"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
