"""Ward neighbourhood graph for the intrinsic CAR prior."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import shapely
from shapely.strtree import STRtree

from .errors import InputError

# Boundaries closer than this (metres) are treated as shared.
SNAP_TOLERANCE_M = 1e-6


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected neighbour structure over regions sorted by id.

    ``neighbors[i]`` holds the sorted indices adjacent to region ``i``;
    ``labels[i]`` is its connected-component label, numbered in order of
    first appearance.
    """

    region_ids: tuple
    neighbors: tuple
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.region_ids)
        if len(set(self.region_ids)) != n:
            raise InputError("duplicate region ids in adjacency graph")
        if len(self.neighbors) != n:
            raise InputError("neighbour list count differs from region count")
        for i, nb in enumerate(self.neighbors):
            if i in nb:
                raise InputError(f"self-loop at region {self.region_ids[i]!r}")
            for j in nb:
                if not 0 <= j < n:
                    raise InputError(f"neighbour index {j} out of range")
                if i not in self.neighbors[j]:
                    raise InputError(
                        f"asymmetric adjacency between {self.region_ids[i]!r} "
                        f"and {self.region_ids[j]!r}"
                    )

    @classmethod
    def from_edges(cls, region_ids, edges):
        """Build from region ids and (i, j) index pairs; ids are sorted first."""
        ids = sorted(region_ids)
        if len(set(ids)) != len(ids):
            raise InputError("duplicate region ids")
        order = {rid: k for k, rid in enumerate(ids)}
        remap = [order[rid] for rid in region_ids]
        nbs = [set() for _ in ids]
        for i, j in edges:
            a, b = remap[i], remap[j]
            if a == b:
                raise InputError(f"self-loop at region {ids[a]!r}")
            nbs[a].add(b)
            nbs[b].add(a)
        neighbors = tuple(tuple(sorted(s)) for s in nbs)
        _, labels = _components(neighbors)
        return cls(tuple(ids), neighbors, labels)

    @property
    def n_regions(self):
        return len(self.region_ids)

    @property
    def degree(self):
        return np.array([len(nb) for nb in self.neighbors], dtype=np.int64)

    @property
    def n_components(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def edges(self):
        """Index pairs (i, j) with i < j."""
        return [(i, j) for i, nb in enumerate(self.neighbors) for j in nb if i < j]

    def edge_array(self):
        e = self.edges()
        return np.asarray(e, dtype=np.int64).reshape(-1, 2)

    def islands(self):
        return [self.region_ids[i] for i, nb in enumerate(self.neighbors) if not nb]

    def index(self, region_id):
        return self.region_ids.index(region_id)

    def laplacian(self):
        """Dense graph Laplacian D - A."""
        n = self.n_regions
        lap = np.zeros((n, n))
        for i, j in self.edges():
            lap[i, j] -= 1.0
            lap[j, i] -= 1.0
            lap[i, i] += 1.0
            lap[j, j] += 1.0
        return lap

    def csr(self):
        """(indptr, indices) arrays of the neighbour lists."""
        ptr = np.zeros(self.n_regions + 1, dtype=np.int64)
        ptr[1:] = np.cumsum(self.degree)
        idx = np.fromiter(
            (j for nb in self.neighbors for j in nb), dtype=np.int64, count=int(ptr[-1])
        )
        return ptr, idx


def _components(neighbors):
    n = len(neighbors)
    labels = np.full(n, -1, dtype=np.int64)
    count = 0
    for start in range(n):
        if labels[start] >= 0:
            continue
        labels[start] = count
        stack = [start]
        while stack:
            i = stack.pop()
            for j in neighbors[i]:
                if labels[j] < 0:
                    labels[j] = count
                    stack.append(j)
        count += 1
    return count, labels


def connected_components(graph):
    """Component count and per-region labels (first-appearance numbering)."""
    return _components(graph.neighbors)


def build_adjacency(regions):
    """Queen-contiguity graph: regions sharing at least one boundary point."""
    regions = list(regions)
    if len(regions) < 2:
        raise InputError("adjacency needs at least two regions")
    ids = [rid for rid, _ in regions]
    dup = [rid for rid, c in Counter(ids).items() if c > 1]
    if dup:
        raise InputError(f"duplicate region ids: {sorted(dup)[:5]}")
    polys = np.asarray([poly for _, poly in regions], dtype=object)
    tree = STRtree(polys)
    left, right = tree.query(polys, predicate="dwithin", distance=SNAP_TOLERANCE_M)
    keep = left < right
    left, right = left[keep], right[keep]
    # dwithin is inclusive; re-check with an explicit distance for clarity
    d = shapely.distance(polys[left], polys[right])
    ok = d <= SNAP_TOLERANCE_M
    edges = list(zip(left[ok].tolist(), right[ok].tolist()))
    return AdjacencyGraph.from_edges(ids, edges)


def describe(graph):
    """Degree histogram, islands and component count, for validation output."""
    count, _ = connected_components(graph)
    hist = Counter(graph.degree.tolist())
    return {
        "regions": graph.n_regions,
        "edges": len(graph.edges()),
        "components": count,
        "islands": graph.islands(),
        "mean_degree": float(graph.degree.mean()) if graph.n_regions else 0.0,
        "degree_histogram": dict(sorted(hist.items())),
    }


EDGE_HEADER = "region_a,region_b"


def write_edge_list(graph, path):
    """Write ``#regions`` header then one ``region_a,region_b`` line per edge."""
    lines = ["#regions " + ",".join(graph.region_ids), EDGE_HEADER]
    for i, j in graph.edges():
        lines.append(f"{graph.region_ids[i]},{graph.region_ids[j]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path):
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#regions "):
        raise InputError(f"{path}: missing '#regions' header")
    ids = [s for s in text[0][len("#regions "):].split(",") if s]
    known = {rid: k for k, rid in enumerate(ids)}
    if len(known) != len(ids):
        raise InputError(f"{path}: duplicate region ids in header")
    if len(text) < 2 or text[1].strip() != EDGE_HEADER:
        raise InputError(f"{path}: expected column header {EDGE_HEADER!r}")
    edges = set()
    for lineno, line in enumerate(text[2:], start=3):
        if not line.strip():
            continue
        parts = line.strip().split(",")
        if len(parts) != 2:
            raise InputError(f"{path}:{lineno}: expected two ids")
        a, b = parts
        for rid in (a, b):
            if rid not in known:
                raise InputError(f"{path}:{lineno}: unknown region id {rid!r}")
        if not a < b:
            raise InputError(f"{path}:{lineno}: edge must be listed as region_a < region_b")
        if (a, b) in edges:
            raise InputError(f"{path}:{lineno}: duplicate edge {a},{b}")
        edges.add((a, b))
    pairs = [(known[a], known[b]) for a, b in sorted(edges)]
    return AdjacencyGraph.from_edges(ids, pairs)
