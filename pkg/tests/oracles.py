"""Brute-force reference implementations used as test oracles.

Nothing here imports the package's geometry or density code: distances are
plain vector algebra, and clipped lengths are found by scanning the distance
profile along each segment and refining every crossing with brentq.
"""

import math

import numpy as np
from scipy.optimize import brentq


def ring_edges(coords):
    c = np.asarray(coords, dtype=float)
    if np.allclose(c[0], c[-1]):
        c = c[:-1]
    return [(c[i], c[(i + 1) % len(c)]) for i in range(len(c))]


def point_segment_distance(p, a, b):
    p, a, b = (np.asarray(v, dtype=float) for v in (p, a, b))
    d = b - a
    dd = float(d @ d)
    t = 0.0 if dd == 0 else min(1.0, max(0.0, float((p - a) @ d) / dd))
    q = a + t * d
    return math.hypot(p[0] - q[0], p[1] - q[1])


def point_in_ring(p, coords):
    """Even-odd ray casting."""
    x, y = p
    inside = False
    for a, b in ring_edges(coords):
        if (a[1] > y) != (b[1] > y):
            xc = a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
            if x < xc:
                inside = not inside
    return inside


def point_polygon_distance(p, coords):
    if point_in_ring(p, coords):
        return 0.0
    return min(point_segment_distance(p, a, b) for a, b in ring_edges(coords))


def points_polygon_distance(points, coords):
    """Vectorised form of point_polygon_distance for an (n, 2) array."""
    p = np.asarray(points, dtype=float)
    best = np.full(len(p), np.inf)
    inside = np.zeros(len(p), dtype=bool)
    for a, b in ring_edges(coords):
        d = b - a
        t = np.clip(((p - a) @ d) / (d @ d), 0.0, 1.0)
        q = a + t[:, None] * d
        best = np.minimum(best, np.hypot(p[:, 0] - q[:, 0], p[:, 1] - q[:, 1]))
        crosses = (a[1] > p[:, 1]) != (b[1] > p[:, 1])
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = a[0] + (p[:, 1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
        inside ^= crosses & (p[:, 0] < xc)
    return np.where(inside, 0.0, best)


def segments_intersect(p1, p2, q1, q2):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return (d1 * d2 <= 0) and (d3 * d4 <= 0)


def segment_segment_distance(p1, p2, q1, q2):
    if segments_intersect(p1, p2, q1, q2):
        return 0.0
    return min(
        point_segment_distance(p1, q1, q2),
        point_segment_distance(p2, q1, q2),
        point_segment_distance(q1, p1, p2),
        point_segment_distance(q2, p1, p2),
    )


def polyline_polygon_distance(line, coords):
    line = [np.asarray(v, dtype=float) for v in line]
    if any(point_in_ring(v, coords) for v in line):
        return 0.0
    best = math.inf
    for i in range(len(line) - 1):
        for a, b in ring_edges(coords):
            best = min(best, segment_segment_distance(line[i], line[i + 1], a, b))
    return best


def clipped_segment_length(a, b, coords, radius, samples=4000):
    """Length of segment a-b within `radius` of the polygon, by root refinement."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)

    def f(t):
        return point_polygon_distance(a + t * (b - a), coords) - radius

    ts = np.linspace(0.0, 1.0, samples + 1)
    vals = points_polygon_distance(a + ts[:, None] * (b - a), coords) - radius
    inside = vals <= 0
    total = 0.0
    start = 0.0 if inside[0] else None
    for k in range(1, len(ts)):
        if inside[k] and not inside[k - 1]:
            start = brentq(f, ts[k - 1], ts[k], xtol=1e-15, rtol=1e-15)
        elif not inside[k] and inside[k - 1]:
            end = brentq(f, ts[k - 1], ts[k], xtol=1e-15, rtol=1e-15)
            total += end - start
            start = None
    if start is not None:
        total += 1.0 - start
    return total * math.hypot(*(b - a))


def steiner_area(coords, radius):
    """Area of the dilation of a convex polygon: A + P r + pi r^2."""
    c = np.asarray(coords, dtype=float)
    if np.allclose(c[0], c[-1]):
        c = c[:-1]
    x, y = c[:, 0], c[:, 1]
    area = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    perim = sum(math.hypot(*(b - a)) for a, b in ring_edges(coords))
    return area + perim * radius + math.pi * radius**2


# ---------------------------------------------------------------------------
# model densities, one scalar term at a time


def naive_log_posterior(y, X, Z, T, ward_of_site, borough_of_ward, edges, n_components,
                        alpha, beta, gamma, theta, U, V, e, tau_U, tau_V, tau_s,
                        coef_var, prior_U, prior_V, prior_s):
    S = len(y)
    W = len(V)
    ll = 0.0
    for s in range(S):
        w = ward_of_site[s]
        b = borough_of_ward[w]
        eta = alpha
        for j in range(len(beta)):
            eta += X[s][j] * beta[j]
        for j in range(len(gamma)):
            eta += Z[w][j] * gamma[j]
        for j in range(len(theta)):
            eta += T[b][j] * theta[j]
        eta += U[w] + V[w] + e[s]
        p = 1.0 / (1.0 + math.exp(-eta))
        ll += y[s] * math.log(p) + (1 - y[s]) * math.log(1.0 - p)

    def norm(x, var):
        return -0.5 * math.log(2 * math.pi * var) - x * x / (2 * var)

    def gam(x, a, r):
        return a * math.log(r) - math.lgamma(a) + (a - 1) * math.log(x) - r * x

    lp = norm(alpha, coef_var)
    for c in list(beta) + list(gamma) + list(theta):
        lp += norm(c, coef_var)
    for v in V:
        lp += norm(v, 1.0 / tau_V)
    for x in e:
        lp += norm(x, 1.0 / tau_s)
    quad = sum((U[i] - U[j]) ** 2 for i, j in edges)
    lp += 0.5 * (W - n_components) * math.log(tau_U) - 0.5 * tau_U * quad
    lp += gam(tau_U, *prior_U) + gam(tau_V, *prior_V) + gam(tau_s, *prior_s)
    return ll + lp


def union_find_components(n, edges):
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    return len({find(i) for i in range(n)})
