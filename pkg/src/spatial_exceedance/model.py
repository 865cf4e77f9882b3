"""Hierarchical spatial logit: data containers, priors and exact log densities.

For site ``s`` in ward ``w`` and borough ``b`` the linear predictor is::

    eta_s = alpha + X_s beta + Z_w gamma + T_b theta + U_w + V_w + e_s

with ``y_s ~ Bernoulli(expit(eta_s))``.  ``U`` carries an intrinsic CAR prior
on the ward graph, ``V`` and ``e`` are exchangeable normal effects, and all
``tau_*`` quantities are precisions.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .adjacency import connected_components
from .errors import InputError

CONSTRAINT_TOL = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorSpec:
    """Prior hyperparameters; Gamma priors are (shape, rate)."""

    coef_var: float = 100.0
    tau_s: tuple = (1.0, 0.001)
    tau_V: tuple = (0.1, 0.1)
    tau_U: tuple = (0.5, 0.005)
    site_effects: bool = True

    def __post_init__(self):
        if not self.coef_var > 0:
            raise InputError("coefficient prior variance must be positive")
        for name in ("tau_s", "tau_V", "tau_U"):
            a, b = getattr(self, name)
            if not (a > 0 and b > 0):
                raise InputError(f"{name} prior hyperparameters must be positive")

    def gamma(self, which):
        if which not in ("tau_s", "tau_V", "tau_U"):
            raise InputError(f"unknown precision {which!r}")
        return getattr(self, which)

    def prior_mean(self, which):
        a, b = self.gamma(which)
        return a / b


def center_covariates(matrix):
    """Subtract column means; returns (centred matrix, means).

    A constant column becomes all zeros and triggers a warning because its
    coefficient is then unidentifiable.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2:
        raise InputError("covariate matrix must be two-dimensional")
    if not np.all(np.isfinite(m)):
        raise InputError("covariate matrix contains non-finite values")
    if m.shape[0] == 0:
        return m.copy(), np.zeros(m.shape[1])
    means = m.mean(axis=0)
    centred = m - means
    # a second pass removes the rounding residue of the first
    centred -= centred.mean(axis=0)
    const = np.all(m == m[0], axis=0)
    if const.any():
        centred[:, const] = 0.0
        warnings.warn(
            f"constant covariate column(s) {np.flatnonzero(const).tolist()} centred to zero; "
            "coefficients are unidentifiable",
            stacklevel=2,
        )
    return centred, means


def _as_matrix(a, rows):
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return np.zeros((rows, 0))
    if a.ndim == 1:
        a = a[:, None]
    return a


@dataclass(frozen=True)
class ModelDataset:
    """Outcome vector and centred design matrices at site, ward and borough level."""

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    T: np.ndarray
    ward_of_site: np.ndarray
    borough_of_ward: np.ndarray
    x_names: tuple = ()
    z_names: tuple = ()
    t_names: tuple = ()
    site_ids: tuple = ()
    ward_ids: tuple = ()
    borough_ids: tuple = ()
    x_means: np.ndarray = field(default_factory=lambda: np.zeros(0))
    z_means: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t_means: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        S, W, B = len(self.y), len(self.Z), len(self.T)
        if self.X.shape[0] != S or len(self.ward_of_site) != S:
            raise InputError("site-level arrays disagree in length")
        if len(self.borough_of_ward) != W:
            raise InputError("borough map must have one entry per ward")
        if S and (self.ward_of_site.min() < 0 or self.ward_of_site.max() >= W):
            raise InputError("site mapped to an unknown ward")
        if W and (self.borough_of_ward.min() < 0 or self.borough_of_ward.max() >= B):
            raise InputError("ward mapped to an unknown borough")
        if not np.all(np.isin(self.y, (0.0, 1.0))):
            raise InputError("outcome must be binary")
        for m in (self.X, self.Z, self.T):
            if not np.all(np.isfinite(m)):
                raise InputError("design matrix contains non-finite values")
        for names, m in ((self.x_names, self.X), (self.z_names, self.Z), (self.t_names, self.T)):
            if names and len(names) != m.shape[1]:
                raise InputError("covariate names do not match matrix width")

    @classmethod
    def build(
        cls,
        y,
        X,
        Z,
        T,
        ward_of_site,
        borough_of_ward,
        x_names=(),
        z_names=(),
        t_names=(),
        site_ids=(),
        ward_ids=(),
        borough_ids=(),
        center=True,
    ):
        """Assemble a dataset, centring each level's columns at their observed mean."""
        ward_of_site = np.asarray(ward_of_site, dtype=np.int64)
        borough_of_ward = np.asarray(borough_of_ward, dtype=np.int64)
        S, W = len(ward_of_site), len(borough_of_ward)
        X = _as_matrix(X, S)
        Z = _as_matrix(Z, W)
        B = int(borough_of_ward.max()) + 1 if W else 0
        T = _as_matrix(T, len(borough_ids) or B)
        if center:
            X, xm = center_covariates(X)
            Z, zm = center_covariates(Z)
            T, tm = center_covariates(T)
        else:
            xm, zm, tm = (np.zeros(m.shape[1]) for m in (X, Z, T))
        return cls(
            y=np.asarray(y, dtype=float),
            X=X,
            Z=Z,
            T=T,
            ward_of_site=ward_of_site,
            borough_of_ward=borough_of_ward,
            x_names=tuple(x_names),
            z_names=tuple(z_names),
            t_names=tuple(t_names),
            site_ids=tuple(site_ids),
            ward_ids=tuple(ward_ids),
            borough_ids=tuple(borough_ids),
            x_means=xm,
            z_means=zm,
            t_means=tm,
        )

    @property
    def n_sites(self):
        return len(self.y)

    @property
    def n_wards(self):
        return len(self.Z)

    @property
    def n_boroughs(self):
        return len(self.T)

    @property
    def dims(self):
        return self.X.shape[1], self.Z.shape[1], self.T.shape[1]

    @property
    def borough_of_site(self):
        return self.borough_of_ward[self.ward_of_site]

    @property
    def coef_names(self):
        return self.x_names + self.z_names + self.t_names

    def with_outcome(self, y):
        return replace(self, y=np.asarray(y, dtype=float))

    def subset_covariates(self, keep):
        """Dataset restricted to the named covariates (order preserved)."""
        keep = set(keep)
        xi = [i for i, n in enumerate(self.x_names) if n in keep]
        zi = [i for i, n in enumerate(self.z_names) if n in keep]
        ti = [i for i, n in enumerate(self.t_names) if n in keep]
        return replace(
            self,
            X=self.X[:, xi],
            Z=self.Z[:, zi],
            T=self.T[:, ti],
            x_names=tuple(self.x_names[i] for i in xi),
            z_names=tuple(self.z_names[i] for i in zi),
            t_names=tuple(self.t_names[i] for i in ti),
            x_means=self.x_means[xi],
            z_means=self.z_means[zi],
            t_means=self.t_means[ti],
        )

    def uncentred_intercept(self, alpha, beta, gamma, theta):
        """Intercept on the original covariate scale."""
        return (
            alpha
            - self.x_means @ np.asarray(beta)
            - self.z_means @ np.asarray(gamma)
            - self.t_means @ np.asarray(theta)
        )


@dataclass
class ParameterState:
    alpha: float
    beta: np.ndarray
    gamma: np.ndarray
    theta: np.ndarray
    U: np.ndarray
    V: np.ndarray
    e: np.ndarray
    tau_U: float
    tau_V: float
    tau_s: float

    @classmethod
    def initial(cls, data, prior):
        """Coefficients and effects at zero, precisions at their prior means."""
        p, q, r = data.dims
        W, S = data.n_wards, data.n_sites
        return cls(
            alpha=0.0,
            beta=np.zeros(p),
            gamma=np.zeros(q),
            theta=np.zeros(r),
            U=np.zeros(W),
            V=np.zeros(W),
            e=np.zeros(S),
            tau_U=prior.prior_mean("tau_U"),
            tau_V=prior.prior_mean("tau_V"),
            tau_s=prior.prior_mean("tau_s"),
        )

    def copy(self):
        return ParameterState(
            float(self.alpha),
            np.array(self.beta, dtype=float),
            np.array(self.gamma, dtype=float),
            np.array(self.theta, dtype=float),
            np.array(self.U, dtype=float),
            np.array(self.V, dtype=float),
            np.array(self.e, dtype=float),
            float(self.tau_U),
            float(self.tau_V),
            float(self.tau_s),
        )

    @property
    def coefficients(self):
        return np.concatenate([[self.alpha], self.beta, self.gamma, self.theta])


# ---------------------------------------------------------------------------
# densities


def _check_dims(state, data):
    p, q, r = data.dims
    if (len(state.beta), len(state.gamma), len(state.theta)) != (p, q, r):
        raise InputError("coefficient vector lengths do not match the design matrices")
    if len(state.U) != data.n_wards or len(state.V) != data.n_wards:
        raise InputError("ward effect vectors do not match the ward count")
    if len(state.e) != data.n_sites:
        raise InputError("site effect vector does not match the site count")


def linear_predictor(state, data):
    _check_dims(state, data)
    w = data.ward_of_site
    b = data.borough_of_ward[w]
    ward_part = data.Z @ state.gamma + state.U + state.V
    return (
        state.alpha
        + data.X @ state.beta
        + ward_part[w]
        + (data.T @ state.theta)[b]
        + state.e
    )


def bernoulli_logit_loglik(y, eta):
    """Per-site y*eta - log(1 + exp(eta)), stable for large |eta|."""
    return y * eta - np.logaddexp(0.0, eta)


def log_likelihood(state, data):
    eta = linear_predictor(state, data)
    return float(np.sum(bernoulli_logit_loglik(data.y, eta)))


def component_sizes(graph):
    _, labels = connected_components(graph)
    return labels, np.bincount(labels)


def icar_quadratic(U, graph):
    """Sum over neighbouring pairs of (U_i - U_j)^2."""
    e = graph.edge_array()
    if len(e) == 0:
        return 0.0
    diff = U[e[:, 0]] - U[e[:, 1]]
    return float(diff @ diff)


def check_sum_to_zero(U, graph, tol=CONSTRAINT_TOL):
    labels, sizes = component_sizes(graph)
    means = np.bincount(labels, weights=U, minlength=len(sizes)) / sizes
    worst = float(np.max(np.abs(means))) if len(means) else 0.0
    if worst > tol:
        raise InputError(f"structured effects violate the sum-to-zero constraint (|mean| = {worst:.3g})")


def icar_log_density(U, tau_U, graph):
    """Improper ICAR log density up to a constant; rank is W minus the component count."""
    U = np.asarray(U, dtype=float)
    if len(U) != graph.n_regions:
        raise InputError("U length differs from the region count")
    if not tau_U > 0:
        raise InputError("tau_U must be positive")
    check_sum_to_zero(U, graph)
    rank = graph.n_regions - graph.n_components
    return 0.5 * rank * math.log(tau_U) - 0.5 * tau_U * icar_quadratic(U, graph)


def normal_logpdf(x, var):
    x = np.asarray(x, dtype=float)
    return float(np.sum(-0.5 * (LOG_2PI + math.log(var)) - 0.5 * x * x / var))


def gamma_logpdf(x, shape, rate):
    if not x > 0:
        return -math.inf
    return shape * math.log(rate) - gammaln(shape) + (shape - 1.0) * math.log(x) - rate * x


def log_prior(state, prior, graph):
    for name in ("tau_U", "tau_V", "tau_s"):
        if not getattr(state, name) > 0:
            raise InputError(f"{name} must be positive")
    lp = normal_logpdf(state.coefficients, prior.coef_var)
    lp += normal_logpdf(state.V, 1.0 / state.tau_V)
    lp += icar_log_density(state.U, state.tau_U, graph)
    lp += gamma_logpdf(state.tau_U, *prior.tau_U)
    lp += gamma_logpdf(state.tau_V, *prior.tau_V)
    if prior.site_effects:
        lp += normal_logpdf(state.e, 1.0 / state.tau_s)
        lp += gamma_logpdf(state.tau_s, *prior.tau_s)
    return lp


def log_posterior(state, data, prior, graph):
    return log_likelihood(state, data) + log_prior(state, prior, graph)


# ---------------------------------------------------------------------------
# screening


def correlation_screen(matrix, names=None, threshold=0.60):
    """Greedy correlation filter in column priority order.

    A column is kept unless its absolute Pearson correlation with an already
    kept column exceeds `threshold`.  Zero-variance columns are dropped with a
    warning.  Returns the kept column names (or indices when `names` is None).
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[1] < 2:
        raise InputError("correlation screening needs at least two columns")
    labels = list(names) if names is not None else list(range(m.shape[1]))
    sd = m.std(axis=0)
    kept = []
    for j in range(m.shape[1]):
        if sd[j] == 0:
            warnings.warn(f"covariate {labels[j]!r} has zero variance; excluded", stacklevel=2)
            continue
        if any(abs(np.corrcoef(m[:, j], m[:, k])[0, 1]) > threshold for k in kept):
            continue
        kept.append(j)
    return [labels[j] for j in kept]


# ---------------------------------------------------------------------------
# serialisation


def _write_matrix(path, ids, names, matrix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *names])
        for rid, row in zip(ids, matrix):
            w.writerow([rid, *(repr(float(v)) for v in row)])


def _read_matrix(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = tuple(rows[0][1:])
    ids = tuple(r[0] for r in rows[1:])
    mat = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=float)
    return ids, names, mat.reshape(len(ids), len(names))


def write_dataset(data, directory):
    """Write X/Z/T design matrices, centring means, outcome and the index map."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_matrix(d / "design_site.csv", data.site_ids, data.x_names, data.X)
    _write_matrix(d / "design_ward.csv", data.ward_ids, data.z_names, data.Z)
    _write_matrix(d / "design_borough.csv", data.borough_ids, data.t_names, data.T)
    means = list(zip(data.x_names, data.x_means)) + list(zip(data.z_names, data.z_means))
    means += list(zip(data.t_names, data.t_means))
    with open(d / "centring.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["covariate", "mean"])
        for n, v in means:
            w.writerow([n, repr(float(v))])
    with open(d / "index_map.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "ward_id", "borough_id", "y"])
        b = data.borough_of_site
        for s, sid in enumerate(data.site_ids):
            w.writerow([sid, data.ward_ids[data.ward_of_site[s]], data.borough_ids[b[s]], int(data.y[s])])
    with open(d / "ward_map.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ward_id", "borough_id"])
        for k, wid in enumerate(data.ward_ids):
            w.writerow([wid, data.borough_ids[data.borough_of_ward[k]]])


def read_dataset(directory):
    d = Path(directory)
    site_ids, x_names, X = _read_matrix(d / "design_site.csv")
    ward_ids, z_names, Z = _read_matrix(d / "design_ward.csv")
    borough_ids, t_names, T = _read_matrix(d / "design_borough.csv")
    with open(d / "centring.csv", newline="") as fh:
        means = {r["covariate"]: float(r["mean"]) for r in csv.DictReader(fh)}
    widx = {w: k for k, w in enumerate(ward_ids)}
    bidx = {b: k for k, b in enumerate(borough_ids)}
    with open(d / "index_map.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    with open(d / "ward_map.csv", newline="") as fh:
        wrows = {r["ward_id"]: r["borough_id"] for r in csv.DictReader(fh)}
    try:
        ward_of_site = [widx[r["ward_id"]] for r in rows]
        borough_of_ward = [bidx[wrows[w]] for w in ward_ids]
    except KeyError as exc:
        raise InputError(f"index map references unknown id {exc}") from None
    return ModelDataset(
        y=np.array([float(r["y"]) for r in rows]),
        X=X,
        Z=Z,
        T=T,
        ward_of_site=np.asarray(ward_of_site, dtype=np.int64),
        borough_of_ward=np.asarray(borough_of_ward, dtype=np.int64),
        x_names=x_names,
        z_names=z_names,
        t_names=t_names,
        site_ids=site_ids,
        ward_ids=ward_ids,
        borough_ids=borough_ids,
        x_means=np.array([means[n] for n in x_names]),
        z_means=np.array([means[n] for n in z_names]),
        t_means=np.array([means[n] for n in t_names]),
    )
