"""Metropolis-within-Gibbs sampler for the spatial logit model.

Coefficient blocks use adaptive Gaussian random-walk proposals, ward and site
effects use single-element random walks with per-element scales, and the
three precisions are drawn from their conjugate Gamma full conditionals.
Proposal scales adapt during burn-in only; kept draws come from a fixed
kernel.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import InputError
from .model import (
    ParameterState,
    PriorSpec,
    component_sizes,
    icar_quadratic,
    log_posterior,
)

PRECISIONS = ("tau_U", "tau_V", "tau_s")


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 2
    iterations: int = 100_000
    burn_in: int = 30_000
    thinning: int = 1
    seed: int = 20160101
    adapt_window: int = 200
    target_scalar: float = 0.44
    target_block: float = 0.234
    retain_latent: bool = False
    likelihood: bool = True
    fixed_precisions: dict = field(default_factory=dict)
    initial_precisions: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if self.chains < 1:
            raise InputError("need at least one chain")
        if not 0 <= self.burn_in < self.iterations:
            raise InputError("burn-in must be non-negative and below the iteration count")
        if self.thinning < 1:
            raise InputError("thinning must be at least 1")
        if self.adapt_window < 1:
            raise InputError("adaptation window must be positive")
        for name, value in {**self.fixed_precisions, **self.initial_precisions}.items():
            if name not in PRECISIONS:
                raise InputError(f"unknown precision {name!r}")
            if not value > 0:
                raise InputError(f"{name} must be positive")

    @property
    def n_kept(self):
        return (self.iterations - self.burn_in) // self.thinning

    def chain_seed(self, index):
        return self.seed + index


@dataclass
class ChainOutput:
    """Kept draws and online summaries of one chain."""

    chain: int
    seed: int
    names: tuple
    samples: np.ndarray
    acceptance: dict
    latent_mean: dict
    latent_var: dict
    site_prob_mean: np.ndarray
    borough_prob_draws: np.ndarray
    max_constraint_violation: float
    wall_time: float = 0.0
    latent_traces: dict | None = None

    def column(self, name):
        return self.samples[:, self.names.index(name)]

    @property
    def n_kept(self):
        return self.samples.shape[0]


def parameter_names(data, prior, config=None):
    names = ["alpha", *data.x_names, *data.z_names, *data.t_names]
    p, q, r = data.dims
    if len(set(names)) != len(names) or len(names) != 1 + p + q + r:
        names = ["alpha"] + [f"beta[{i}]" for i in range(p)]
        names += [f"gamma[{i}]" for i in range(q)] + [f"theta[{i}]" for i in range(r)]
    names += ["tau_U", "tau_V"]
    if prior.site_effects:
        names.append("tau_s")
    return tuple(names)


def fixed_effect_names(names):
    return tuple(n for n in names if n not in PRECISIONS)


# ---------------------------------------------------------------------------
# single updates (reference implementations on ParameterState)


def constrain_sum_to_zero(U, graph):
    """Subtract each connected component's mean from its members."""
    labels, sizes = component_sizes(graph)
    U = np.asarray(U, dtype=float)
    means = np.bincount(labels, weights=U, minlength=len(sizes)) / sizes
    return U - means[labels]


def _safe_log_posterior(state, data, prior, graph):
    for name in PRECISIONS:
        if not getattr(state, name) > 0:
            return -math.inf
    return log_posterior(state, data, prior, graph)


def metropolis_step(log_density, x, scale, rng, current=None):
    """Gaussian random-walk Metropolis step for a generic log density.

    Returns (new x, new log density, accepted).
    """
    if not scale > 0:
        raise InputError("proposal scale must be positive")
    x = np.asarray(x, dtype=float)
    lp = log_density(x) if current is None else current
    if not np.isfinite(lp):
        raise InputError("log density is not finite at the current point")
    prop = x + scale * rng.standard_normal(x.shape)
    lp_new = log_density(prop)
    if np.isfinite(lp_new) and math.log(rng.random()) < lp_new - lp:
        return prop, lp_new, True
    return x, lp, False


def propose(state, block, delta, graph):
    """Apply a random-walk increment to one block of a copied state.

    ``block`` is "alpha", "beta", "gamma", "theta", a precision name, or a
    tuple ("U" | "V" | "e", index).  A structured-effect move is projected
    onto the sum-to-zero subspace and paired with the intercept shift that
    leaves other wards' linear predictors unchanged.
    """
    new = state.copy()
    if isinstance(block, tuple):
        kind, i = block
        delta = float(np.asarray(delta).ravel()[0])
        if kind == "U":
            labels, sizes = component_sizes(graph)
            c = labels[i]
            n = sizes[c]
            if n < 2:
                return new
            new.U[i] += delta
            new.U[labels == c] -= delta / n
            new.alpha += delta / n
        elif kind == "V":
            new.V[i] += delta
        elif kind == "e":
            new.e[i] += delta
        else:
            raise InputError(f"unknown block {block!r}")
        return new
    if block == "alpha":
        new.alpha += float(np.asarray(delta).ravel()[0])
    elif block in ("beta", "gamma", "theta"):
        cur = getattr(new, block)
        setattr(new, block, cur + np.asarray(delta, dtype=float).reshape(cur.shape))
    elif block in PRECISIONS:
        setattr(new, block, getattr(new, block) + float(np.asarray(delta).ravel()[0]))
    else:
        raise InputError(f"unknown block {block!r}")
    return new


def block_size(state, block):
    if isinstance(block, tuple) or block == "alpha" or block in PRECISIONS:
        return 1
    return len(getattr(state, block))


def metropolis_update(block, state, data, prior, graph, scale, rng):
    """One random-walk Metropolis update of `block`; returns (state, accepted)."""
    if not scale > 0:
        raise InputError("proposal scale must be positive")
    lp = _safe_log_posterior(state, data, prior, graph)
    if not np.isfinite(lp):
        raise InputError("log posterior is not finite at the current state")
    delta = scale * rng.standard_normal(block_size(state, block))
    prop = propose(state, block, delta, graph)
    lp_new = _safe_log_posterior(prop, data, prior, graph)
    if np.isfinite(lp_new) and math.log(rng.random()) < lp_new - lp:
        return prop, True
    return state, False


def precision_posterior(which, state, prior, graph):
    """Shape and rate of the conjugate Gamma full conditional."""
    a, b = prior.gamma(which)
    if which == "tau_V":
        v = np.asarray(state.V, dtype=float)
        return a + 0.5 * len(v), b + 0.5 * float(v @ v)
    if which == "tau_s":
        v = np.asarray(state.e, dtype=float)
        return a + 0.5 * len(v), b + 0.5 * float(v @ v)
    if which == "tau_U":
        rank = graph.n_regions - graph.n_components
        return a + 0.5 * rank, b + 0.5 * icar_quadratic(np.asarray(state.U, dtype=float), graph)
    raise InputError(f"unknown precision {which!r}")


def gibbs_precision_update(which, state, prior, graph, rng):
    shape, rate = precision_posterior(which, state, prior, graph)
    return float(rng.gamma(shape, 1.0 / rate))


# ---------------------------------------------------------------------------
# the chain engine


class _Compiled:
    """Flat arrays consumed by the compiled kernels."""

    def __init__(self, data, graph):
        if graph.n_regions != data.n_wards:
            raise InputError("ward graph and dataset disagree on the ward count")
        if data.ward_ids and tuple(graph.region_ids) != tuple(data.ward_ids):
            raise InputError("ward graph ids differ from dataset ward ids")
        S, W = data.n_sites, data.n_wards
        self.y = np.ascontiguousarray(data.y, dtype=float)
        self.X = np.ascontiguousarray(data.X, dtype=float)
        self.Zs = np.ascontiguousarray(data.Z[data.ward_of_site], dtype=float)
        self.Ts = np.ascontiguousarray(data.T[data.borough_of_site], dtype=float)
        self.ones = np.ones((S, 1))
        self.ward_of_site = np.ascontiguousarray(data.ward_of_site, dtype=np.int64)
        order = np.argsort(self.ward_of_site, kind="stable")
        self.site_idx = order.astype(np.int64)
        self.site_ptr = np.zeros(W + 1, dtype=np.int64)
        self.site_ptr[1:] = np.cumsum(np.bincount(self.ward_of_site, minlength=W))
        self.nb_ptr, self.nb_idx = graph.csr()
        labels, sizes = component_sizes(graph)
        self.comp = labels.astype(np.int64)
        self.comp_size = sizes.astype(np.int64)
        site_comp = self.comp[self.ward_of_site]
        corder = np.argsort(site_comp, kind="stable")
        self.csite_idx = corder.astype(np.int64)
        self.csite_ptr = np.zeros(len(sizes) + 1, dtype=np.int64)
        self.csite_ptr[1:] = np.cumsum(np.bincount(site_comp, minlength=len(sizes)))
        self.borough_of_site = np.ascontiguousarray(data.borough_of_site, dtype=np.int64)
        self.borough_size = np.bincount(self.borough_of_site, minlength=data.n_boroughs).astype(float)
        self.movable_wards = int(np.sum(self.comp_size[self.comp] >= 2))
        self.rank = W - len(sizes)


def _initial_block_cov(M, coef_var):
    # crude Fisher-information guess with p(1-p) ~ 0.1
    info = 0.1 * np.einsum("ij,ij->j", M, M) + 1.0 / coef_var
    return np.diag(1.0 / info)


class _Block:
    def __init__(self, name, M, coef, coef_var, target):
        self.name = name
        self.M = M
        self.coef = coef
        self.dim = len(coef)
        self.cov = _initial_block_cov(M, coef_var) if self.dim else np.zeros((0, 0))
        self.chol = np.linalg.cholesky(self.cov) if self.dim else self.cov
        self.log_scale = math.log(2.38 / math.sqrt(max(self.dim, 1)))
        self.target = target
        self.history = []
        self.accepted = 0
        self.attempts = 0
        self.z = np.zeros(self.dim)

    def refit(self, upto):
        draws = np.asarray(self.history[upto // 2 : upto])
        if len(draws) < 2 * self.dim + 2:
            return
        cov = np.atleast_2d(np.cov(draws, rowvar=False))
        cov = cov + 1e-10 * np.eye(self.dim) * max(1.0, float(np.trace(cov)) / self.dim)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            return
        self.cov = cov
        self.chol = chol


def run_chain(data, prior, graph, config, chain=0):
    """Run one chain; deterministic in (data, prior, graph, config, chain)."""
    started = time.perf_counter()
    seed = config.chain_seed(chain)
    rng = np.random.default_rng(seed)
    cd = _Compiled(data, graph)
    S, W, B = data.n_sites, data.n_wards, data.n_boroughs

    state = ParameterState.initial(data, prior)
    for name, value in config.initial_precisions.items():
        setattr(state, name, float(value))
    for name, value in config.fixed_precisions.items():
        setattr(state, name, float(value))
    lp0 = log_posterior(state, data, prior, graph) if config.likelihood else 0.0
    if not np.isfinite(lp0):
        raise InputError("log posterior is not finite at the initial state")

    alpha_box = np.array([state.alpha])
    beta, gamma, theta = state.beta, state.gamma, state.theta
    U, V, e = state.U, state.V, state.e
    tau = {n: float(getattr(state, n)) for n in PRECISIONS}
    eta = np.zeros(S)
    shift = np.zeros(S)
    use_lik = bool(config.likelihood)
    cv = float(prior.coef_var)

    blocks = [
        _Block("alpha", cd.ones, alpha_box, cv, config.target_scalar),
        _Block("beta", cd.X, beta, cv, config.target_block),
        _Block("gamma", cd.Zs, gamma, cv, config.target_block),
        _Block("theta", cd.Ts, theta, cv, config.target_block),
    ]
    for blk in blocks:
        if blk.dim == 1:
            blk.target = config.target_scalar

    # proposals are scaled by a rough conditional sd (prior precision plus a
    # logistic information bound), so they follow the precisions after burn-in
    ls_U = np.full(W, math.log(1.5))
    ls_V = np.full(W, math.log(1.5))
    ls_e = np.full(S, math.log(1.5))
    info_w = 0.25 * np.diff(cd.site_ptr).astype(float) if config.likelihood else np.zeros(W)
    info_s = 0.25 if config.likelihood else 0.0
    cnt_U = np.zeros(1, dtype=np.int64)
    cnt_V = np.zeros(1, dtype=np.int64)
    cnt_e = np.zeros(1, dtype=np.int64)

    names = parameter_names(data, prior)
    n_kept = config.n_kept
    samples = np.empty((n_kept, len(names)))
    borough_draws = np.empty((n_kept, B))
    prob_sum = np.zeros(S)
    borough_row = np.zeros(B)
    lat_mean = {k: np.zeros(n) for k, n in (("U", W), ("V", W), ("e", S))}
    lat_m2 = {k: np.zeros(n) for k, n in (("U", W), ("V", W), ("e", S))}
    traces = None
    if config.retain_latent:
        traces = {"U": np.empty((n_kept, W)), "V": np.empty((n_kept, W)), "e": np.empty((n_kept, S))}
    worst_constraint = 0.0
    kept = 0
    post = {"alpha": 0, "beta": 0, "gamma": 0, "theta": 0, "U": 0, "V": 0, "e": 0}
    post_attempts = 0

    for t in range(config.iterations):
        adapt = t < config.burn_in
        gain = (t + 1.0) ** -0.6
        K.compute_eta(alpha_box[0], beta, gamma, theta, U, V, e, cd.X, cd.Zs, cd.Ts,
                      cd.ward_of_site, eta)
        for blk in blocks:
            if blk.dim == 0:
                continue
            ok, prob = K.sweep_block(eta, cd.y, blk.M, blk.coef, blk.chol, blk.log_scale,
                                     cv, use_lik, rng, shift, blk.z)
            if adapt:
                blk.log_scale += gain * (prob - blk.target)
                blk.history.append(blk.coef.copy())
                if (t + 1) % config.adapt_window == 0 and t + 1 >= 2 * config.adapt_window:
                    blk.refit(t + 1)
            else:
                post[blk.name] += int(ok)
        cnt_U[0] = cnt_V[0] = cnt_e[0] = 0
        K.sweep_U(alpha_box, U, eta, cd.y, tau["tau_U"], cv, ls_U, cd.nb_ptr, cd.nb_idx,
                  cd.comp, cd.comp_size, cd.site_ptr, cd.site_idx, cd.csite_ptr,
                  cd.csite_idx, use_lik, rng, adapt, gain, config.target_scalar, cnt_U, info_w)
        K.recentre(U, cd.comp, cd.comp_size)
        K.sweep_V(V, eta, cd.y, tau["tau_V"], ls_V, cd.site_ptr, cd.site_idx, use_lik, rng,
                  adapt, gain, config.target_scalar, cnt_V, info_w)
        if prior.site_effects:
            K.sweep_e(e, eta, cd.y, tau["tau_s"], ls_e, use_lik, rng, adapt, gain,
                      config.target_scalar, cnt_e, info_s)
        if not adapt:
            post["U"] += int(cnt_U[0])
            post["V"] += int(cnt_V[0])
            post["e"] += int(cnt_e[0])
            post_attempts += 1

        if "tau_U" not in config.fixed_precisions:
            a, b = prior.tau_U
            q = K.icar_quadratic(U, cd.nb_ptr, cd.nb_idx)
            tau["tau_U"] = float(rng.gamma(a + 0.5 * cd.rank, 1.0 / (b + 0.5 * q)))
        if "tau_V" not in config.fixed_precisions:
            a, b = prior.tau_V
            tau["tau_V"] = float(rng.gamma(a + 0.5 * W, 1.0 / (b + 0.5 * float(V @ V))))
        if prior.site_effects and "tau_s" not in config.fixed_precisions:
            a, b = prior.tau_s
            tau["tau_s"] = float(rng.gamma(a + 0.5 * S, 1.0 / (b + 0.5 * float(e @ e))))

        if adapt or (t - config.burn_in + 1) % config.thinning:
            continue
        if kept >= n_kept:
            continue
        row = samples[kept]
        row[0] = alpha_box[0]
        k = 1
        for vec in (beta, gamma, theta):
            row[k : k + len(vec)] = vec
            k += len(vec)
        row[k] = tau["tau_U"]
        row[k + 1] = tau["tau_V"]
        if prior.site_effects:
            row[k + 2] = tau["tau_s"]
        K.compute_eta(alpha_box[0], beta, gamma, theta, U, V, e, cd.X, cd.Zs, cd.Ts,
                      cd.ward_of_site, eta)
        K.accumulate_probabilities(eta, cd.borough_of_site, cd.borough_size, prob_sum, borough_row)
        borough_draws[kept] = borough_row
        kept += 1
        for key, vec in (("U", U), ("V", V), ("e", e)):
            K.welford(vec, float(kept), lat_mean[key], lat_m2[key])
        if traces is not None:
            traces["U"][kept - 1] = U
            traces["V"][kept - 1] = V
            traces["e"][kept - 1] = e
        worst_constraint = max(worst_constraint, K.max_component_mean(U, cd.comp, cd.comp_size))

    n_post = max(config.iterations - config.burn_in, 1)
    acceptance = {}
    for blk in blocks:
        if blk.dim:
            acceptance[blk.name] = post[blk.name] / n_post
    if cd.movable_wards:
        acceptance["U"] = post["U"] / (cd.movable_wards * max(post_attempts, 1))
    acceptance["V"] = post["V"] / (W * max(post_attempts, 1)) if W else 0.0
    if prior.site_effects and S:
        acceptance["e"] = post["e"] / (S * max(post_attempts, 1))

    denom = max(kept - 1, 1)
    return ChainOutput(
        chain=chain,
        seed=seed,
        names=names,
        samples=samples,
        acceptance=acceptance,
        latent_mean=lat_mean,
        latent_var={k: v / denom for k, v in lat_m2.items()},
        site_prob_mean=prob_sum / max(kept, 1),
        borough_prob_draws=borough_draws,
        max_constraint_violation=worst_constraint,
        wall_time=time.perf_counter() - started,
        latent_traces=traces,
    )


def _run_chain_args(args):
    return run_chain(*args)


def run_chains(data, prior, graph, config):
    """Run ``config.chains`` independent chains, optionally in worker processes.

    Chain k uses seed ``config.seed + k``; outputs do not depend on the
    number of workers.
    """
    jobs = [(data, prior, graph, config, k) for k in range(config.chains)]
    if config.workers > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, config.chains)) as pool:
            return list(pool.map(_run_chain_args, jobs))
    return [run_chain(*job) for job in jobs]


# ---------------------------------------------------------------------------
# convergence


@dataclass(frozen=True)
class RhatResult:
    rhat: np.ndarray
    degenerate: np.ndarray

    def __iter__(self):
        return iter((self.rhat, self.degenerate))


def gelman_rubin(chains):
    """Potential scale reduction factor per parameter.

    `chains` has shape (m, n) or (m, n, k): m chains of n kept draws.
    Parameters whose pooled within-chain variance is zero are flagged as
    degenerate and reported with R-hat = inf.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim < 2:
        raise InputError("expected an array of shape (chains, draws[, parameters])")
    m, n = x.shape[:2]
    if m < 2:
        raise InputError("Gelman-Rubin needs at least two chains")
    if n < 10:
        raise InputError("Gelman-Rubin needs at least 10 kept draws per chain")
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean(axis=0)
    b = n * means.var(axis=0, ddof=1)
    degenerate = ~(w > 0)
    safe_w = np.where(degenerate, 1.0, w)
    rhat = np.sqrt(((n - 1) / n * safe_w + b / n) / safe_w)
    rhat = np.where(degenerate, np.inf, rhat)
    return RhatResult(rhat=rhat, degenerate=degenerate)


def chain_rhat(outputs):
    """R-hat per named parameter across chain outputs."""
    stack = np.stack([o.samples for o in outputs])
    res = gelman_rubin(stack)
    return {n: (float(r), bool(d)) for n, r, d in zip(outputs[0].names, res.rhat, res.degenerate)}
