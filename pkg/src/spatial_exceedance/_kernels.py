"""Compiled inner loops of the Metropolis-within-Gibbs sweep.

Every function works on a maintained linear predictor ``eta`` and returns
exact log-posterior differences, so a single-element move costs time
proportional to the number of sites it touches.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def softplus(x):
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True)
def site_loglik(y, eta):
    return y * eta - softplus(eta)


@njit(cache=True)
def compute_eta(alpha, beta, gamma, theta, U, V, e, X, Zs, Ts, ward_of_site, eta):
    S = eta.shape[0]
    for s in range(S):
        v = alpha
        for j in range(X.shape[1]):
            v += X[s, j] * beta[j]
        for j in range(Zs.shape[1]):
            v += Zs[s, j] * gamma[j]
        for j in range(Ts.shape[1]):
            v += Ts[s, j] * theta[j]
        w = ward_of_site[s]
        eta[s] = v + U[w] + V[w] + e[s]


@njit(cache=True)
def block_delta(eta, y, M, coef, delta, coef_var, use_lik, shift):
    """Log-posterior change for coef -> coef + delta on design block M.

    Writes the proposed per-site linear-predictor shift into `shift`.
    """
    d = 0.0
    if use_lik:
        for s in range(eta.shape[0]):
            v = 0.0
            for j in range(M.shape[1]):
                v += M[s, j] * delta[j]
            shift[s] = v
            d += site_loglik(y[s], eta[s] + v) - site_loglik(y[s], eta[s])
    else:
        for s in range(eta.shape[0]):
            v = 0.0
            for j in range(M.shape[1]):
                v += M[s, j] * delta[j]
            shift[s] = v
    for j in range(coef.shape[0]):
        c1 = coef[j] + delta[j]
        d -= (c1 * c1 - coef[j] * coef[j]) / (2.0 * coef_var)
    return d


@njit(cache=True)
def u_delta(i, delta, alpha, U, eta, y, tau_U, coef_var, nb_ptr, nb_idx, comp,
            comp_size, site_ptr, site_idx, csite_ptr, csite_idx, use_lik):
    """Log-posterior change for the constrained move on ward i.

    The move adds delta to U_i, subtracts delta/n from every ward of i's
    component (n = component size) and adds delta/n to the intercept, so
    only sites in ward i and sites outside the component see eta change.
    """
    c = comp[i]
    n = comp_size[c]
    share = delta / n
    d = 0.0
    if use_lik:
        for k in range(site_ptr[i], site_ptr[i + 1]):
            s = site_idx[k]
            d += site_loglik(y[s], eta[s] + delta) - site_loglik(y[s], eta[s])
        if share != 0.0:
            for c2 in range(comp_size.shape[0]):
                if c2 == c:
                    continue
                for k in range(csite_ptr[c2], csite_ptr[c2 + 1]):
                    s = csite_idx[k]
                    d += site_loglik(y[s], eta[s] + share) - site_loglik(y[s], eta[s])
    deg = nb_ptr[i + 1] - nb_ptr[i]
    nsum = 0.0
    for k in range(nb_ptr[i], nb_ptr[i + 1]):
        nsum += U[nb_idx[k]]
    d -= 0.5 * tau_U * (2.0 * delta * (deg * U[i] - nsum) + deg * delta * delta)
    a1 = alpha + share
    d -= (a1 * a1 - alpha * alpha) / (2.0 * coef_var)
    return d


@njit(cache=True)
def v_delta(i, delta, V, eta, y, tau_V, site_ptr, site_idx, use_lik):
    d = 0.0
    if use_lik:
        for k in range(site_ptr[i], site_ptr[i + 1]):
            s = site_idx[k]
            d += site_loglik(y[s], eta[s] + delta) - site_loglik(y[s], eta[s])
    v1 = V[i] + delta
    d -= 0.5 * tau_V * (v1 * v1 - V[i] * V[i])
    return d


@njit(cache=True)
def e_delta(s, delta, e, eta, y, tau_s, use_lik):
    d = 0.0
    if use_lik:
        d = site_loglik(y[s], eta[s] + delta) - site_loglik(y[s], eta[s])
    e1 = e[s] + delta
    d -= 0.5 * tau_s * (e1 * e1 - e[s] * e[s])
    return d


@njit(cache=True)
def _accept(d, rng):
    if d >= 0.0:
        return True, 1.0
    u = rng.random()
    return math.log(u) < d, math.exp(d)


@njit(cache=True)
def sweep_block(eta, y, M, coef, chol, log_scale, coef_var, use_lik, rng, shift, z):
    """One random-walk update of a coefficient block; returns (accepted, accept prob)."""
    k = coef.shape[0]
    for j in range(k):
        z[j] = rng.standard_normal()
    scale = math.exp(log_scale)
    delta = np.zeros(k)
    for a in range(k):
        v = 0.0
        for b in range(a + 1):
            v += chol[a, b] * z[b]
        delta[a] = scale * v
    d = block_delta(eta, y, M, coef, delta, coef_var, use_lik, shift)
    ok, prob = _accept(d, rng)
    if ok:
        for j in range(k):
            coef[j] += delta[j]
        for s in range(eta.shape[0]):
            eta[s] += shift[s]
    return ok, prob


@njit(cache=True)
def sweep_U(alpha_box, U, eta, y, tau_U, coef_var, log_scale, nb_ptr, nb_idx, comp,
            comp_size, site_ptr, site_idx, csite_ptr, csite_idx, use_lik, rng,
            adapt, gain, target, counts, info):
    W = U.shape[0]
    C = comp_size.shape[0]
    offset = np.zeros(C)
    accepted = 0
    for i in range(W):
        c = comp[i]
        n = comp_size[c]
        if n < 2:
            continue
        deg = nb_ptr[i + 1] - nb_ptr[i]
        sd = 1.0 / math.sqrt(tau_U * deg + info[i])
        delta = math.exp(log_scale[i]) * sd * rng.standard_normal()
        d = u_delta(i, delta, alpha_box[0], U, eta, y, tau_U, coef_var, nb_ptr,
                    nb_idx, comp, comp_size, site_ptr, site_idx, csite_ptr,
                    csite_idx, use_lik)
        ok, prob = _accept(d, rng)
        if ok:
            accepted += 1
            share = delta / n
            # raw values keep differences exact; the component shift is applied below
            U[i] += delta
            offset[c] += share
            alpha_box[0] += share
            for k in range(site_ptr[i], site_ptr[i + 1]):
                eta[site_idx[k]] += delta
            for c2 in range(C):
                if c2 == c:
                    continue
                for k in range(csite_ptr[c2], csite_ptr[c2 + 1]):
                    eta[csite_idx[k]] += share
        if adapt:
            log_scale[i] += gain * (prob - target)
    for i in range(W):
        U[i] -= offset[comp[i]]
    counts[0] += accepted
    return accepted


@njit(cache=True)
def sweep_V(V, eta, y, tau_V, log_scale, site_ptr, site_idx, use_lik, rng, adapt,
            gain, target, counts, info):
    accepted = 0
    for i in range(V.shape[0]):
        sd = 1.0 / math.sqrt(tau_V + info[i])
        delta = math.exp(log_scale[i]) * sd * rng.standard_normal()
        d = v_delta(i, delta, V, eta, y, tau_V, site_ptr, site_idx, use_lik)
        ok, prob = _accept(d, rng)
        if ok:
            accepted += 1
            V[i] += delta
            for k in range(site_ptr[i], site_ptr[i + 1]):
                eta[site_idx[k]] += delta
        if adapt:
            log_scale[i] += gain * (prob - target)
    counts[0] += accepted
    return accepted


@njit(cache=True)
def sweep_e(e, eta, y, tau_s, log_scale, use_lik, rng, adapt, gain, target, counts,
            info):
    accepted = 0
    sd = 1.0 / math.sqrt(tau_s + info)
    for s in range(e.shape[0]):
        delta = math.exp(log_scale[s]) * sd * rng.standard_normal()
        d = e_delta(s, delta, e, eta, y, tau_s, use_lik)
        ok, prob = _accept(d, rng)
        if ok:
            accepted += 1
            e[s] += delta
            eta[s] += delta
        if adapt:
            log_scale[s] += gain * (prob - target)
    counts[0] += accepted
    return accepted


@njit(cache=True)
def recentre(U, comp, comp_size):
    C = comp_size.shape[0]
    sums = np.zeros(C)
    for i in range(U.shape[0]):
        sums[comp[i]] += U[i]
    for i in range(U.shape[0]):
        U[i] -= sums[comp[i]] / comp_size[comp[i]]


@njit(cache=True)
def max_component_mean(U, comp, comp_size):
    C = comp_size.shape[0]
    sums = np.zeros(C)
    for i in range(U.shape[0]):
        sums[comp[i]] += U[i]
    worst = 0.0
    for c in range(C):
        m = abs(sums[c] / comp_size[c])
        if m > worst:
            worst = m
    return worst


@njit(cache=True)
def icar_quadratic(U, nb_ptr, nb_idx):
    q = 0.0
    for i in range(U.shape[0]):
        for k in range(nb_ptr[i], nb_ptr[i + 1]):
            j = nb_idx[k]
            if i < j:
                diff = U[i] - U[j]
                q += diff * diff
    return q


@njit(cache=True)
def accumulate_probabilities(eta, borough_of_site, borough_size, prob_sum, borough_row):
    """Add expit(eta) to the per-site running sum and fill the per-borough means."""
    for b in range(borough_row.shape[0]):
        borough_row[b] = 0.0
    for s in range(eta.shape[0]):
        x = eta[s]
        if x >= 0:
            p = 1.0 / (1.0 + math.exp(-x))
        else:
            ex = math.exp(x)
            p = ex / (1.0 + ex)
        prob_sum[s] += p
        borough_row[borough_of_site[s]] += p
    for b in range(borough_row.shape[0]):
        if borough_size[b] > 0:
            borough_row[b] /= borough_size[b]
        else:
            borough_row[b] = np.nan


@njit(cache=True)
def welford(x, count, mean, m2):
    for i in range(x.shape[0]):
        dlt = x[i] - mean[i]
        mean[i] += dlt / count
        m2[i] += dlt * (x[i] - mean[i])
