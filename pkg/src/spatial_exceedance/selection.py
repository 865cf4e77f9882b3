"""Backward stepwise covariate elimination driven by posterior credible intervals."""

from __future__ import annotations

import logging

import numpy as np

from .mcmc import run_chains

log = logging.getLogger(__name__)


def zero_tail_probability(draws):
    """Two-sided posterior tail mass beyond zero: 2 * min(P(b > 0), P(b < 0))."""
    x = np.asarray(draws, dtype=float)
    above = np.mean(x > 0)
    below = np.mean(x < 0)
    return float(2.0 * min(above, below))


def interval_excludes_zero(draws, level=0.95):
    lo, hi = np.quantile(draws, [(1 - level) / 2, (1 + level) / 2], method="linear")
    return lo > 0 or hi < 0


def backward_stepwise(data, prior, graph, config, level=0.95):
    """Drop covariates whose credible interval covers zero, one at a time.

    Each round refits the model, removes the covariate with the largest
    two-sided zero-tail probability among those whose interval straddles
    zero, and stops once every remaining interval excludes zero.  Returns
    the surviving covariate names (possibly empty) and the per-round log.
    """
    current = list(data.coef_names)
    history = []
    while current:
        sub = data.subset_covariates(current)
        chains = run_chains(sub, prior, graph, config)
        straddling = {}
        for name in current:
            draws = np.concatenate([c.column(name) for c in chains])
            if not interval_excludes_zero(draws, level):
                straddling[name] = zero_tail_probability(draws)
        if not straddling:
            break
        worst = max(current, key=lambda n: (straddling.get(n, -1.0), current.index(n)))
        history.append((worst, straddling[worst]))
        log.info("backward step: dropping %s (zero-tail probability %.3f)", worst, straddling[worst])
        current.remove(worst)
    return current, history
