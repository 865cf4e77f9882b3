"""Posterior summaries: coefficient tables, odds ratios and exceedance maps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateOutcomeError, InputError
from .mcmc import gelman_rubin, run_chains

HIGH_RISK_CUTOFF = 0.75


@dataclass(frozen=True)
class PosteriorSummaryRow:
    name: str
    mean: float
    sd: float
    q025: float
    q975: float
    rhat: float = math.nan


def _pooled(chains, name=None):
    if not chains:
        raise InputError("no chains to summarise")
    if name is None:
        draws = np.concatenate([c.samples for c in chains], axis=0)
    else:
        draws = np.concatenate([c.column(name) for c in chains])
    if draws.shape[0] == 0:
        raise InputError("chains contain no kept draws")
    return draws


def summarize_draws(draws, name="", rhat=math.nan):
    x = np.asarray(draws, dtype=float)
    if x.size == 0:
        raise InputError(f"no draws for {name!r}")
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    lo, hi = np.quantile(x, [0.025, 0.975], method="linear")
    return PosteriorSummaryRow(name, float(x.mean()), sd, float(lo), float(hi), float(rhat))


def summarize_parameters(chains):
    """Mean, SD, 2.5%/97.5% quantiles and R-hat for every traced parameter."""
    draws = _pooled(chains)
    names = chains[0].names
    rhat = np.full(len(names), math.nan)
    if len(chains) >= 2 and min(c.n_kept for c in chains) >= 10:
        n = min(c.n_kept for c in chains)
        res = gelman_rubin(np.stack([c.samples[:n] for c in chains]))
        rhat = res.rhat
    return [summarize_draws(draws[:, j], n, rhat[j]) for j, n in enumerate(names)]


@dataclass(frozen=True)
class OddsRatio:
    mean: float
    q025: float
    q975: float
    exp_of_mean: float

    @property
    def percent_change(self):
        return 100.0 * (self.mean - 1.0)


def odds_ratio_summary(draws):
    """Exponentiate each draw, then summarise.

    Interval bounds equal exp of the coefficient quantiles because exp is
    monotone; the mean does not commute, so exp(mean) is reported as well.
    """
    x = np.asarray(draws, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InputError("coefficient draws must be finite")
    lo, hi = np.quantile(x, [0.025, 0.975], method="linear")
    return OddsRatio(
        mean=float(np.mean(np.exp(x))),
        q025=math.exp(lo),
        q975=math.exp(hi),
        exp_of_mean=float(np.exp(np.mean(x))),
    )


def percent_change_in_odds(coefficient):
    """Percentage change in odds per unit covariate increase."""
    return 100.0 * (math.exp(coefficient) - 1.0)


def fitted_probabilities(chains):
    """Per-site posterior mean of expit(eta), pooled over chains by draw count."""
    total = None
    weight = 0
    for c in chains:
        if c.site_prob_mean is None:
            raise InputError(f"chain {c.chain} has no per-site probability accumulator")
        n = c.n_kept
        part = np.asarray(c.site_prob_mean, dtype=float) * n
        total = part if total is None else total + part
        weight += n
    if total is None or weight == 0:
        raise InputError("no kept draws to average")
    return total / weight


def ward_mean_probability(site_prob, ward_of_site, n_wards):
    """Unweighted mean over each ward's sites; NaN marks a ward without sites."""
    site_prob = np.asarray(site_prob, dtype=float)
    counts = np.bincount(ward_of_site, minlength=n_wards)
    sums = np.bincount(ward_of_site, weights=site_prob, minlength=n_wards)
    out = np.full(n_wards, np.nan)
    has = counts > 0
    out[has] = sums[has] / counts[has]
    return out


@dataclass(frozen=True)
class BoroughRank:
    borough_id: str
    mean: float
    q025: float
    q975: float
    rank: int


def borough_ranking(borough_draws, borough_ids):
    """Rank boroughs by posterior mean of their draw-level mean probability.

    Sorted descending with ties broken by borough id; boroughs without
    sites (all-NaN draws) are listed last.
    """
    d = np.asarray(borough_draws, dtype=float)
    rows = []
    for j, bid in enumerate(borough_ids):
        col = d[:, j]
        if np.all(np.isnan(col)):
            rows.append((bid, math.nan, math.nan, math.nan))
            continue
        lo, hi = np.quantile(col, [0.025, 0.975], method="linear")
        rows.append((bid, float(col.mean()), float(lo), float(hi)))
    rows.sort(key=lambda r: (math.isnan(r[1]), -r[1] if not math.isnan(r[1]) else 0.0, r[0]))
    return [BoroughRank(bid, m, lo, hi, k + 1) for k, (bid, m, lo, hi) in enumerate(rows)]


@dataclass
class ExceedanceReport:
    threshold: float
    site_ids: tuple
    ward_ids: tuple
    site_prob: np.ndarray
    ward_prob: np.ndarray
    ward_of_site: np.ndarray
    boroughs: list
    cutoff: float = HIGH_RISK_CUTOFF

    def high_risk_wards(self):
        return [w for w, p in zip(self.ward_ids, self.ward_prob) if p > self.cutoff]

    def affected_sites(self):
        """Sites located in wards whose mean probability exceeds the cutoff."""
        hot = np.where(np.isnan(self.ward_prob), False, self.ward_prob > self.cutoff)
        return int(np.count_nonzero(hot[self.ward_of_site]))


def exceedance_report(chains, data, threshold, cutoff=HIGH_RISK_CUTOFF):
    site_prob = fitted_probabilities(chains)
    ward_prob = ward_mean_probability(site_prob, data.ward_of_site, data.n_wards)
    draws = np.concatenate([c.borough_prob_draws for c in chains], axis=0)
    return ExceedanceReport(
        threshold=float(threshold),
        site_ids=tuple(data.site_ids),
        ward_ids=tuple(data.ward_ids),
        site_prob=site_prob,
        ward_prob=ward_prob,
        ward_of_site=np.asarray(data.ward_of_site),
        boroughs=borough_ranking(draws, data.borough_ids),
        cutoff=cutoff,
    )


def check_outcome(y, threshold=None):
    y = np.asarray(y)
    at = "" if threshold is None else f" at threshold {threshold:g}"
    if y.size == 0 or np.all(y == 0):
        raise DegenerateOutcomeError(f"no site exceeds{at}; outcome has no variance")
    if np.all(y == 1):
        raise DegenerateOutcomeError(f"every site exceeds{at}; outcome has no variance")


@dataclass
class SensitivityResult:
    reports: dict = field(default_factory=dict)
    exceeding: dict = field(default_factory=dict)
    affected: dict = field(default_factory=dict)
    chains: dict = field(default_factory=dict)


def threshold_sensitivity(build_dataset, thresholds, graph, prior, config,
                          cutoff=HIGH_RISK_CUTOFF):
    """Refit at each threshold and compare the resulting exceedance reports.

    `build_dataset(threshold)` must return the ModelDataset whose outcome is
    dichotomised at that threshold.
    """
    result = SensitivityResult()
    datasets = {}
    for thr in thresholds:
        if not thr > 0:
            raise InputError(f"threshold must be positive, got {thr!r}")
        data = build_dataset(thr)
        check_outcome(data.y, thr)
        datasets[thr] = data
    for thr, data in datasets.items():
        chains = run_chains(data, prior, graph, config)
        report = exceedance_report(chains, data, thr, cutoff)
        result.reports[thr] = report
        result.exceeding[thr] = int(np.sum(data.y))
        result.affected[thr] = report.affected_sites()
        result.chains[thr] = chains
    return result


# ---------------------------------------------------------------------------
# writers


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def write_parameters(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "mean", "sd", "q2.5", "q97.5", "rhat"])
        for r in rows:
            w.writerow([r.name, _fmt(r.mean), _fmt(r.sd), _fmt(r.q025), _fmt(r.q975), _fmt(r.rhat)])


def write_odds_ratios(chains, names, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "or_mean", "or_q2.5", "or_q97.5", "exp_mean_coef", "percent_change"])
        for n in names:
            o = odds_ratio_summary(_pooled(chains, n))
            w.writerow([n, _fmt(o.mean), _fmt(o.q025), _fmt(o.q975), _fmt(o.exp_of_mean),
                        _fmt(o.percent_change)])


def write_ward_probabilities(report, path, ward_geometries=None, geojson_path=None):
    counts = np.bincount(report.ward_of_site, minlength=len(report.ward_ids))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ward_id", "n_sites", "mean_probability", "high_risk"])
        for k, wid in enumerate(report.ward_ids):
            p = report.ward_prob[k]
            flag = "" if math.isnan(p) else int(p > report.cutoff)
            w.writerow([wid, int(counts[k]), _fmt(p), flag])
    if ward_geometries is not None and geojson_path is not None:
        from shapely.geometry import mapping

        feats = []
        for k, wid in enumerate(report.ward_ids):
            p = report.ward_prob[k]
            feats.append({
                "type": "Feature",
                "properties": {
                    "ward_id": wid,
                    "mean_probability": None if math.isnan(p) else float(p),
                    "threshold": report.threshold,
                },
                "geometry": mapping(ward_geometries[wid]),
            })
        Path(geojson_path).write_text(json.dumps({"type": "FeatureCollection", "features": feats}))


def write_site_probabilities(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "ward_id", "mean_probability"])
        for s, sid in enumerate(report.site_ids):
            w.writerow([sid, report.ward_ids[report.ward_of_site[s]], _fmt(report.site_prob[s])])


def write_borough_ranking(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "borough_id", "mean_probability", "q2.5", "q97.5"])
        for r in report.boroughs:
            w.writerow([r.rank, r.borough_id, _fmt(r.mean), _fmt(r.q025), _fmt(r.q975)])


def write_sensitivity(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "exceeding_sites", "high_risk_wards", "affected_sites", "cutoff"])
        for thr, report in result.reports.items():
            w.writerow([f"{thr:g}", result.exceeding[thr], len(report.high_risk_wards()),
                        result.affected[thr], f"{report.cutoff:g}"])
