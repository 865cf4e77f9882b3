"""File-level orchestration behind the command-line front end.

Every command writes its outputs under the configured output directory and
finishes with a manifest holding input digests, the effective configuration,
seeds and output digests, which is what ``replay`` checks against.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import __version__
from .adjacency import build_adjacency, read_edge_list, write_edge_list
from .config import RunConfig
from .errors import ConvergenceError, InputError
from .geo_features import (
    FeatureLayer,
    RegionIndex,
    SiteRecord,
    aggregate_grid_over_polygon,
    dichotomize,
    extract_covariates,
    validate_polygon,
)
from .layers import (
    LINEAR,
    POLYGONAL,
    read_covariate_table,
    read_geojson,
    read_grid,
    read_table,
    write_covariate_table,
)
from .mcmc import ChainOutput, chain_rhat, fixed_effect_names, run_chains
from .model import ModelDataset, correlation_screen, read_dataset, write_dataset
from .selection import backward_stepwise
from .summary import (
    check_outcome,
    exceedance_report,
    summarize_parameters,
    threshold_sensitivity,
    write_borough_ranking,
    write_odds_ratios,
    write_parameters,
    write_sensitivity,
    write_site_probabilities,
    write_ward_probabilities,
)

log = logging.getLogger(__name__)

RHAT_GATE = 1.1
COVARIATES_FILE = "covariates.csv"
ADJACENCY_FILE = "adjacency.csv"
FIT_DIR = "fit"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_tree(root, members=None):
    """sha256 of files under `root` keyed by relative posix path.

    `members` limits the walk to the named files or directories; manifests
    themselves are never included.
    """
    root = Path(root)
    paths = [root / m for m in members] if members is not None else [root]
    out = {}
    for base in paths:
        found = [base] if base.is_file() else sorted(base.rglob("*"))
        for p in found:
            rel = p.relative_to(root).as_posix()
            if p.is_file() and not p.name.startswith("manifest-"):
                out[rel] = sha256_file(p)
    return dict(sorted(out.items()))


def write_manifest(command, cfg_mapping, inputs, output_dir, seeds, outputs=None, extra=None):
    output_dir = Path(output_dir)
    doc = {
        "command": command,
        "version": __version__,
        "config": cfg_mapping,
        "seeds": dict(sorted(seeds.items())),
        "inputs": {str(p): sha256_file(p) for p in sorted(set(map(str, inputs)))},
        "outputs": digest_tree(output_dir, outputs),
    }
    if extra:
        doc.update(extra)
    # config keys keep their order: feature columns follow it
    path = output_dir / f"manifest-{command}.json"
    path.write_text(json.dumps(dict(sorted(doc.items())), indent=2) + "\n")
    return path


def _mcmc_seeds(cfg):
    return {"mcmc": cfg.mcmc.seed, "chains": [cfg.mcmc.chain_seed(k) for k in range(cfg.mcmc.chains)]}


# ---------------------------------------------------------------------------
# features


def _layer_inputs(cfg):
    return [cfg.layers[f.source] for f in cfg.features if f.kind != "property"]


def load_layers(cfg):
    layers = {}
    for f in cfg.features:
        if f.kind == "property" or f.source in layers:
            continue
        expect = ("Point",) if f.kind == "count" else None
        if f.kind == "intensity":
            expect = LINEAR
        items = read_geojson(cfg.layers[f.source], expect)
        layers[f.source] = FeatureLayer([g for g, _ in items], f.source)
    return layers


def read_wards(path, attributes=()):
    """Ward polygons with borough ids and numeric attributes, sorted by ward id."""
    rows = []
    seen = set()
    for k, (geom, props) in enumerate(read_geojson(path, POLYGONAL)):
        for key in ("ward_id", "borough_id"):
            if key not in props:
                raise InputError(f"{path}: ward feature {k} lacks {key!r}")
        wid = str(props["ward_id"])
        if wid in seen:
            raise InputError(f"{path}: duplicate ward id {wid!r}")
        seen.add(wid)
        validate_polygon(geom, f"ward {wid}")
        attrs = {}
        for a in attributes:
            try:
                attrs[a] = float(props[a])
            except KeyError:
                raise InputError(f"{path}: ward {wid!r} lacks attribute {a!r}") from None
            except (TypeError, ValueError):
                raise InputError(f"{path}: ward {wid!r} attribute {a!r} is not numeric") from None
        rows.append((wid, geom, str(props["borough_id"]), attrs))
    rows.sort(key=lambda r: r[0])
    return rows


def read_boroughs(path, attributes=()):
    table = read_table(path, "borough_id")
    out = {}
    for bid in sorted(table):
        row = table[bid]
        attrs = {}
        for a in attributes:
            try:
                attrs[a] = float(row[a])
            except KeyError:
                raise InputError(f"{path}: missing column {a!r}") from None
            except (TypeError, ValueError):
                raise InputError(f"{path}: borough {bid!r} attribute {a!r} is not numeric") from None
        out[bid] = attrs
    return out


def build_site_records(cfg):
    """Site records with region assignment, exposure, exceedance flag and covariates."""
    cfg.require("sites", "wards", "grid")
    for f in cfg.features:
        if f.kind != "property" and not Path(cfg.layers[f.source]).is_file():
            raise InputError(f"input file not found: {cfg.layers[f.source]}")
    raw = read_geojson(cfg.sites, POLYGONAL)
    sites = []
    seen = set()
    for k, (geom, props) in enumerate(raw):
        if "site_id" not in props:
            raise InputError(f"{cfg.sites}: site feature {k} lacks 'site_id'")
        sid = str(props["site_id"])
        if sid in seen:
            raise InputError(f"{cfg.sites}: duplicate site id {sid!r}")
        seen.add(sid)
        validate_polygon(geom, f"site {sid}")
        sites.append((sid, geom, props))
    wards = read_wards(cfg.wards)
    ward_borough = {wid: bid for wid, _, bid, _ in wards}
    index = RegionIndex([(wid, poly) for wid, poly, _, _ in wards])
    grid = read_grid(cfg.grid, cfg.grid_spacing)
    layers = load_layers(cfg)
    values = extract_covariates(sites, layers, cfg.features)
    records = []
    for k, (sid, poly, _) in enumerate(sites):
        wid = index.assign(poly, sid)
        conc = aggregate_grid_over_polygon(poly, grid, sid)
        records.append(SiteRecord(
            site_id=sid,
            polygon=poly,
            ward_id=wid,
            borough_id=ward_borough[wid],
            concentration=conc,
            exceeds=dichotomize(conc, cfg.threshold),
            covariates={f.name: float(values[k, j]) for j, f in enumerate(cfg.features)},
        ))
    return records, wards


def cmd_features(cfg):
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    records, wards = build_site_records(cfg)
    write_covariate_table(records, [f.name for f in cfg.features], out / COVARIATES_FILE)
    graph = build_adjacency([(wid, poly) for wid, poly, _, _ in wards])
    write_edge_list(graph, out / ADJACENCY_FILE)
    inputs = [cfg.sites, cfg.wards, cfg.grid, *_layer_inputs(cfg)]
    write_manifest("features", cfg.to_mapping(), inputs, out, {},
                   [COVARIATES_FILE, ADJACENCY_FILE])
    return records, graph


# ---------------------------------------------------------------------------
# dataset assembly


def _classify(names, cfg, table_names):
    site, ward, borough = [], [], []
    for name in names:
        if name in table_names:
            site.append(name)
        elif name in cfg.ward_attributes:
            ward.append(name)
        elif name in cfg.borough_attributes:
            borough.append(name)
        else:
            raise InputError(f"covariate {name!r} is neither a site feature nor a declared attribute")
    return site, ward, borough


def dataset_from_files(cfg, threshold=None, covariates=None):
    """ModelDataset from the covariate table plus ward and borough attribute files."""
    table_path = Path(cfg.table_path)
    if not table_path.is_file():
        raise InputError(f"{table_path} not found; run the features command first")
    cfg.require("wards", "boroughs")
    table = read_covariate_table(table_path)
    thr = cfg.threshold if threshold is None else threshold
    if not thr > 0:
        raise InputError(f"threshold must be positive, got {thr!r}")
    names = list(covariates) if covariates is not None else list(cfg.covariates)
    if not names:
        raise InputError("no covariates configured")
    site_names, ward_names, borough_names = _classify(names, cfg, table["names"])
    wards = read_wards(cfg.wards, ward_names)
    boroughs = read_boroughs(cfg.boroughs, borough_names)
    ward_ids = [w[0] for w in wards]
    borough_ids = list(boroughs)
    widx = {w: k for k, w in enumerate(ward_ids)}
    bidx = {b: k for k, b in enumerate(borough_ids)}
    try:
        ward_of_site = [widx[w] for w in table["ward_id"]]
        borough_of_ward = [bidx[b] for _, _, b, _ in wards]
    except KeyError as exc:
        raise InputError(f"unknown region id {exc} in inputs") from None
    col = {n: j for j, n in enumerate(table["names"])}
    S = len(table["site_id"])
    X = table["values"][:, [col[n] for n in site_names]] if site_names else np.zeros((S, 0))
    Z = np.array([[w[3][n] for n in ward_names] for w in wards]).reshape(len(wards), len(ward_names))
    T = np.array([[boroughs[b][n] for n in borough_names] for b in borough_ids]).reshape(
        len(borough_ids), len(borough_names))
    y = (table["concentration"] > thr).astype(float)
    return ModelDataset.build(
        y=y, X=X, Z=Z, T=T,
        ward_of_site=ward_of_site,
        borough_of_ward=borough_of_ward,
        x_names=site_names, z_names=ward_names, t_names=borough_names,
        site_ids=table["site_id"], ward_ids=ward_ids, borough_ids=borough_ids,
    )


def site_level_matrix(data):
    """All covariates expanded to one row per site, in coefficient order."""
    return np.column_stack([data.X, data.Z[data.ward_of_site], data.T[data.borough_of_site]])


def load_graph(cfg, data):
    path = Path(cfg.adjacency_path)
    if not path.is_file():
        raise InputError(f"{path} not found; run the features command first")
    graph = read_edge_list(path)
    if tuple(graph.region_ids) != tuple(data.ward_ids):
        raise InputError("adjacency ward ids do not match the ward file")
    return graph


# ---------------------------------------------------------------------------
# fitting


def select_covariates(cfg, data, graph):
    """Correlation screening then optional backward elimination; returns (dataset, log rows)."""
    # screening runs in the declared priority order, not the level order of the design
    order = [n for n in cfg.covariates if n in data.coef_names]
    order += [n for n in data.coef_names if n not in order]
    rows = [("candidate", n, "") for n in order]
    names = order
    if cfg.screen and len(names) >= 2:
        col = {n: j for j, n in enumerate(data.coef_names)}
        matrix = site_level_matrix(data)[:, [col[n] for n in names]]
        kept = correlation_screen(matrix, names, cfg.screen_threshold)
        rows += [("screened_out", n, f"|r| > {cfg.screen_threshold:g}") for n in names if n not in kept]
        names = kept
        data = data.subset_covariates(names)
    if cfg.stepwise and names:
        names, history = backward_stepwise(data, cfg.prior, graph, cfg.mcmc)
        rows += [("stepwise_removed", n, repr(p)) for n, p in history]
        data = data.subset_covariates(names)
    rows += [("selected", n, "") for n in data.coef_names]
    return data, rows


def convergence_gate(chains, force=False):
    if len(chains) < 2 or chains[0].n_kept < 10:
        log.warning("R-hat needs two chains with 10 or more kept draws; gate skipped")
        return {}
    rhat = chain_rhat(chains)
    bad = {n: rhat[n][0] for n in fixed_effect_names(chains[0].names) if not rhat[n][0] < RHAT_GATE}
    if bad and not force:
        raise ConvergenceError(bad)
    if bad:
        log.warning("convergence gate overridden for: %s", ", ".join(sorted(bad)))
    return rhat


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_chains(chains, directory, mcmc, data=None):
    """Per-chain trace CSVs, latent-effect summaries and binary arrays for `report`."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for c in chains:
        k = c.chain
        first = mcmc.burn_in + mcmc.thinning
        _write_csv(d / f"trace_chain{k}.csv", ["iteration", *c.names],
                   ([first + i * mcmc.thinning, *(repr(float(v)) for v in row)]
                    for i, row in enumerate(c.samples)))
        if data is not None and c.latent_mean:
            ids = {"U": data.ward_ids, "V": data.ward_ids, "e": data.site_ids}
            rows = []
            for eff in ("U", "V", "e"):
                if eff not in c.latent_mean:
                    continue
                for rid, m, v in zip(ids[eff], c.latent_mean[eff], c.latent_var[eff]):
                    rows.append([eff, rid, repr(float(m)), repr(float(v))])
            _write_csv(d / f"latent_chain{k}.csv", ["effect", "id", "mean", "variance"], rows)
        np.save(d / f"chain{k}_samples.npy", c.samples)
        np.save(d / f"chain{k}_site_prob.npy", c.site_prob_mean)
        np.save(d / f"chain{k}_borough_prob.npy", c.borough_prob_draws)
        meta = {
            "chain": k,
            "seed": c.seed,
            "names": list(c.names),
            "acceptance": c.acceptance,
            "max_constraint_violation": c.max_constraint_violation,
        }
        (d / f"chain{k}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_chains(directory):
    d = Path(directory)
    metas = sorted(d.glob("chain*.json"), key=lambda p: int(p.stem[5:]))
    if not metas:
        raise InputError(f"no chain outputs in {d}; run the fit command first")
    out = []
    for p in metas:
        meta = json.loads(p.read_text())
        k = meta["chain"]
        out.append(ChainOutput(
            chain=k,
            seed=meta["seed"],
            names=tuple(meta["names"]),
            samples=np.load(d / f"chain{k}_samples.npy"),
            acceptance=meta["acceptance"],
            latent_mean={},
            latent_var={},
            site_prob_mean=np.load(d / f"chain{k}_site_prob.npy"),
            borough_prob_draws=np.load(d / f"chain{k}_borough_prob.npy"),
            max_constraint_violation=meta["max_constraint_violation"],
            wall_time=0.0,
        ))
    return out


def write_diagnostics(chains, rhat, path):
    rows = []
    for n in chains[0].names:
        r, degenerate = rhat.get(n, (float("nan"), False))
        rows.append([n, "" if np.isnan(r) else repr(r), int(degenerate)])
    _write_csv(path, ["parameter", "rhat", "degenerate"], rows)


def write_reports(chains, data, threshold, cutoff, out, ward_geometries=None):
    """Table, odds-ratio, map and ranking outputs for one fitted threshold."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_parameters(summarize_parameters(chains), out / "parameters.csv")
    write_odds_ratios(chains, data.coef_names, out / "odds_ratios.csv")
    report = exceedance_report(chains, data, threshold, cutoff)
    write_ward_probabilities(report, out / "ward_probabilities.csv", ward_geometries,
                             out / "ward_probabilities.geojson" if ward_geometries else None)
    write_site_probabilities(report, out / "site_probabilities.csv")
    write_borough_ranking(report, out / "borough_ranking.csv")
    return report


def _ward_geometries(cfg):
    if cfg.wards is None or not Path(cfg.wards).is_file():
        return None
    return {wid: poly for wid, poly, _, _ in read_wards(cfg.wards)}


def _fit_inputs(cfg):
    return [cfg.table_path, cfg.adjacency_path, cfg.wards, cfg.boroughs]


def cmd_fit(cfg, force=False):
    """Select covariates, run the chains, gate on R-hat and write traces and summaries."""
    out = Path(cfg.output)
    data = dataset_from_files(cfg)
    check_outcome(data.y, cfg.threshold)
    graph = load_graph(cfg, data)
    data, selection = select_covariates(cfg, data, graph)
    fit_dir = out / FIT_DIR
    fit_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(fit_dir / "selection.csv", ["step", "covariate", "detail"], selection)
    write_dataset(data, fit_dir / "dataset")
    chains = run_chains(data, cfg.prior, graph, cfg.mcmc)
    write_chains(chains, fit_dir, cfg.mcmc, data)
    rhat = chain_rhat(chains) if len(chains) >= 2 and chains[0].n_kept >= 10 else {}
    write_diagnostics(chains, rhat, fit_dir / "diagnostics.csv")
    status = {"threshold": cfg.threshold, "forced": bool(force), "gate": RHAT_GATE}
    try:
        convergence_gate(chains, force)
    except ConvergenceError as exc:
        status["converged"] = False
        (fit_dir / "status.json").write_text(json.dumps(status, indent=2, sort_keys=True) + "\n")
        write_manifest("fit", cfg.to_mapping(), _fit_inputs(cfg), out, _mcmc_seeds(cfg),
                       [FIT_DIR], {"force": bool(force), "refused": sorted(exc.offenders)})
        raise
    status["converged"] = all(
        rhat.get(n, (0.0, False))[0] < RHAT_GATE for n in fixed_effect_names(chains[0].names))
    (fit_dir / "status.json").write_text(json.dumps(status, indent=2, sort_keys=True) + "\n")
    report = write_reports(chains, data, cfg.threshold, cfg.cutoff, out / "report", _ward_geometries(cfg))
    write_manifest("fit", cfg.to_mapping(), _fit_inputs(cfg), out, _mcmc_seeds(cfg),
                   [FIT_DIR, "report"], {"force": bool(force)})
    return chains, report


def cmd_report(cfg, force=False):
    """Regenerate report tables from stored fit outputs."""
    out = Path(cfg.output)
    fit_dir = out / FIT_DIR
    status_path = fit_dir / "status.json"
    if not status_path.is_file():
        raise InputError(f"{status_path} not found; run the fit command first")
    status = json.loads(status_path.read_text())
    chains = read_chains(fit_dir)
    data = read_dataset(fit_dir / "dataset")
    if not status.get("converged", False):
        convergence_gate(chains, force)
    report = write_reports(chains, data, status["threshold"], cfg.cutoff, out / "report",
                           _ward_geometries(cfg))
    inputs = [p for p in sorted(fit_dir.rglob("*")) if p.is_file()]
    if cfg.wards is not None and Path(cfg.wards).is_file():
        inputs.append(cfg.wards)
    write_manifest("report", cfg.to_mapping(), inputs, out, {}, ["report"], {"force": bool(force)})
    return report


def cmd_sensitivity(cfg, force=False):
    """Refit at every configured threshold and compare the exceedance summaries."""
    out = Path(cfg.output)
    base = dataset_from_files(cfg)
    graph = load_graph(cfg, base)
    data, _ = select_covariates(cfg, base, graph)
    names = data.coef_names

    def build(threshold):
        return dataset_from_files(cfg, threshold).subset_covariates(names)

    result = threshold_sensitivity(build, cfg.thresholds, graph, cfg.prior, cfg.mcmc, cfg.cutoff)
    sdir = out / "sensitivity"
    sdir.mkdir(parents=True, exist_ok=True)
    bad = {}
    geoms = _ward_geometries(cfg)
    for thr, chains in result.chains.items():
        try:
            convergence_gate(chains, force)
        except ConvergenceError as exc:
            bad.update({f"{k}@{thr:g}": v for k, v in exc.offenders.items()})
            continue
        write_reports(chains, build(thr), thr, cfg.cutoff, sdir / f"threshold_{thr:g}", geoms)
    if bad:
        write_manifest("sensitivity", cfg.to_mapping(), _fit_inputs(cfg), out, _mcmc_seeds(cfg),
                       ["sensitivity"], {"force": bool(force), "refused": sorted(bad)})
        raise ConvergenceError(bad)
    write_sensitivity(result, out / "sensitivity.csv")
    write_manifest("sensitivity", cfg.to_mapping(), _fit_inputs(cfg), out, _mcmc_seeds(cfg),
                   ["sensitivity", "sensitivity.csv"], {"force": bool(force)})
    return result


def cmd_adjacency(cfg):
    cfg.require("wards")
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    wards = read_wards(cfg.wards)
    graph = build_adjacency([(wid, poly) for wid, poly, _, _ in wards])
    write_edge_list(graph, out / ADJACENCY_FILE)
    return graph


__all__ = [
    "RunConfig",
    "cmd_adjacency",
    "cmd_features",
    "cmd_fit",
    "cmd_report",
    "cmd_sensitivity",
    "dataset_from_files",
    "digest_tree",
    "write_manifest",
]
