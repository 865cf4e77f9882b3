"""Command-line front end.

Exit codes: 0 success, 2 input error, 3 convergence gate refused,
4 internal error, 5 replay produced different outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, parse_key_values
from .errors import ConvergenceError, InputError
from .pipeline import (
    cmd_adjacency,
    cmd_features,
    cmd_fit,
    cmd_report,
    cmd_sensitivity,
    sha256_file,
    write_manifest,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3
EXIT_INTERNAL = 4
EXIT_MISMATCH = 5

log = logging.getLogger("spatial_exceedance")

_SYNTH_TYPES = {
    "n_wards": int,
    "n_boroughs": int,
    "n_sites": int,
    "seed": int,
    "threshold": float,
    "target_exceedance": float,
    "ward_area_km2": float,
    "tau_U": float,
    "tau_V": float,
    "tau_s": float,
    "gradient_noise": float,
}


def _run_config(args):
    cfg = RunConfig.from_file(args.config)
    return cfg.with_overrides(
        seed=args.seed,
        threshold=args.threshold,
        chains=args.chains,
        iterations=args.iterations,
        burn_in=args.burn_in,
        workers=args.workers,
        output=args.out,
    )


def synth_config(path=None, seed=None):
    from .synth import SynthConfig

    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"config file not found: {p}")
        for key, raw in parse_key_values(p.read_text(), str(p)).items():
            if key not in _SYNTH_TYPES:
                raise InputError(f"{p}: unknown synthetic-city setting {key!r}")
            try:
                values[key] = _SYNTH_TYPES[key](raw)
            except ValueError:
                raise InputError(f"{p}: {key} expects a number, got {raw!r}") from None
    if seed is not None:
        values["seed"] = seed
    return SynthConfig(**values)


def run_simulate(scfg, out):
    from .synth import generate_city, write_city

    out = Path(out).resolve()
    city = generate_city(scfg)
    write_city(city, out)
    write_manifest("simulate", scfg.to_dict(), [], out, {"synth": scfg.seed})
    log.info("synthetic city: %d wards, %d sites, exceedance %.3f",
             len(city.ward_ids), len(city.site_ids), city.exceedance_proportion)
    return city


def _dispatch(command, cfg, force):
    if command == "features":
        cmd_features(cfg)
    elif command == "fit":
        cmd_fit(cfg, force)
    elif command == "report":
        cmd_report(cfg, force)
    elif command == "sensitivity":
        result = cmd_sensitivity(cfg, force)
        for thr in sorted(result.exceeding, reverse=True):
            print(f"threshold {thr:g}: {result.exceeding[thr]} exceeding sites, "
                  f"{result.affected[thr]} sites in high-risk wards")
    elif command == "adjacency":
        graph = cmd_adjacency(cfg)
        from .adjacency import describe

        print(json.dumps(describe(graph), indent=2, sort_keys=True))
    else:
        raise InputError(f"unknown command {command!r}")


def replay(manifest_path, out=None, workers=None):
    """Re-run a recorded command and compare its outputs with the recorded digests."""
    from .pipeline import digest_tree
    from .synth import SynthConfig

    p = Path(manifest_path)
    if not p.is_file():
        raise InputError(f"manifest not found: {p}")
    try:
        doc = json.loads(p.read_text())
        command = doc["command"]
        recorded = doc["outputs"]
    except (json.JSONDecodeError, KeyError):
        raise InputError(f"{p}: not a run manifest") from None
    for path, digest in doc.get("inputs", {}).items():
        if not Path(path).is_file():
            raise InputError(f"manifest input missing: {path}")
        if sha256_file(path) != digest:
            raise InputError(f"manifest input changed since the recorded run: {path}")
    if command == "simulate":
        target = Path(out).resolve() if out else p.resolve().parent
        run_simulate(SynthConfig.from_dict(doc["config"]), target)
    else:
        cfg = RunConfig.from_mapping(doc["config"]).with_overrides(workers=workers, output=out)
        target = Path(cfg.output)
        _dispatch(command, cfg, bool(doc.get("force", False)))
    fresh = digest_tree(target, sorted({k.split("/")[0] for k in recorded}))
    diff = sorted(k for k in set(recorded) | set(fresh) if recorded.get(k) != fresh.get(k))
    return diff


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spatial-exceedance",
        description="Site exceedance modelling with a BYM/ICAR spatial logit.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_cmd(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("config", help="key = value run configuration file")
        sp.add_argument("--out", help="output directory (overrides 'output')")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threshold", type=float)
        sp.add_argument("--chains", type=int)
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--burn-in", dest="burn_in", type=int)
        sp.add_argument("--workers", type=int, help="chain-level worker processes")
        sp.add_argument("--force", action="store_true",
                        help="write summaries even if the R-hat gate fails")
        return sp

    run_cmd("features", "extract site covariates, exposures and the ward graph")
    run_cmd("fit", "fit the model and write traces and summaries")
    run_cmd("report", "rebuild report tables from a stored fit")
    run_cmd("sensitivity", "refit at every configured threshold")
    run_cmd("adjacency", "build the ward graph and print its summary")

    sp = sub.add_parser("simulate", help="write a synthetic city with known ground truth")
    sp.add_argument("config", nargs="?", help="optional key = value generator settings")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("replay", help="re-run a manifest and check outputs are identical")
    sp.add_argument("manifest")
    sp.add_argument("--out", help="write the replay here instead of the recorded directory")
    sp.add_argument("--workers", type=int)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            run_simulate(synth_config(args.config, args.seed), args.out)
        elif args.command == "replay":
            diff = replay(args.manifest, args.out, args.workers)
            if diff:
                print("replay outputs differ: " + ", ".join(diff), file=sys.stderr)
                return EXIT_MISMATCH
            print("replay outputs identical")
        else:
            _dispatch(args.command, _run_config(args), args.force)
    except ConvergenceError as exc:
        print(f"error: {exc} (use --force to write summaries anyway)", file=sys.stderr)
        return EXIT_CONVERGENCE
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to an exit code
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
