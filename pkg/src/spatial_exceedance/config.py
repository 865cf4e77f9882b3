"""Plain ``key = value`` run configuration.

Lines starting with ``#`` are comments.  Relative paths resolve against the
directory holding the config file.  Recognised keys::

    sites, wards, boroughs, grid          input files
    layer.<name> = path                   point/line layers referenced by features
    feature.<name> = kind source [radius] site covariates (see FeatureSpec)
    ward_attributes, borough_attributes   numeric columns carried from the region files
    covariates                            model covariates in screening priority order
    threshold, thresholds, cutoff         exceedance settings
    screen, screen_threshold, stepwise    covariate selection
    prior.coef_var, prior.tau_U ...       PriorSpec overrides ("shape rate" for Gamma)
    site_effects                          include the site-level effect
    chains, iterations, burn_in, thinning, adapt_window, workers, seed
    output                                output directory
    covariate_table, adjacency            feature outputs read by fit (default: in output)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import InputError
from .geo_features import FeatureSpec
from .mcmc import McmcConfig
from .model import PriorSpec

_BOOL = {"true": True, "yes": True, "1": True, "on": True,
         "false": False, "no": False, "0": False, "off": False}


def parse_key_values(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise InputError(f"{source}:{lineno}: empty key")
        if key in out:
            raise InputError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _list(value):
    return [v.strip() for v in value.split(",") if v.strip()]


def _bool(key, value):
    try:
        return _BOOL[value.lower()]
    except KeyError:
        raise InputError(f"{key}: expected a boolean, got {value!r}") from None


def _num(key, value, kind=float):
    try:
        return kind(value)
    except ValueError:
        raise InputError(f"{key}: expected a number, got {value!r}") from None


@dataclass(frozen=True)
class RunConfig:
    base: Path = Path(".")
    sites: Path | None = None
    wards: Path | None = None
    boroughs: Path | None = None
    grid: Path | None = None
    layers: dict = field(default_factory=dict)
    features: tuple = ()
    ward_attributes: tuple = ()
    borough_attributes: tuple = ()
    covariates: tuple = ()
    threshold: float = 40.0
    thresholds: tuple = (40.0, 35.0)
    cutoff: float = 0.75
    screen: bool = True
    screen_threshold: float = 0.60
    stepwise: bool = False
    prior: PriorSpec = field(default_factory=PriorSpec)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    output: Path = Path("out")
    covariate_table: Path | None = None
    adjacency: Path | None = None
    grid_spacing: float = 20.0

    def __post_init__(self):
        if not self.threshold > 0 or not all(t > 0 for t in self.thresholds):
            raise InputError("thresholds must be positive")
        if not 0 < self.cutoff < 1:
            raise InputError("cutoff must lie in (0, 1)")
        if len(set(self.covariates)) != len(self.covariates):
            raise InputError("covariate names must be unique")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise InputError("feature names must be unique")
        for f in self.features:
            if f.kind != "property" and f.source not in self.layers:
                raise InputError(f"feature {f.name!r} uses undeclared layer {f.source!r}")

    @classmethod
    def from_file(cls, path):
        p = Path(path)
        if not p.is_file():
            raise InputError(f"config file not found: {p}")
        return cls.from_mapping(parse_key_values(p.read_text(), str(p)), p.resolve().parent)

    @classmethod
    def from_mapping(cls, kv, base=Path(".")):
        base = Path(base)
        kv = dict(kv)

        def path(key):
            v = kv.pop(key, None)
            return None if v is None else (base / v).resolve()

        args = {"base": base}
        for key in ("sites", "wards", "boroughs", "grid", "covariate_table", "adjacency"):
            args[key] = path(key)
        args["output"] = path("output") or (base / "out").resolve()
        layers, features = {}, []
        for key in sorted(k for k in kv if k.startswith("layer.")):
            layers[key[6:]] = (base / kv.pop(key)).resolve()
        for key in [k for k in kv if k.startswith("feature.")]:
            features.append(FeatureSpec.parse(key[8:], kv.pop(key)))
        args["layers"] = layers
        args["features"] = tuple(features)
        for key in ("ward_attributes", "borough_attributes", "covariates"):
            if key in kv:
                args[key] = tuple(_list(kv.pop(key)))
        if "threshold" in kv:
            args["threshold"] = _num("threshold", kv.pop("threshold"))
        if "thresholds" in kv:
            args["thresholds"] = tuple(_num("thresholds", v) for v in _list(kv.pop("thresholds")))
        for key in ("cutoff", "screen_threshold", "grid_spacing"):
            if key in kv:
                args[key] = _num(key, kv.pop(key))
        for key in ("screen", "stepwise"):
            if key in kv:
                args[key] = _bool(key, kv.pop(key))

        prior = {}
        if "prior.coef_var" in kv:
            prior["coef_var"] = _num("prior.coef_var", kv.pop("prior.coef_var"))
        for name in ("tau_U", "tau_V", "tau_s"):
            key = f"prior.{name}"
            if key in kv:
                parts = kv.pop(key).split()
                if len(parts) != 2:
                    raise InputError(f"{key}: expected 'shape rate'")
                prior[name] = tuple(_num(key, v) for v in parts)
        if "site_effects" in kv:
            prior["site_effects"] = _bool("site_effects", kv.pop("site_effects"))
        args["prior"] = PriorSpec(**prior)

        mcmc = {}
        for key in ("chains", "iterations", "burn_in", "thinning", "adapt_window", "workers", "seed"):
            if key in kv:
                mcmc[key] = _num(key, kv.pop(key), int)
        args["mcmc"] = McmcConfig(**mcmc)
        if kv:
            raise InputError(f"unknown config keys: {', '.join(sorted(kv))}")
        return cls(**args)

    def with_overrides(self, seed=None, threshold=None, chains=None, iterations=None,
                       burn_in=None, workers=None, output=None):
        mc = {}
        for key, value in (("seed", seed), ("chains", chains), ("iterations", iterations),
                           ("burn_in", burn_in), ("workers", workers)):
            if value is not None:
                mc[key] = value
        cfg = self
        if mc:
            cfg = replace(cfg, mcmc=replace(cfg.mcmc, **mc))
        if threshold is not None:
            cfg = replace(cfg, threshold=float(threshold))
        if output is not None:
            cfg = replace(cfg, output=Path(output).resolve())
        return cfg

    def to_mapping(self):
        """Flat string mapping that `from_mapping` reads back to an equal config.

        Paths are absolute; `workers` is omitted because it never changes results.
        """
        kv = {}
        for key in ("sites", "wards", "boroughs", "grid"):
            v = getattr(self, key)
            if v is not None:
                kv[key] = str(v)
        kv["covariate_table"] = str(self.table_path)
        kv["adjacency"] = str(self.adjacency_path)
        for name, p in sorted(self.layers.items()):
            kv[f"layer.{name}"] = str(p)
        for f in self.features:
            kv[f"feature.{f.name}"] = f.to_text()
        for key in ("ward_attributes", "borough_attributes", "covariates"):
            kv[key] = ", ".join(getattr(self, key))
        kv["threshold"] = repr(self.threshold)
        kv["thresholds"] = ", ".join(repr(t) for t in self.thresholds)
        kv["cutoff"] = repr(self.cutoff)
        kv["screen"] = str(self.screen).lower()
        kv["screen_threshold"] = repr(self.screen_threshold)
        kv["stepwise"] = str(self.stepwise).lower()
        kv["grid_spacing"] = repr(self.grid_spacing)
        kv["prior.coef_var"] = repr(self.prior.coef_var)
        for name in ("tau_U", "tau_V", "tau_s"):
            a, b = getattr(self.prior, name)
            kv[f"prior.{name}"] = f"{a!r} {b!r}"
        kv["site_effects"] = str(self.prior.site_effects).lower()
        for key in ("chains", "iterations", "burn_in", "thinning", "adapt_window", "seed"):
            kv[key] = str(getattr(self.mcmc, key))
        kv["output"] = str(self.output)
        return kv

    @property
    def table_path(self):
        return self.covariate_table or Path(self.output) / "covariates.csv"

    @property
    def adjacency_path(self):
        return self.adjacency or Path(self.output) / "adjacency.csv"

    def require(self, *keys):
        for key in keys:
            value = getattr(self, key)
            if value is None:
                raise InputError(f"config is missing {key!r}")
            if isinstance(value, Path) and not value.is_file():
                raise InputError(f"input file not found: {value}")
