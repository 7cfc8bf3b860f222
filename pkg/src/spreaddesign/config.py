"""Line-oriented run configuration: parsing, validation, and echo.

Format (version 1): one ``key = value`` pair per line, ``#`` comments and
blank lines ignored. Keys are dotted lowercase paths. List values are
whitespace-separated. Unknown keys are errors (no silent ignoring);
missing required keys are reported all at once. ``manifest.*`` and
``result.*`` namespaces are reserved for run manifests: they parse into
side tables and never affect the run configuration, which lets a
manifest double as a rerunnable config document.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

CONFIG_VERSION = 1

_REQUIRED = object()


@dataclass(frozen=True)
class _Key:
    name: str
    kind: str  # int, float, bool, str, list_str, list_int, list_float
    default: object
    help: str


SCHEMA: tuple[_Key, ...] = (
    _Key("version", "int", _REQUIRED, "config format version (must be 1)"),
    _Key("seed", "int", _REQUIRED, "master seed; all randomness derives from it"),
    _Key("paths.grid", "str", "", "activity-mask raster"),
    _Key("paths.covariates", "list_str", [], "covariate rasters, in design-matrix order"),
    _Key("paths.surveys", "str", "", "survey count records"),
    _Key("paths.fit", "str", "", "posterior directory from a previous fit"),
    _Key("paths.search", "str", "", "search directory from a previous optimize"),
    _Key("paths.output", "str", "out", "output directory"),
    _Key("model.growth", "str", "malthusian", "growth kind: none | malthusian | logistic"),
    _Key("model.boundary", "str", "absorbing", "boundary mode: absorbing | reflecting"),
    _Key("model.substeps", "int", 16, "propagator steps per observation interval"),
    _Key("model.epicenter_x", "float", 0.0, "initial-kernel center, x (planar units)"),
    _Key("model.epicenter_y", "float", 0.0, "initial-kernel center, y (planar units)"),
    _Key("model.prior_beta_sd", "float", 1.5, "sd of the Normal prior on motility coefficients"),
    _Key("model.prior_alpha_sd", "float", 1.5, "sd of the Normal prior on growth coefficients"),
    _Key("model.prior_tau_mean", "float", 500.0, "center of the positive-truncated prior on tau"),
    _Key("model.prior_tau_scale", "float", 10.0, "scale of the tau prior (variance by default)"),
    _Key("model.prior_kappa_mean", "float", 5.0, "center of the positive-truncated prior on kappa"),
    _Key("model.prior_kappa_scale", "float", 0.001, "scale of the kappa prior (variance by default)"),
    _Key("model.prior_scale_is_sd", "bool", False, "read prior scales as standard deviations"),
    _Key("model.aux_detection", "list_int", [], "optional 'successes trials' from a detection study"),
    _Key("mcmc.n_iter", "int", 20000, "MCMC draws per chain"),
    _Key("mcmc.n_burn", "int", 5000, "discarded draws per chain"),
    _Key("mcmc.n_chains", "int", 2, "number of chains"),
    _Key("mcmc.thin", "int", 1, "keep every thin-th retained draw"),
    _Key("mcmc.u_thin", "int", 10, "archive intensity fields every u_thin-th retained draw"),
    _Key("mcmc.adapt", "bool", True, "adapt proposal scales during burn-in"),
    _Key("mcmc.prop_scale_beta", "float", 0.1, "initial proposal scale, motility block"),
    _Key("mcmc.prop_scale_alpha", "float", 0.1, "initial proposal scale, growth block"),
    _Key("mcmc.prop_scale_zeta", "float", 0.01, "initial proposal scale, log(tau), log(kappa) block"),
    _Key("forecast.horizon", "int", 5, "forecast horizon in observation intervals"),
    _Key("evaluate.design", "list_int", [], "transect indices of the design to evaluate"),
    _Key("evaluate.refit_iter", "int", 0, "refit chain length (0: half of mcmc.n_iter)"),
    _Key("evaluate.refit_burn", "int", 0, "refit burn-in (0: half of mcmc.n_burn)"),
    _Key("evaluate.refit_chains", "int", 0, "refit chain count (0: same as mcmc.n_chains)"),
    _Key("search.m", "int", 64, "number of random designs"),
    _Key("search.n", "int", 20, "design size (transects per survey)"),
    _Key("search.parallelism", "int", 1, "worker processes for design evaluations"),
    _Key("search.transect_axis", "str", "rows", "transect orientation: rows | cols"),
    _Key("synth.nrows", "int", 30, "scenario grid rows"),
    _Key("synth.ncols", "int", 30, "scenario grid columns"),
    _Key("synth.water_rows", "int", 12, "rows containing water in the scenario"),
    _Key("synth.cell_size", "float", 1.0, "scenario cell size"),
    _Key("synth.years", "int", 8, "scenario survey years"),
    _Key("synth.phi", "float", 0.6, "scenario detection probability"),
    _Key("synth.alpha", "float", 0.3, "scenario growth rate"),
    _Key("synth.tau", "float", 500.0, "scenario initial-kernel mass"),
    _Key("synth.kappa", "float", 5.0, "scenario initial-kernel spread"),
    _Key("synth.beta", "list_float", [], "scenario motility coefficients (empty: built-in)"),
)

_SCHEMA_BY_NAME = {k.name: k for k in SCHEMA}

_CHOICES = {
    "model.growth": ("none", "malthusian", "logistic"),
    "model.boundary": ("absorbing", "reflecting"),
    "search.transect_axis": ("rows", "cols"),
}


@dataclass
class RunConfig:
    """Validated configuration with every default made explicit."""

    values: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, **overrides) -> "RunConfig":
        values = dict(self.values)
        for key, value in overrides.items():
            if key not in _SCHEMA_BY_NAME:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
        return RunConfig(values, dict(self.manifest), dict(self.results))

    def echo_lines(self) -> list[str]:
        """Every key in schema order, defaults included."""
        return [f"{k.name} = {_format_value(k, self.values[k.name])}" for k in SCHEMA]


def _format_value(key: _Key, value) -> str:
    if key.kind == "bool":
        return "true" if value else "false"
    if key.kind.startswith("list"):
        if key.kind == "list_float":
            return " ".join(f"{v:.17g}" for v in value)
        return " ".join(str(v) for v in value)
    if key.kind == "float":
        return f"{value:.17g}"
    return str(value)


def _parse_value(key: _Key, raw: str, errors: list[str]):
    raw = raw.strip()
    try:
        if key.kind == "int":
            return int(raw)
        if key.kind == "float":
            return float(raw)
        if key.kind == "bool":
            if raw.lower() in ("true", "false"):
                return raw.lower() == "true"
            raise ValueError(raw)
        if key.kind == "list_str":
            return list(raw.split())
        if key.kind == "list_int":
            return [int(tok) for tok in raw.split()]
        if key.kind == "list_float":
            return [float(tok) for tok in raw.split()]
        return raw
    except ValueError:
        errors.append(f"bad value for {key.name}: {raw!r} (expected {key.kind})")
        return None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate a config document.

    Raises:
        ConfigError: unknown keys (named), missing required keys (all
            listed at once), bad values, or unsupported version.
    """
    values: dict = {}
    manifest: dict = {}
    results: dict = {}
    errors: list[str] = []
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            errors.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        name, raw = stripped.split("=", 1)
        name = name.strip()
        if name.startswith("manifest."):
            manifest[name[len("manifest.") :]] = raw.strip()
            continue
        if name.startswith("result."):
            results[name[len("result.") :]] = raw.strip()
            continue
        key = _SCHEMA_BY_NAME.get(name)
        if key is None:
            errors.append(f"{source}:{lineno}: unknown key {name!r}")
            continue
        if name in seen:
            errors.append(f"{source}:{lineno}: duplicate key {name!r}")
            continue
        seen.add(name)
        parsed = _parse_value(key, raw, errors)
        if parsed is not None:
            values[name] = parsed

    missing = [
        k.name for k in SCHEMA if k.default is _REQUIRED and k.name not in values
    ]
    if missing:
        errors.append("missing required keys: " + ", ".join(missing))
    for key in SCHEMA:
        if key.name not in values and key.default is not _REQUIRED:
            values[key.name] = key.default

    if not errors:
        if values["version"] != CONFIG_VERSION:
            errors.append(f"unsupported config version {values['version']} (expected {CONFIG_VERSION})")
        for name, choices in _CHOICES.items():
            if values[name] not in choices:
                errors.append(f"{name} must be one of {', '.join(choices)}")
        for name in ("mcmc.n_iter", "mcmc.n_chains", "mcmc.thin", "mcmc.u_thin", "model.substeps"):
            if values[name] < 1:
                errors.append(f"{name} must be >= 1")
        if not (0 <= values["mcmc.n_burn"] < values["mcmc.n_iter"]):
            errors.append("need 0 <= mcmc.n_burn < mcmc.n_iter")
        if values["model.aux_detection"] and len(values["model.aux_detection"]) != 2:
            errors.append("model.aux_detection needs exactly two integers: successes trials")
        if values["search.m"] < 1 or values["search.n"] < 1:
            errors.append("search.m and search.n must be >= 1")
        if values["search.parallelism"] < 1:
            errors.append("search.parallelism must be >= 1")

    if errors:
        raise ConfigError("; ".join(errors))
    return RunConfig(values, manifest, results)


def read_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), source=str(path))


def config_reference() -> str:
    """Documented key table for the README and --help output."""
    lines = ["key | type | default | meaning", "--- | --- | --- | ---"]
    for k in SCHEMA:
        default = "(required)" if k.default is _REQUIRED else _format_value(k, k.default) or "(empty)"
        lines.append(f"{k.name} | {k.kind} | {default} | {k.help}")
    return "\n".join(lines)
