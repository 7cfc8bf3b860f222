"""Command-line pipeline: synth, fit, diagnose, forecast, evaluate,
optimize, report, rerun.

Every verb validates its configuration before computing, writes all
artifacts into a fresh output directory, and finishes with a manifest
that doubles as a rerunnable config document (``spreaddesign rerun
<manifest> --out <dir>`` reproduces the outputs bitwise). Exit status: 0
success, 1 validation failure, 2 numeric failure, 3 I/O failure; partial
outputs are removed on failure.

Environment overrides (these two only): SPREADDESIGN_PARALLELISM and
SPREADDESIGN_OUTPUT.
"""

from __future__ import annotations

import argparse
import hashlib
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, parse_config, read_config
from .design import Design, build_evaluation_context, optimize
from .domain import enumerate_transects, read_covariate, read_grid
from .errors import ConfigError, DataFormatError, DomainError, NumericError
from .forecast import forecast
from .mcmc import ChainConfig, bayesian_p_value, gelman_rubin, run_chain
from .model import ModelSpec, design_matrix, read_survey_file
from .persist import load_posterior, save_forecast, save_posterior, save_search_report
from .seeding import derive_seed
from .synth import REFERENCE_BETA, reference_scenario, write_scenario

VERBS = ("synth", "fit", "diagnose", "forecast", "evaluate", "optimize", "report")

_INPUT_KEYS = ("paths.grid", "paths.surveys", "paths.fit", "paths.search")

_REQUIRES = {
    "synth": (),
    "fit": ("paths.grid", "paths.surveys"),
    "diagnose": ("paths.fit", "paths.grid", "paths.surveys"),
    "forecast": ("paths.fit", "paths.grid"),
    "evaluate": ("paths.fit", "paths.grid", "paths.surveys"),
    "optimize": ("paths.grid", "paths.surveys"),
    "report": ("paths.search", "paths.grid"),
}


def _progress(stage: str):
    started = time.monotonic()

    def emit(chain_id, it, n_iter):
        rate = it / max(time.monotonic() - started, 1e-9)
        print(
            f"[{stage}] chain {chain_id}: {it}/{n_iter} ({rate:.0f} draws/s)",
            file=sys.stderr,
            flush=True,
        )

    return emit


def _digest_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _digest_path(path: Path) -> str:
    if path.is_dir():
        acc = hashlib.sha256()
        for child in sorted(path.rglob("*")):
            if child.is_file():
                acc.update(child.name.encode())
                acc.update(_digest_file(child).encode())
        return acc.hexdigest()
    return _digest_file(path)


def _collect_inputs(cfg: RunConfig, verb: str) -> list[Path]:
    paths = []
    for key in _REQUIRES[verb]:
        paths.append(Path(cfg[key]))
    if verb in ("fit", "diagnose", "forecast", "evaluate", "optimize"):
        paths.extend(Path(p) for p in cfg["paths.covariates"])
    if verb == "optimize" and cfg["paths.fit"]:
        paths.append(Path(cfg["paths.fit"]))
    return paths


def _validate_inputs(cfg: RunConfig, verb: str) -> list[Path]:
    missing_keys = [key for key in _REQUIRES[verb] if not cfg[key]]
    if missing_keys:
        raise ConfigError(
            f"verb {verb!r} requires config keys: " + ", ".join(missing_keys)
        )
    inputs = _collect_inputs(cfg, verb)
    absent = [str(p) for p in inputs if not p.exists()]
    if absent:
        raise ConfigError("missing input paths: " + ", ".join(absent))
    return inputs


def _write_manifest(out: Path, verb: str, cfg: RunConfig, inputs: list[Path], results: dict):
    lines = [
        "# spreaddesign run manifest",
        "manifest.format = 1",
        f"manifest.verb = {verb}",
        f"manifest.package = spreaddesign-{__version__}",
    ]
    for i, path in enumerate(inputs):
        lines.append(f"manifest.input.{i} = {path}")
        lines.append(f"manifest.digest.{i} = {_digest_path(path)}")
    lines.extend(cfg.echo_lines())
    for key in sorted(results):
        lines.append(f"result.{key} = {results[key]}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Configuration -> model objects


def _load_domain(cfg: RunConfig):
    grid = read_grid(cfg["paths.grid"])
    covariates = [read_covariate(p, grid) for p in cfg["paths.covariates"]]
    return grid, covariates


def _model_spec(cfg: RunConfig, grid, covariates) -> ModelSpec:
    aux = cfg["model.aux_detection"]
    return ModelSpec(
        grid=grid,
        X=design_matrix(grid, covariates),
        epicenter=(cfg["model.epicenter_x"], cfg["model.epicenter_y"]),
        growth=cfg["model.growth"],
        boundary=cfg["model.boundary"],
        substeps=cfg["model.substeps"],
        beta_sd=cfg["model.prior_beta_sd"],
        alpha_sd=cfg["model.prior_alpha_sd"],
        tau_mean=cfg["model.prior_tau_mean"],
        tau_scale=cfg["model.prior_tau_scale"],
        kappa_mean=cfg["model.prior_kappa_mean"],
        kappa_scale=cfg["model.prior_kappa_scale"],
        scale_is_sd=cfg["model.prior_scale_is_sd"],
        aux_detection=tuple(aux) if aux else None,
    )


def _chain_config(cfg: RunConfig) -> ChainConfig:
    return ChainConfig(
        n_iter=cfg["mcmc.n_iter"],
        n_burn=cfg["mcmc.n_burn"],
        n_chains=cfg["mcmc.n_chains"],
        thin=cfg["mcmc.thin"],
        u_thin=cfg["mcmc.u_thin"],
        seed=cfg["seed"],
        adapt=cfg["mcmc.adapt"],
        prop_scale_beta=cfg["mcmc.prop_scale_beta"],
        prop_scale_alpha=cfg["mcmc.prop_scale_alpha"],
        prop_scale_zeta=cfg["mcmc.prop_scale_zeta"],
    )


def _refit_config(cfg: RunConfig) -> ChainConfig | None:
    n_iter = cfg["evaluate.refit_iter"] or max(2, cfg["mcmc.n_iter"] // 2)
    n_burn = cfg["evaluate.refit_burn"] or cfg["mcmc.n_burn"] // 2
    n_chains = cfg["evaluate.refit_chains"] or cfg["mcmc.n_chains"]
    return ChainConfig(
        n_iter=n_iter,
        n_burn=n_burn,
        n_chains=n_chains,
        thin=1,
        u_thin=max(1, n_iter - n_burn),
        seed=0,  # replaced by the evaluation context (common random numbers)
        adapt=cfg["mcmc.adapt"],
        prop_scale_beta=cfg["mcmc.prop_scale_beta"],
        prop_scale_alpha=cfg["mcmc.prop_scale_alpha"],
        prop_scale_zeta=cfg["mcmc.prop_scale_zeta"],
    )


def _survey_data(cfg: RunConfig, grid):
    return read_survey_file(cfg["paths.surveys"], grid)


# ---------------------------------------------------------------------------
# Verbs


def _cmd_synth(cfg: RunConfig, out: Path) -> dict:
    scenario = reference_scenario(
        seed=cfg["seed"],
        nrows=cfg["synth.nrows"],
        ncols=cfg["synth.ncols"],
        water_rows=cfg["synth.water_rows"],
        cell_size=cfg["synth.cell_size"],
        n_years=cfg["synth.years"],
        phi=cfg["synth.phi"],
        beta=cfg["synth.beta"] or REFERENCE_BETA,
        alpha=cfg["synth.alpha"],
        tau=cfg["synth.tau"],
        kappa=cfg["synth.kappa"],
    )
    write_scenario(out, scenario)
    return {
        "q": str(scenario.grid.q),
        "transects": str(scenario.transects.count),
        "substeps": str(scenario.spec.substeps),
        "epicenter_x": f"{scenario.spec.epicenter[0]:.17g}",
        "epicenter_y": f"{scenario.spec.epicenter[1]:.17g}",
    }


def _cmd_fit(cfg: RunConfig, out: Path) -> dict:
    grid, covariates = _load_domain(cfg)
    spec = _model_spec(cfg, grid, covariates)
    data = _survey_data(cfg, grid)
    samples = run_chain(spec, data, _chain_config(cfg), progress=_progress("fit"))
    save_posterior(out, samples)
    results = {f"acceptance_{k}": f"{v:.17g}" for k, v in samples.acceptance.items()}
    results["stability_rejects"] = str(samples.stability_rejects)
    results["retained_draws"] = str(samples.n_draws)
    return results


def _cmd_diagnose(cfg: RunConfig, out: Path) -> dict:
    grid, _ = _load_domain(cfg)
    data = _survey_data(cfg, grid)
    samples = load_posterior(cfg["paths.fit"])
    rhat = gelman_rubin(samples)
    p_value = bayesian_p_value(samples, data, seed=derive_seed(cfg["seed"], "bayes-p"))
    lines = ["parameter rhat"]
    for name, value in rhat.items():
        lines.append(f"{name} {value:.6f}")
    lines.append("")
    lines.append("block acceptance")
    for name, value in samples.acceptance.items():
        lines.append(f"{name} {value:.6f}")
    lines.append("")
    lines.append(f"bayesian_p_value {p_value:.6f}")
    lines.append(f"stability_rejects {samples.stability_rejects}")
    (out / "diagnostics.txt").write_text("\n".join(lines) + "\n")
    results = {f"rhat_{k}": f"{v:.17g}" for k, v in rhat.items()}
    results["bayesian_p_value"] = f"{p_value:.17g}"
    return results


def _cmd_forecast(cfg: RunConfig, out: Path) -> dict:
    grid, covariates = _load_domain(cfg)
    spec = _model_spec(cfg, grid, covariates)
    samples = load_posterior(cfg["paths.fit"])
    fore = forecast(samples, cfg["forecast.horizon"], spec)
    save_forecast(out, fore, grid)
    return {
        "forecast_year": str(fore.year),
        "draws": str(fore.n_draws),
        "excluded": str(fore.excluded),
        "mean_total": f"{float(fore.totals.mean()):.17g}",
    }


def _evaluation_context(cfg: RunConfig, grid, covariates, samples):
    spec = _model_spec(cfg, grid, covariates)
    data = _survey_data(cfg, grid)
    transects = enumerate_transects(grid, cfg["search.transect_axis"])
    return build_evaluation_context(
        spec,
        data,
        transects,
        samples,
        cfg["forecast.horizon"],
        derive_seed(cfg["seed"], "evaluation"),
        _refit_config(cfg),
    ), transects


def _cmd_evaluate(cfg: RunConfig, out: Path) -> dict:
    grid, covariates = _load_domain(cfg)
    samples = load_posterior(cfg["paths.fit"])
    ctx, transects = _evaluation_context(cfg, grid, covariates, samples)
    design = Design(tuple(cfg["evaluate.design"]))
    if any(t >= transects.count for t in design.members):
        raise ConfigError(
            f"evaluate.design references transects beyond count {transects.count}"
        )
    result = ctx.evaluate(design)
    lines = [
        "members = " + (",".join(str(t) for t in design.members) or "-"),
        f"qd = {result.qd:.17g}",
        f"mean_total = {result.mean_total:.17g}",
        f"k_used = {result.k_used}",
        f"excluded = {result.excluded}",
    ]
    (out / "criterion.txt").write_text("\n".join(lines) + "\n")
    return {"qd": f"{result.qd:.17g}", "k_used": str(result.k_used)}


def _cmd_optimize(cfg: RunConfig, out: Path) -> dict:
    grid, covariates = _load_domain(cfg)
    spec = _model_spec(cfg, grid, covariates)
    data = _survey_data(cfg, grid)
    transects = enumerate_transects(grid, cfg["search.transect_axis"])
    if cfg["search.n"] > transects.count:
        raise ConfigError(
            f"search.n = {cfg['search.n']} exceeds transect count {transects.count}"
        )
    baseline = load_posterior(cfg["paths.fit"]) if cfg["paths.fit"] else None
    started = time.monotonic()

    report, ctx = optimize(
        spec,
        data,
        transects,
        _chain_config(cfg),
        m=cfg["search.m"],
        n=cfg["search.n"],
        horizon=cfg["forecast.horizon"],
        seed=cfg["seed"],
        refit_config=_refit_config(cfg),
        parallelism=cfg["search.parallelism"],
        baseline=baseline,
        progress=_progress("optimize"),
    )
    print(
        f"[optimize] {len(report.evaluations)} designs evaluated in "
        f"{time.monotonic() - started:.1f}s",
        file=sys.stderr,
        flush=True,
    )
    save_search_report(out, report, transects)
    return {
        "final_qd": f"{report.final.qd:.17g}",
        "best_random_qd": f"{report.best_random.qd:.17g}",
        "improvement": f"{report.improvement:.17g}",
        "designs_evaluated": str(len(report.evaluations)),
        "failures": str(len(report.failures)),
    }


def _text_histogram(values, highlight, bins=10, width=40) -> list[str]:
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    top = max(int(counts.max()), 1)
    lines = []
    for b in range(bins):
        bar = "#" * int(round(width * counts[b] / top))
        mark = " <- final" if edges[b] <= highlight <= edges[b + 1] else ""
        lines.append(f"[{edges[b]:12.2f}, {edges[b + 1]:12.2f}) {counts[b]:4d} {bar}{mark}")
    return lines


def _cmd_report(cfg: RunConfig, out: Path) -> dict:
    search_dir = Path(cfg["paths.search"])
    grid = read_grid(cfg["paths.grid"])
    transects = enumerate_transects(grid, cfg["search.transect_axis"])
    trajectory = (search_dir / "trajectory.txt").read_text().splitlines()[1:]
    final_meta = {}
    for line in (search_dir / "final_design.txt").read_text().splitlines():
        key, _, value = line.partition(" = ")
        final_meta[key.strip()] = value.strip()
    random_qd = [
        float(parts[2]) for parts in (ln.split() for ln in trajectory) if parts[0] == "random"
    ]
    exchange_qd = [
        float(parts[2]) for parts in (ln.split() for ln in trajectory) if parts[0] == "exchange"
    ]
    final_qd = float(final_meta["qd"])
    members = [int(t) for t in final_meta["members"].split(",")] if final_meta["members"] != "-" else []
    selected_rows = {transects.transects[t].row for t in members}

    lines = [
        "survey design search report",
        "===========================",
        "",
        f"random designs evaluated : {len(random_qd)}",
        f"mean random qd           : {np.mean(random_qd):.2f}" if random_qd else "mean random qd           : n/a",
        f"best random qd           : {min(random_qd):.2f}" if random_qd else "best random qd           : n/a",
        f"accepted exchanges       : {max(len(exchange_qd) - 1, 0)}",
        f"final qd                 : {final_qd:.2f}",
        f"improvement vs mean      : {float(final_meta.get('improvement', 'nan')) * 100:.1f}%",
        "",
        "qd histogram (random designs, final marked)",
    ]
    if random_qd:
        lines.extend(_text_histogram(random_qd, final_qd))
    lines.append("")
    lines.append("design map ('#' selected transect, '~' water, '.' land)")
    for r in range(grid.nrows):
        row = "".join(
            ("#" if r in selected_rows else "~") if grid.active[r, c] else "."
            for c in range(grid.ncols)
        )
        lines.append(f"{r:3d} {row}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    return {"final_qd": f"{final_qd:.17g}"}


_COMMANDS = {
    "synth": _cmd_synth,
    "fit": _cmd_fit,
    "diagnose": _cmd_diagnose,
    "forecast": _cmd_forecast,
    "evaluate": _cmd_evaluate,
    "optimize": _cmd_optimize,
    "report": _cmd_report,
}


def run_command(verb: str, cfg: RunConfig, out_dir) -> int:
    """Execute one verb; artifacts land in ``out_dir``, plus a manifest."""
    if verb not in _COMMANDS:
        raise ConfigError(f"unknown verb {verb!r}")
    inputs = _validate_inputs(cfg, verb)
    out = Path(out_dir)
    created = not out.exists()
    if created:
        out.mkdir(parents=True)
    elif not out.is_dir():
        raise ConfigError(f"output path {out} is not a directory")
    elif any(out.iterdir()):
        raise ConfigError(f"output directory {out} is not empty")
    try:
        results = _COMMANDS[verb](cfg, out)
        _write_manifest(out, verb, cfg, inputs, results)
    except BaseException:
        if created:
            shutil.rmtree(out, ignore_errors=True)
        else:
            for child in out.iterdir():
                if child.is_dir():
                    shutil.rmtree(child, ignore_errors=True)
                else:
                    child.unlink(missing_ok=True)
        raise
    return 0


def _apply_env_overrides(cfg: RunConfig, environ) -> RunConfig:
    overrides = {}
    if "SPREADDESIGN_PARALLELISM" in environ:
        try:
            overrides["search.parallelism"] = int(environ["SPREADDESIGN_PARALLELISM"])
        except ValueError as exc:
            raise ConfigError("SPREADDESIGN_PARALLELISM must be an integer") from exc
    if "SPREADDESIGN_OUTPUT" in environ:
        overrides["paths.output"] = environ["SPREADDESIGN_OUTPUT"]
    return cfg.replace(**overrides) if overrides else cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="spreaddesign",
        description="Survey design pipeline for spreading populations",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="config file")
        p.add_argument("--out", default=None, help="output directory (overrides paths.output)")
    p = sub.add_parser("rerun")
    p.add_argument("manifest", help="manifest.txt from a previous run")
    p.add_argument("--out", default=None, help="output directory")

    args = parser.parse_args(argv)
    import os

    try:
        if args.verb == "rerun":
            cfg = read_config(args.manifest)
            verb = cfg.manifest.get("verb")
            if verb not in _COMMANDS:
                raise ConfigError(f"manifest does not name a rerunnable verb: {verb!r}")
            i = 0
            while f"input.{i}" in cfg.manifest:
                path = Path(cfg.manifest[f"input.{i}"])
                recorded = cfg.manifest.get(f"digest.{i}", "")
                if not path.exists():
                    raise ConfigError(f"manifest input missing: {path}")
                if _digest_path(path) != recorded:
                    raise ConfigError(f"manifest input changed since the recorded run: {path}")
                i += 1
        else:
            cfg = read_config(args.config)
            verb = args.verb
        cfg = _apply_env_overrides(cfg, os.environ)
        out = os.environ.get("SPREADDESIGN_OUTPUT") or args.out or cfg["paths.output"]
        return run_command(verb, cfg, out)
    except (ConfigError, DomainError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
