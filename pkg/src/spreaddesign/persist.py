"""On-disk artifact formats.

Posterior directory layout::

    chain_<c>.txt        one row per retained draw: iteration, log_post,
                         then the scalar parameters named in the header
    u_fields.npy         (Ku, Y, q) archived intensity fields
    u_years.npy          (Y,) years matching the field axis
    u_draw_index.npy     (Ku,) retained-draw index per archived field
    u_totals.npy         (K, Y) per-draw total intensity by year
    imputation_index.npy (K,) imputed-dataset index (refits only)
    sampler.txt          chain configuration, acceptance rates, seed

All text floats use %.17g so a round trip is exact; .npy archives avoid
zip timestamps, keeping every artifact byte-stable for identical runs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .design import SearchReport
from .errors import DataFormatError
from .forecast import ForecastDraws
from .mcmc import ChainConfig, PosteriorSamples

_G = "{:.17g}"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return _G.format(value)
    return str(value)


def save_posterior(out_dir, samples: PosteriorSamples):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["iteration", "log_post"] + list(samples.param_names)
    matrix = samples.scalar_matrix()
    for c in range(samples.config.n_chains):
        mask = samples.chain_id == c
        rows = np.column_stack([samples.iteration[mask], samples.log_post[mask]])
        block = np.column_stack([rows, matrix[mask]])
        lines = [" ".join(header)]
        for row in block:
            lines.append(
                " ".join([str(int(row[0]))] + [_G.format(v) for v in row[1:]])
            )
        (out / f"chain_{c}.txt").write_text("\n".join(lines) + "\n")
    np.save(out / "u_fields.npy", samples.u_fields)
    np.save(out / "u_years.npy", np.array(samples.years, dtype=np.int64))
    np.save(out / "u_draw_index.npy", samples.u_draw_index)
    np.save(out / "u_totals.npy", samples.u_total_by_year)
    if samples.imputation_index is not None:
        np.save(out / "imputation_index.npy", samples.imputation_index)
    cfg = samples.config
    lines = [
        f"n_iter = {cfg.n_iter}",
        f"n_burn = {cfg.n_burn}",
        f"n_chains = {cfg.n_chains}",
        f"thin = {cfg.thin}",
        f"u_thin = {cfg.u_thin}",
        f"seed = {cfg.seed}",
        f"adapt = {_fmt(cfg.adapt)}",
        f"prop_scale_beta = {_fmt(cfg.prop_scale_beta)}",
        f"prop_scale_alpha = {_fmt(cfg.prop_scale_alpha)}",
        f"prop_scale_zeta = {_fmt(cfg.prop_scale_zeta)}",
        f"stability_rejects = {samples.stability_rejects}",
    ]
    for name, rate in samples.acceptance.items():
        lines.append(f"acceptance_{name} = {_fmt(float(rate))}")
    (out / "sampler.txt").write_text("\n".join(lines) + "\n")


def _read_kv(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}: expected 'key = value' lines")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_posterior(in_dir) -> PosteriorSamples:
    src = Path(in_dir)
    meta = _read_kv(src / "sampler.txt")
    config = ChainConfig(
        n_iter=int(meta["n_iter"]),
        n_burn=int(meta["n_burn"]),
        n_chains=int(meta["n_chains"]),
        thin=int(meta["thin"]),
        u_thin=int(meta["u_thin"]),
        seed=int(meta["seed"]),
        adapt=meta["adapt"] == "true",
        prop_scale_beta=float(meta["prop_scale_beta"]),
        prop_scale_alpha=float(meta["prop_scale_alpha"]),
        prop_scale_zeta=float(meta["prop_scale_zeta"]),
    )
    chains = []
    param_names: list[str] = []
    for c in range(config.n_chains):
        path = src / f"chain_{c}.txt"
        lines = path.read_text().splitlines()
        if not lines:
            raise DataFormatError(f"{path}: empty chain file")
        header = lines[0].split()
        if header[:2] != ["iteration", "log_post"]:
            raise DataFormatError(f"{path}: bad chain header")
        param_names = header[2:]
        block = np.array([[float(tok) for tok in ln.split()] for ln in lines[1:]])
        chains.append(block)
    block = np.vstack(chains)
    names = param_names
    p_beta = sum(1 for n in names if n.startswith("beta_"))
    p_alpha = sum(1 for n in names if n.startswith("alpha_"))
    col = {name: i + 2 for i, name in enumerate(names)}
    retained = chains[0].shape[0]
    years = tuple(int(y) for y in np.load(src / "u_years.npy"))
    imput = None
    if (src / "imputation_index.npy").exists():
        imput = np.load(src / "imputation_index.npy")
    acceptance = {
        key[len("acceptance_") :]: float(value)
        for key, value in meta.items()
        if key.startswith("acceptance_")
    }
    alpha = (
        block[:, [col[f"alpha_{j}"] for j in range(p_alpha)]]
        if p_alpha
        else np.zeros((block.shape[0], 1))
    )
    return PosteriorSamples(
        seed=config.seed,
        config=config,
        years=years,
        param_names=tuple(names),
        phi=block[:, col["phi"]],
        beta=block[:, [col[f"beta_{j}"] for j in range(p_beta)]],
        alpha=alpha,
        tau=block[:, col["tau"]],
        kappa=block[:, col["kappa"]],
        log_post=block[:, 1],
        chain_id=np.repeat(np.arange(config.n_chains, dtype=np.int64), retained),
        iteration=block[:, 0].astype(np.int64),
        u_total_by_year=np.load(src / "u_totals.npy"),
        u_draw_index=np.load(src / "u_draw_index.npy"),
        u_fields=np.load(src / "u_fields.npy"),
        acceptance=acceptance,
        stability_rejects=int(meta.get("stability_rejects", "0")),
        adapt_log=None,
        imputation_index=imput,
    )


def save_forecast(out_dir, fore: ForecastDraws, grid):
    """Per-draw totals as a columnar table plus the mean field raster."""
    from .domain import format_raster

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["draw total"]
    for k in range(fore.n_draws):
        lines.append(f"{int(fore.draw_index[k])} {_G.format(fore.totals[k])}")
    (out / "totals.txt").write_text("\n".join(lines) + "\n")
    mean_field = fore.u_fields.mean(axis=0)
    (out / "mean_field.txt").write_text(format_raster(grid, mean_field))
    meta = [
        f"year = {fore.year}",
        f"horizon = {fore.horizon}",
        f"draws = {fore.n_draws}",
        f"excluded = {fore.excluded}",
    ]
    (out / "forecast.txt").write_text("\n".join(meta) + "\n")


def save_search_report(out_dir, report: SearchReport, transects):
    """Search table, exchange trajectory, final design, and timings."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def members_str(design):
        return ",".join(str(t) for t in design.members) or "-"

    lines = ["members qd mean_total k_used excluded"]
    for members in sorted(report.evaluations):
        r = report.evaluations[members]
        lines.append(
            f"{members_str(r.design)} {_G.format(r.qd)} {_G.format(r.mean_total)} "
            f"{r.k_used} {r.excluded}"
        )
    (out / "search_table.txt").write_text("\n".join(lines) + "\n")

    lines = ["phase members qd"]
    for r in report.random_results:
        lines.append(f"random {members_str(r.design)} {_G.format(r.qd)}")
    for r in report.trajectory:
        lines.append(f"exchange {members_str(r.design)} {_G.format(r.qd)}")
    (out / "trajectory.txt").write_text("\n".join(lines) + "\n")

    final = report.final
    rows = [transects.transects[t].row for t in final.design.members]
    lines = [
        "members = " + members_str(final.design),
        "rows = " + ",".join(str(r) for r in rows),
        f"qd = {_G.format(final.qd)}",
        f"mean_total = {_G.format(final.mean_total)}",
        f"k_used = {final.k_used}",
        f"passes = {report.passes}",
    ]
    if report.best_random is not None:
        lines.append(f"best_random_qd = {_G.format(report.best_random.qd)}")
    if report.improvement is not None:
        lines.append(f"improvement = {_G.format(report.improvement)}")
    if report.failures:
        lines.append(f"failures = {len(report.failures)}")
    (out / "final_design.txt").write_text("\n".join(lines) + "\n")

    lines = ["members seconds"]
    for members in sorted(report.evaluations):
        r = report.evaluations[members]
        lines.append(f"{members_str(r.design)} {r.seconds:.3f}")
    (out / "timings.txt").write_text("\n".join(lines) + "\n")
