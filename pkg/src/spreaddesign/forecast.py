"""Forecasting, posterior predictive data, and multiple-imputation refits.

The forecast distribution is realized by Monte Carlo composition: every
archived posterior draw (theta, u_T) is propagated forward the requested
number of observation intervals under its own parameters. Posterior
predictive future data follow by the two-step draw n ~ Poisson(u) then
y ~ Binomial(n, phi). A refit conditions the chain on the baseline data
plus one imputed future dataset per iteration (cycling), which is what
makes the refit posterior of total abundance sensitive to which cells a
candidate design would survey.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import build_propagator, motility_field, stability_check, step_field
from .errors import DomainError, NumericError, StabilityError
from .mcmc import ChainConfig, CyclingYear, PosteriorSamples, run_chain
from .model import ModelSpec, SurveyData


@dataclass(frozen=True)
class ForecastDraws:
    """Per-draw forecast fields at the horizon year.

    ``draw_index`` maps each row to the retained draw it came from;
    ``phi`` carries the matching detection draws for predictive sampling.
    """

    year: int
    horizon: int
    u_fields: np.ndarray  # (K, q)
    totals: np.ndarray  # (K,)
    phi: np.ndarray  # (K,)
    draw_index: np.ndarray  # (K,)
    excluded: int = 0

    @property
    def n_draws(self) -> int:
        return int(self.u_fields.shape[0])


@dataclass(frozen=True)
class ImputedDataset:
    """Simulated future survey data, one dataset per forecast draw."""

    year: int
    cells: np.ndarray  # (m,)
    n: np.ndarray  # (K, m)
    y: np.ndarray  # (K, m)
    draw_index: np.ndarray  # (K,)

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64)
        n = np.asarray(self.n, dtype=np.int64)
        y = np.asarray(self.y, dtype=np.int64)
        if np.any(y > n):
            raise DomainError("imputed counts exceed latent abundance")
        for name, arr in (("cells", cells), ("n", n), ("y", y)):
            object.__setattr__(self, name, arr)

    @property
    def n_datasets(self) -> int:
        return int(self.y.shape[0])

    def restrict(self, cells: np.ndarray) -> "ImputedDataset":
        """Restrict the datasets to a subset of this dataset's cells."""
        cells = np.asarray(cells, dtype=np.int64)
        pos = np.searchsorted(self.cells, cells)
        if np.any(pos >= self.cells.size) or np.any(self.cells[pos] != cells):
            raise DomainError("requested cells not covered by the imputed dataset")
        return ImputedDataset(
            self.year, cells, self.n[:, pos], self.y[:, pos], self.draw_index
        )


def total_abundance_intensity(u_fields: np.ndarray) -> np.ndarray:
    """Sum intensity over active cells; last axis is the cell axis."""
    return np.asarray(u_fields, dtype=float).sum(axis=-1)


def forecast(samples: PosteriorSamples, horizon: int, spec: ModelSpec) -> ForecastDraws:
    """Propagate each archived draw ``horizon`` intervals past its last year.

    Draws whose parameters turn unstable or non-finite during the extra
    propagation are excluded and counted; more than 0.1% exclusions is a
    hard error since the fit already enforced stability.
    """
    if horizon < 1:
        raise DomainError("forecast horizon must be >= 1")
    if samples.u_fields.shape[0] == 0:
        raise DomainError("samples carry no archived intensity fields")
    last_year = samples.years[-1]
    target_year = last_year + horizon
    fields = []
    totals = []
    phis = []
    kept_index = []
    excluded = 0
    for row in range(samples.u_fields.shape[0]):
        k = int(samples.u_draw_index[row])
        theta = samples.theta_at(k)
        try:
            mu = motility_field(spec.X, theta.beta)
            growth = spec.growth_model(theta)
            if not stability_check(mu, spec.dt, spec.grid.cell_size, growth).stable:
                raise StabilityError("unstable forecast draw")
            prop = build_propagator(
                mu, growth, spec.dt, spec.grid, spec.boundary, check_stability=False
            )
            u_future = step_field(prop, samples.u_fields[row, -1], horizon * spec.substeps)
        except (StabilityError, NumericError):
            excluded += 1
            continue
        fields.append(u_future)
        totals.append(u_future.sum())
        phis.append(samples.phi[k])
        kept_index.append(k)
    total_rows = samples.u_fields.shape[0]
    if excluded and excluded / total_rows >= 0.001:
        raise NumericError(
            f"{excluded} of {total_rows} forecast draws excluded as unstable"
        )
    return ForecastDraws(
        year=target_year,
        horizon=horizon,
        u_fields=np.array(fields),
        totals=np.array(totals),
        phi=np.array(phis),
        draw_index=np.array(kept_index, dtype=np.int64),
        excluded=excluded,
    )


def posterior_predictive(
    fore: ForecastDraws,
    cells: np.ndarray,
    rng: np.random.Generator,
    phi_draws: np.ndarray | None = None,
) -> ImputedDataset:
    """Two-step predictive draw of future survey data at the given cells.

    For each forecast draw k: n ~ Poisson(u_k) then y ~ Binomial(n, phi_k),
    restricted to ``cells``.
    """
    cells = np.asarray(cells, dtype=np.int64)
    phi = fore.phi if phi_draws is None else np.asarray(phi_draws, dtype=float)
    if phi.shape[0] != fore.n_draws:
        raise DomainError("phi draws must align with forecast draws")
    u = fore.u_fields[:, cells]
    n = rng.poisson(u)
    y = rng.binomial(n, phi[:, None]) if cells.size else np.zeros_like(n)
    return ImputedDataset(fore.year, cells, n, y, fore.draw_index.copy())


def refit_with_imputation(
    data: SurveyData,
    imputed: ImputedDataset,
    spec: ModelSpec,
    config: ChainConfig,
    progress=None,
) -> PosteriorSamples:
    """Refit the model conditioning iteration j on imputed dataset j mod K.

    The imputed year joins the survey years as an observed year; the
    returned samples carry per-draw total intensity at that year (the
    design-criterion input) and record which imputed dataset each
    retained draw conditioned on.
    """
    if imputed.cells.size:
        if imputed.cells.min() < 0 or imputed.cells.max() >= spec.grid.q:
            raise DomainError("imputed cells do not match the model grid")
    cycling = CyclingYear(imputed.year, imputed.cells, imputed.y)
    return run_chain(spec, data, config, cycling=cycling, progress=progress)
