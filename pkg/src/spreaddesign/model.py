"""Three-level hierarchical model: Binomial detection over latent Poisson
abundance driven by the deterministic diffusion process.

Data level:     y_t(s_i) ~ Binomial(n_t(s_i), phi) at surveyed cells
Process level:  n_t(s_i) ~ Poisson(u_t(s_i)); u evolves by the propagator
                from a scaled Gaussian-kernel initial condition
Parameter level: phi ~ Beta(1,1); beta ~ Normal(0, 1.5^2 I);
                alpha ~ Normal(0, 1.5^2); kappa ~ Normal+(5, 0.001);
                tau ~ Normal+(500, 10)

The positive-parameter priors are zero-truncated normals; their second
argument is read as a variance by default (``scale_is_sd`` switches to
standard deviation). Both conjugate conditionals used by the sampler
live here: the latent abundance n given (y, u, phi) is y plus a
Poisson(u (1 - phi)) remainder at surveyed cells and a plain Poisson(u)
draw elsewhere, and phi given (y, n) is Beta(1 + sum y, 1 + sum(n - y)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import gammaln, log_ndtr

from .diffusion import (
    GrowthModel,
    build_propagator,
    initial_condition,
    motility_field,
    stability_check,
    step_field,
)
from .domain import CovariateRaster, Grid
from .errors import DataFormatError, DomainError, NumericError, StabilityError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Theta:
    """One parameter point: detection, motility and growth coefficients,
    and the initial-kernel mass/spread."""

    phi: float
    beta: np.ndarray
    alpha: np.ndarray
    tau: float
    kappa: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        object.__setattr__(self, "alpha", np.atleast_1d(np.asarray(self.alpha, dtype=float)))

    def replace(self, **kwargs) -> "Theta":
        return replace(self, **kwargs)


@dataclass
class ModelSpec:
    """Model structure and priors tied to a grid.

    Attributes:
        grid: Spatial domain.
        X: (q, p) motility design matrix, first column all ones.
        W: (q, pw) growth design matrix (intercept-only by default).
        epicenter: Planar (x, y) coordinates of the initial kernel center.
        growth: "none", "malthusian", or "logistic".
        boundary: "absorbing" or "reflecting".
        substeps: Propagator steps per observation interval (dt = 1/substeps).
        kappa_eq: Equilibrium density per cell (logistic growth only).
        aux_detection: Optional (successes, trials) from an independent
            detection study, added to the phi conditional.
    """

    grid: Grid
    X: np.ndarray
    W: np.ndarray = None
    epicenter: tuple[float, float] = (0.0, 0.0)
    growth: str = "malthusian"
    boundary: str = "absorbing"
    substeps: int = 16
    beta_sd: float = 1.5
    alpha_sd: float = 1.5
    tau_mean: float = 500.0
    tau_scale: float = 10.0
    kappa_mean: float = 5.0
    kappa_scale: float = 0.001
    scale_is_sd: bool = False
    phi_prior: tuple[float, float] = (1.0, 1.0)
    kappa_eq: np.ndarray | None = None
    aux_detection: tuple[int, int] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] != self.grid.q:
            raise DomainError(f"X must be (q, p) with q={self.grid.q}")
        if not np.allclose(self.X[:, 0], 1.0):
            raise DomainError("first column of X must be the intercept (all ones)")
        if self.W is None:
            self.W = np.ones((self.grid.q, 1))
        self.W = np.asarray(self.W, dtype=float)
        if self.W.ndim != 2 or self.W.shape[0] != self.grid.q:
            raise DomainError(f"W must be (q, pw) with q={self.grid.q}")
        for name in ("beta_sd", "alpha_sd", "tau_scale", "kappa_scale"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        if self.substeps < 1:
            raise DomainError("substeps must be >= 1")
        if self.growth == "logistic" and self.kappa_eq is None:
            raise DomainError("logistic growth requires kappa_eq")
        if self.aux_detection is not None:
            s, t = self.aux_detection
            if not (0 <= s <= t):
                raise DomainError("aux detection needs 0 <= successes <= trials")

    @property
    def p_beta(self) -> int:
        return self.X.shape[1]

    @property
    def p_alpha(self) -> int:
        return self.W.shape[1]

    @property
    def dt(self) -> float:
        return 1.0 / self.substeps

    @property
    def tau_sd(self) -> float:
        return self.tau_scale if self.scale_is_sd else math.sqrt(self.tau_scale)

    @property
    def kappa_sd(self) -> float:
        return self.kappa_scale if self.scale_is_sd else math.sqrt(self.kappa_scale)

    def growth_model(self, theta: Theta) -> GrowthModel:
        if self.growth == "none":
            return GrowthModel("none")
        gamma = self.W @ theta.alpha
        return GrowthModel(self.growth, gamma, self.kappa_eq)

    def init_theta(self) -> Theta:
        return Theta(
            phi=0.5,
            beta=np.zeros(self.p_beta),
            alpha=np.zeros(self.p_alpha),
            tau=truncated_normal_mean(self.tau_mean, self.tau_sd),
            kappa=truncated_normal_mean(self.kappa_mean, self.kappa_sd),
        )


def design_matrix(grid: Grid, covariates: list[CovariateRaster]) -> np.ndarray:
    """Stack an intercept and covariates into the motility design matrix.

    Continuous covariates are standardized over active cells; indicators
    enter as-is.
    """
    cols = [np.ones(grid.q)]
    for cov in covariates:
        if cov.values.shape[0] != grid.q:
            raise DomainError(f"covariate {cov.name!r} length does not match grid")
        cols.append(cov.standardized().values)
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# Survey data


@dataclass(frozen=True)
class SurveyData:
    """Counts at surveyed cells, by integer survey year.

    cells[year] holds sorted active-cell indices; counts[year] the
    matching nonnegative counts (zeros are real observations).
    """

    years: tuple[int, ...]
    cells: Mapping[int, np.ndarray]
    counts: Mapping[int, np.ndarray]

    def __post_init__(self):
        years = tuple(int(y) for y in self.years)
        if any(b <= a for a, b in zip(years, years[1:])):
            raise DomainError("survey years must be strictly increasing")
        cells = {}
        counts = {}
        for year in years:
            c = np.asarray(self.cells[year], dtype=np.int64)
            y = np.asarray(self.counts[year], dtype=np.int64)
            if c.shape != y.shape:
                raise DomainError(f"cells/counts mismatch in year {year}")
            if c.size and np.unique(c).size != c.size:
                raise DomainError(f"duplicate surveyed cells in year {year}")
            if np.any(y < 0):
                raise DomainError(f"negative count in year {year}")
            order = np.argsort(c)
            cells[year] = c[order]
            counts[year] = y[order]
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "counts", counts)

    @property
    def n_observations(self) -> int:
        return int(sum(self.cells[y].size for y in self.years))

    def validate_against(self, grid: Grid):
        for year in self.years:
            c = self.cells[year]
            if c.size and (c.min() < 0 or c.max() >= grid.q):
                raise DomainError(f"survey year {year} references cells outside the grid")


@dataclass(frozen=True)
class LatentState:
    """Latent abundance per active cell for each covered year."""

    n: Mapping[int, np.ndarray]

    def __post_init__(self):
        n = {}
        for year, vec in self.n.items():
            arr = np.asarray(vec, dtype=np.int64)
            if np.any(arr < 0):
                raise DomainError(f"negative latent abundance in year {year}")
            n[int(year)] = arr
        object.__setattr__(self, "n", n)


def read_survey_file(path, grid: Grid) -> SurveyData:
    """Read the survey text format.

    Line 1: ``years y1 y2 ...``; every following nonempty line is a record
    ``year row col count``. Records on inactive cells or outside the
    declared year list are rejected.
    """
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines or lines[0].split()[0] != "years":
        raise DataFormatError(f"{path}: first line must be 'years y1 y2 ...'")
    try:
        years = [int(tok) for tok in lines[0].split()[1:]]
    except ValueError as exc:
        raise DataFormatError(f"{path}: bad year list") from exc
    if not years:
        raise DataFormatError(f"{path}: empty year list")
    cells: dict[int, list[int]] = {y: [] for y in years}
    counts: dict[int, list[int]] = {y: [] for y in years}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 4:
            raise DataFormatError(f"{path}:{lineno}: record must be 'year row col count'")
        try:
            year, row, col, count = (int(p) for p in parts)
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: non-integer record") from exc
        if year not in cells:
            raise DataFormatError(f"{path}:{lineno}: year {year} not in declared list")
        if not (0 <= row < grid.nrows and 0 <= col < grid.ncols):
            raise DataFormatError(f"{path}:{lineno}: cell ({row}, {col}) outside grid")
        cell = int(grid.cell_index[row, col])
        if cell < 0:
            raise DataFormatError(f"{path}:{lineno}: count on inactive cell ({row}, {col})")
        if count < 0:
            raise DataFormatError(f"{path}:{lineno}: negative count")
        cells[year].append(cell)
        counts[year].append(count)
    data = SurveyData(
        tuple(years),
        {y: np.array(cells[y], dtype=np.int64) for y in years},
        {y: np.array(counts[y], dtype=np.int64) for y in years},
    )
    data.validate_against(grid)
    return data


def write_survey_file(path, grid: Grid, data: SurveyData):
    lines = ["years " + " ".join(str(y) for y in data.years)]
    for year in data.years:
        for cell, count in zip(data.cells[year], data.counts[year]):
            r, c = grid.cells_rc[cell]
            lines.append(f"{year} {r} {c} {count}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Densities


def poisson_logpmf(n, lam) -> np.ndarray:
    """Elementwise log Poisson pmf; lam == 0 is a point mass at n == 0."""
    n = np.asarray(n, dtype=float)
    lam = np.asarray(lam, dtype=float)
    n, lam = np.broadcast_arrays(n, lam)
    out = np.full(n.shape, -np.inf)
    pos = lam > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(pos, n * np.log(np.where(pos, lam, 1.0)) - lam - gammaln(n + 1.0), out)
    out = np.where((lam == 0) & (n == 0), 0.0, out)
    return np.where(n < 0, -np.inf, out)


def binomial_logpmf(y, n, phi: float) -> np.ndarray:
    """Elementwise log Binomial(n, phi) pmf at y, with exact 0/1 edges."""
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    y, n = np.broadcast_arrays(y, n)
    invalid = (y < 0) | (y > n)
    if phi <= 0.0:
        out = np.where(y == 0, 0.0, -np.inf)
    elif phi >= 1.0:
        out = np.where(y == n, 0.0, -np.inf)
    else:
        out = (
            gammaln(n + 1.0)
            - gammaln(y + 1.0)
            - gammaln(n - y + 1.0)
            + y * math.log(phi)
            + (n - y) * math.log1p(-phi)
        )
    return np.where(invalid, -np.inf, out)


def _normal_logpdf(x, mean, sd):
    z = (np.asarray(x, dtype=float) - mean) / sd
    return -0.5 * LOG_2PI - math.log(sd) - 0.5 * z * z


def truncated_normal_logpdf(x: float, mean: float, sd: float) -> float:
    """Log density of Normal(mean, sd^2) truncated to (0, inf)."""
    if x <= 0:
        return -np.inf
    return float(_normal_logpdf(x, mean, sd) - log_ndtr(mean / sd))


def truncated_normal_mean(mean: float, sd: float) -> float:
    """Mean of Normal(mean, sd^2) truncated to (0, inf)."""
    z = mean / sd
    log_phi = -0.5 * LOG_2PI - 0.5 * z * z
    return mean + sd * math.exp(log_phi - log_ndtr(z))


def log_prior(theta: Theta, spec: ModelSpec) -> float:
    """Sum of log prior densities; -inf outside the support (never NaN)."""
    if not (0.0 < theta.phi < 1.0) or theta.tau <= 0 or theta.kappa <= 0:
        return -np.inf
    if not (np.all(np.isfinite(theta.beta)) and np.all(np.isfinite(theta.alpha))):
        return -np.inf
    a, b = spec.phi_prior
    lp = (
        (a - 1.0) * math.log(theta.phi)
        + (b - 1.0) * math.log1p(-theta.phi)
        - (gammaln(a) + gammaln(b) - gammaln(a + b))
    )
    lp += float(np.sum(_normal_logpdf(theta.beta, 0.0, spec.beta_sd)))
    if spec.growth != "none":
        lp += float(np.sum(_normal_logpdf(theta.alpha, 0.0, spec.alpha_sd)))
    lp += truncated_normal_logpdf(theta.tau, spec.tau_mean, spec.tau_sd)
    lp += truncated_normal_logpdf(theta.kappa, spec.kappa_mean, spec.kappa_sd)
    return float(lp)


def complete_data_loglik(
    data: SurveyData,
    latent: LatentState,
    u_by_year: Mapping[int, np.ndarray],
    phi: float,
) -> float:
    """Joint log density of counts and latent abundance given intensities.

    Binomial(y | n, phi) over surveyed cells plus Poisson(n | u) over all
    active cells for every year present in the latent state. Any support
    violation (n < y, u == 0 with n > 0) yields -inf.
    """
    total = 0.0
    for year, n_full in latent.n.items():
        u = np.asarray(u_by_year[year], dtype=float)
        if np.any(u < 0):
            return -np.inf
        term = poisson_logpmf(n_full, u).sum()
        if not np.isfinite(term):
            return -np.inf
        total += term
    for year in data.years:
        if year not in latent.n:
            continue
        cells = data.cells[year]
        y = data.counts[year]
        n_at = latent.n[year][cells]
        if np.any(n_at < y):
            return -np.inf
        term = binomial_logpmf(y, n_at, phi).sum()
        if not np.isfinite(term):
            return -np.inf
        total += term
    return float(total)


# ---------------------------------------------------------------------------
# Conjugate conditionals


def sample_latent_n(
    y: np.ndarray,
    u: np.ndarray,
    phi: float,
    rng: np.random.Generator,
    observed: np.ndarray | None = None,
) -> np.ndarray:
    """Exact conditional draw of latent abundance for one time slice.

    At surveyed cells, n = y + Poisson(u (1 - phi)); at unsurveyed active
    cells, n ~ Poisson(u). ``observed`` is a boolean mask over cells
    (default: all observed). ``y`` is ignored where not observed.
    """
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if observed is None:
        observed = np.ones(u.shape, dtype=bool)
    if phi <= 0.0 or phi > 1.0:
        raise DomainError("sample_latent_n requires 0 < phi <= 1")
    n = rng.poisson(np.where(observed, u * (1.0 - phi), u))
    return np.where(observed, y + n, n).astype(np.int64)


def sample_phi(
    data: SurveyData,
    latent: LatentState,
    rng: np.random.Generator,
    prior: tuple[float, float] = (1.0, 1.0),
    aux_detection: tuple[int, int] | None = None,
) -> float:
    """Conjugate Beta draw for detection probability given (y, n)."""
    sum_y = 0
    sum_miss = 0
    for year in data.years:
        if year not in latent.n:
            continue
        cells = data.cells[year]
        y = data.counts[year]
        n_at = latent.n[year][cells]
        if np.any(n_at < y):
            raise DomainError("latent abundance below observed count")
        sum_y += int(y.sum())
        sum_miss += int((n_at - y).sum())
    if aux_detection is not None:
        sum_y += aux_detection[0]
        sum_miss += aux_detection[1] - aux_detection[0]
    return float(rng.beta(prior[0] + sum_y, prior[1] + sum_miss))


# ---------------------------------------------------------------------------
# Deterministic process trajectory


def intensity_trajectory(spec: ModelSpec, theta: Theta, years) -> np.ndarray:
    """Intensity fields at the requested years for one parameter point.

    The field at the first year is the Gaussian-kernel initial condition;
    later years follow by (gap * substeps) propagator steps. Returns an
    array of shape (len(years), q).

    Raises:
        StabilityError: theta violates the explicit-step bound.
        NumericError: motility overflow or non-finite intensities.
    """
    years = [int(y) for y in years]
    if any(b <= a for a, b in zip(years, years[1:])):
        raise DomainError("years must be strictly increasing")
    mu = motility_field(spec.X, theta.beta)
    growth = spec.growth_model(theta)
    report = stability_check(mu, spec.dt, spec.grid.cell_size, growth)
    if not report.stable:
        raise StabilityError(
            f"parameters violate the stability bound (max_dt={report.max_dt:.6g})"
        )
    prop = build_propagator(mu, growth, spec.dt, spec.grid, spec.boundary, check_stability=False)
    u0 = initial_condition(theta.tau, theta.kappa, spec.epicenter, spec.grid)
    out = np.empty((len(years), spec.grid.q))
    out[0] = u0.u
    for i in range(1, len(years)):
        gap = years[i] - years[i - 1]
        out[i] = step_field(prop, out[i - 1], gap * spec.substeps)
    return out
