"""Gibbs-within-Metropolis sampler for the hierarchical diffusion model.

Exact conditional draws handle detection (Beta) and latent abundance
(shifted Poisson); three adaptive random-walk blocks handle the motility
coefficients (beta, jointly), the growth coefficients (alpha), and the
initial-condition parameters (log tau, log kappa, jointly). Every block
proposal triggers a full deterministic re-propagation of the intensity
trajectory; proposals that violate the explicit-step stability bound are
rejected and counted. Latent abundance at unsurveyed cells and years
integrates out of the Poisson level analytically, so the chain state
carries n only at surveyed cells; the theta updates therefore condition
on exactly the surveyed-cell Poisson terms.

Random-walk scales follow Robbins-Monro adaptation toward 0.44 (scalar
blocks) or 0.234 (multivariate blocks) during burn-in only, with an
empirical-covariance proposal for the multivariate blocks; all scales
freeze at the end of burn-in and the full scale trajectory is logged.

A refit variant cycles an extra surveyed year through a stack of imputed
future datasets, using dataset (iteration mod K) on each iteration; the
dataset index used at every retained draw is recorded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import DomainError, NumericError, StabilityError
from .model import (
    LatentState,
    ModelSpec,
    SurveyData,
    Theta,
    binomial_logpmf,
    intensity_trajectory,
    log_prior,
    poisson_logpmf,
)
from .seeding import substream

BLOCKS = ("beta", "alpha", "zeta")


@dataclass
class ChainConfig:
    """Sampler configuration.

    Defaults mirror the production setup: 20,000 draws per chain, 5,000
    burn-in, two chains, no thinning. ``u_thin`` controls how often full
    intensity fields are archived among retained draws (totals are kept
    for every retained draw).
    """

    n_iter: int = 20000
    n_burn: int = 5000
    n_chains: int = 2
    thin: int = 1
    u_thin: int = 10
    seed: int = 0
    adapt: bool = True
    prop_scale_beta: float = 0.1
    prop_scale_alpha: float = 0.1
    prop_scale_zeta: float = 0.01
    freeze_blocks: bool = False
    init_overrides: dict | None = None

    def __post_init__(self):
        if self.n_iter <= 0 or not (0 <= self.n_burn < self.n_iter):
            raise DomainError("need 0 <= n_burn < n_iter")
        if self.n_chains < 1:
            raise DomainError("n_chains must be >= 1")
        if self.thin < 1 or (self.n_iter - self.n_burn) % self.thin:
            raise DomainError("thin must divide n_iter - n_burn")
        if self.u_thin < 1:
            raise DomainError("u_thin must be >= 1")
        for name in ("prop_scale_beta", "prop_scale_alpha", "prop_scale_zeta"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")

    @property
    def retained_per_chain(self) -> int:
        return (self.n_iter - self.n_burn) // self.thin

    @property
    def n_retained(self) -> int:
        return self.n_chains * self.retained_per_chain


@dataclass
class PosteriorSamples:
    """Retained draws from one or more chains, plus diagnostics.

    Scalar parameter draws cover every retained iteration; full intensity
    fields are archived for every ``u_thin``-th retained draw
    (``u_draw_index`` maps archive rows to retained-draw indices).
    """

    seed: int
    config: ChainConfig
    years: tuple[int, ...]
    param_names: tuple[str, ...]
    phi: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    tau: np.ndarray
    kappa: np.ndarray
    log_post: np.ndarray
    chain_id: np.ndarray
    iteration: np.ndarray
    u_total_by_year: np.ndarray
    u_draw_index: np.ndarray
    u_fields: np.ndarray
    acceptance: dict = field(default_factory=dict)
    stability_rejects: int = 0
    adapt_log: dict | None = None
    imputation_index: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return int(self.phi.shape[0])

    def scalar_matrix(self) -> np.ndarray:
        cols = [self.phi[:, None], self.beta]
        if "alpha_0" in self.param_names:
            cols.append(self.alpha)
        cols.extend([self.tau[:, None], self.kappa[:, None]])
        return np.hstack(cols)

    def per_chain(self, values: np.ndarray) -> list[np.ndarray]:
        """Split a (K, ...) array into per-chain arrays in iteration order."""
        return [values[self.chain_id == c] for c in range(self.config.n_chains)]

    def theta_at(self, k: int) -> Theta:
        return Theta(
            phi=float(self.phi[k]),
            beta=self.beta[k],
            alpha=self.alpha[k],
            tau=float(self.tau[k]),
            kappa=float(self.kappa[k]),
        )


@dataclass(frozen=True)
class CyclingYear:
    """Extra surveyed year whose data cycle through imputed datasets."""

    year: int
    cells: np.ndarray
    y_matrix: np.ndarray  # (K_imputed, len(cells))

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64)
        y = np.asarray(self.y_matrix, dtype=np.int64)
        if y.ndim != 2 or y.shape[1] != cells.size:
            raise DomainError("imputed dataset stack must be (K, len(cells))")
        if y.shape[0] < 1:
            raise DomainError("need at least one imputed dataset")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "y_matrix", y)


class _AdaptiveBlock:
    """Random-walk proposal with Robbins-Monro scale and empirical covariance."""

    def __init__(self, dim: int, scale: float, target: float, adapt: bool):
        self.dim = dim
        self.log_scale = math.log(scale)
        self.target = target
        self.adapt = adapt
        self.frozen = not adapt
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))
        self.chol = np.eye(dim)

    def propose_step(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.dim)
        return math.exp(self.log_scale) * (self.chol @ z)

    def record(self, value: np.ndarray, accept_prob: float, iteration: int):
        if self.frozen:
            return
        self.log_scale += (iteration + 1) ** -0.6 * (accept_prob - self.target)
        self.log_scale = min(max(self.log_scale, -20.0), 20.0)
        if self.dim > 1:
            self.count += 1
            delta = value - self.mean
            self.mean += delta / self.count
            self.m2 += np.outer(delta, value - self.mean)
            if self.count >= 100 and self.count % 25 == 0:
                cov = self.m2 / (self.count - 1) + 1e-10 * np.eye(self.dim)
                try:
                    self.chol = np.linalg.cholesky(cov)
                except np.linalg.LinAlgError:
                    pass

    def freeze(self):
        self.frozen = True

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)


class _Workspace:
    """Precomputed per-fit data layout shared by all chains."""

    def __init__(self, spec: ModelSpec, data: SurveyData, cycling: CyclingYear | None):
        data.validate_against(spec.grid)
        self.spec = spec
        self.data = data
        self.cycling = cycling
        years = list(data.years)
        if cycling is not None:
            if years and cycling.year <= years[-1]:
                raise DomainError("imputed year must follow the last survey year")
            if cycling.cells.size and (
                cycling.cells.min() < 0 or cycling.cells.max() >= spec.grid.q
            ):
                raise DomainError("imputed design cells outside the grid")
            years.append(cycling.year)
        if not years:
            raise DomainError("survey data must declare at least one year")
        self.years = tuple(years)
        self.year_row = {year: i for i, year in enumerate(self.years)}
        self.obs_cells = {year: data.cells[year] for year in data.years}
        self.base_counts = {year: data.counts[year] for year in data.years}
        if cycling is not None:
            self.obs_cells[cycling.year] = cycling.cells

    def observed_years(self) -> list[int]:
        return [y for y in self.years if self.obs_cells.get(y, np.empty(0)).size > 0]

    def trajectory(self, theta: Theta) -> np.ndarray | None:
        """Intensity fields over all years, or None when the proposal is
        unstable or numerically invalid."""
        try:
            return intensity_trajectory(self.spec, theta, self.years)
        except (StabilityError, NumericError):
            return None

    def obs_core(self, traj: np.ndarray, n_by_year: Mapping[int, np.ndarray]) -> float:
        """Poisson kernel sum(n log u - u) over surveyed cells (gammaln-free)."""
        total = 0.0
        for year in self.observed_years():
            u = traj[self.year_row[year]][self.obs_cells[year]]
            n = n_by_year[year]
            total -= float(u.sum())
            pos = n > 0
            if np.any(pos):
                u_pos = u[pos]
                if np.any(u_pos <= 0.0):
                    return -np.inf
                total += float((n[pos] * np.log(u_pos)).sum())
        return total

    def full_log_post(
        self,
        traj: np.ndarray,
        n_by_year: Mapping[int, np.ndarray],
        y_by_year: Mapping[int, np.ndarray],
        theta: Theta,
    ) -> float:
        total = log_prior(theta, self.spec)
        for year in self.observed_years():
            u = traj[self.year_row[year]][self.obs_cells[year]]
            n = n_by_year[year]
            total += float(poisson_logpmf(n, u).sum())
            total += float(binomial_logpmf(y_by_year[year], n, theta.phi).sum())
        return float(total)


def _init_theta(spec: ModelSpec, config: ChainConfig) -> Theta:
    theta = spec.init_theta()
    if config.init_overrides:
        fields = {}
        for name in ("phi", "beta", "alpha", "tau", "kappa"):
            if name in config.init_overrides:
                fields[name] = config.init_overrides[name]
        theta = theta.replace(**fields)
    return theta


def _run_single_chain(
    spec: ModelSpec,
    ws: _Workspace,
    config: ChainConfig,
    chain_id: int,
    progress: Callable | None,
):
    rng = substream(config.seed, "chain", chain_id)
    theta = _init_theta(spec, config)
    traj = ws.trajectory(theta)
    if traj is None:
        raise NumericError("initialization failed: unstable or non-finite trajectory")

    cyc = ws.cycling
    n_imputed = cyc.y_matrix.shape[0] if cyc is not None else 0
    y_by_year: dict[int, np.ndarray] = dict(ws.base_counts)
    if cyc is not None:
        y_by_year[cyc.year] = cyc.y_matrix[0]

    obs_years = ws.observed_years()
    n_by_year = {year: y_by_year[year].copy() for year in obs_years}

    lp = ws.full_log_post(traj, n_by_year, y_by_year, theta)
    if not np.isfinite(lp):
        raise NumericError("non-finite log-posterior at initialization")

    sample_alpha = spec.growth != "none"
    blocks = {
        "beta": _AdaptiveBlock(spec.p_beta, config.prop_scale_beta, 0.234 if spec.p_beta > 1 else 0.44, config.adapt),
        "alpha": _AdaptiveBlock(spec.p_alpha, config.prop_scale_alpha, 0.234 if spec.p_alpha > 1 else 0.44, config.adapt),
        "zeta": _AdaptiveBlock(2, config.prop_scale_zeta, 0.234, config.adapt),
    }
    accept_counts = {name: [0, 0] for name in BLOCKS}  # [burn, post]
    proposal_counts = {name: [0, 0] for name in BLOCKS}
    stability_rejects = 0
    adapt_log = {name: np.empty(config.n_iter) for name in BLOCKS}

    retained = config.retained_per_chain
    rec = {
        "phi": np.empty(retained),
        "beta": np.empty((retained, spec.p_beta)),
        "alpha": np.empty((retained, spec.p_alpha)),
        "tau": np.empty(retained),
        "kappa": np.empty(retained),
        "log_post": np.empty(retained),
        "iteration": np.empty(retained, dtype=np.int64),
        "u_totals": np.empty((retained, len(ws.years))),
        "imputation": np.empty(retained, dtype=np.int64),
    }
    u_rows = []
    u_row_retained = []

    core = ws.obs_core(traj, n_by_year)
    lprior = log_prior(theta, spec)
    progress_every = max(1, config.n_iter // 20)

    for it in range(config.n_iter):
        if it == config.n_burn:
            for block in blocks.values():
                block.freeze()

        k_imp = it % n_imputed if n_imputed else -1
        if cyc is not None:
            y_by_year[cyc.year] = cyc.y_matrix[k_imp]

        # Latent abundance at surveyed cells: exact shifted-Poisson draw.
        for year in obs_years:
            u_cells = traj[ws.year_row[year]][ws.obs_cells[year]]
            n_by_year[year] = y_by_year[year] + rng.poisson(u_cells * (1.0 - theta.phi))
        core = ws.obs_core(traj, n_by_year)

        # Detection: exact Beta conditional.
        sum_y = sum(int(y_by_year[year].sum()) for year in obs_years)
        sum_miss = sum(int((n_by_year[year] - y_by_year[year]).sum()) for year in obs_years)
        a, b = spec.phi_prior
        if spec.aux_detection is not None:
            sum_y += spec.aux_detection[0]
            sum_miss += spec.aux_detection[1] - spec.aux_detection[0]
        theta = theta.replace(phi=float(rng.beta(a + sum_y, b + sum_miss)))
        lprior = log_prior(theta, spec)

        phase = 0 if it < config.n_burn else 1
        if not config.freeze_blocks:
            for name in BLOCKS:
                if name == "alpha" and not sample_alpha:
                    adapt_log[name][it] = blocks[name].scale
                    continue
                block = blocks[name]
                proposal_counts[name][phase] += 1
                step = block.propose_step(rng)
                if name == "beta":
                    cand = theta.replace(beta=theta.beta + step)
                    cur_jac = cand_jac = 0.0
                    adapt_value = cand.beta
                elif name == "alpha":
                    cand = theta.replace(alpha=theta.alpha + step)
                    cur_jac = cand_jac = 0.0
                    adapt_value = cand.alpha
                else:
                    z = np.array([math.log(theta.tau), math.log(theta.kappa)]) + step
                    cand = theta.replace(tau=float(np.exp(z[0])), kappa=float(np.exp(z[1])))
                    cur_jac = math.log(theta.tau) + math.log(theta.kappa)
                    cand_jac = float(z.sum())
                    adapt_value = z
                cand_prior = log_prior(cand, spec)
                if not np.isfinite(cand_prior):
                    block.record(adapt_value, 0.0, it)
                    adapt_log[name][it] = block.scale
                    continue
                cand_traj = ws.trajectory(cand)
                if cand_traj is None:
                    stability_rejects += 1
                    block.record(adapt_value, 0.0, it)
                    adapt_log[name][it] = block.scale
                    continue
                cand_core = ws.obs_core(cand_traj, n_by_year)
                log_r = (cand_core + cand_prior + cand_jac) - (core + lprior + cur_jac)
                aprob = min(1.0, math.exp(min(log_r, 0.0)))
                if rng.random() < aprob:
                    theta, traj, core, lprior = cand, cand_traj, cand_core, cand_prior
                    accept_counts[name][phase] += 1
                block.record(adapt_value, aprob, it)
                adapt_log[name][it] = block.scale
        else:
            for name in BLOCKS:
                adapt_log[name][it] = blocks[name].scale

        if it >= config.n_burn and (it - config.n_burn) % config.thin == 0:
            r = (it - config.n_burn) // config.thin
            rec["phi"][r] = theta.phi
            rec["beta"][r] = theta.beta
            rec["alpha"][r] = theta.alpha
            rec["tau"][r] = theta.tau
            rec["kappa"][r] = theta.kappa
            rec["log_post"][r] = ws.full_log_post(traj, n_by_year, y_by_year, theta)
            rec["iteration"][r] = it
            rec["u_totals"][r] = traj.sum(axis=1)
            rec["imputation"][r] = k_imp
            if r % config.u_thin == 0:
                u_rows.append(traj.copy())
                u_row_retained.append(r)

        if progress is not None and (it + 1) % progress_every == 0:
            progress(chain_id, it + 1, config.n_iter)

    # Reported rates cover post-burn-in proposals only (frozen scales).
    acceptance = {
        name: (
            accept_counts[name][1] / proposal_counts[name][1]
            if proposal_counts[name][1]
            else float("nan")
        )
        for name in BLOCKS
    }
    return {
        "rec": rec,
        "u_rows": u_rows,
        "u_row_retained": u_row_retained,
        "acceptance": acceptance,
        "stability_rejects": stability_rejects,
        "adapt_log": adapt_log,
    }


def run_chain(
    spec: ModelSpec,
    data: SurveyData,
    config: ChainConfig,
    cycling: CyclingYear | None = None,
    progress: Callable | None = None,
) -> PosteriorSamples:
    """Fit the model by MCMC and return retained draws from all chains.

    Chains run independently from substreams of ``config.seed``; results
    are concatenated chain-major so identical seed and config reproduce
    the output bitwise.
    """
    ws = _Workspace(spec, data, cycling)
    param_names = ["phi"] + [f"beta_{j}" for j in range(spec.p_beta)]
    if spec.growth != "none":
        param_names += [f"alpha_{j}" for j in range(spec.p_alpha)]
    param_names += ["tau", "kappa"]

    results = [
        _run_single_chain(spec, ws, config, chain_id, progress)
        for chain_id in range(config.n_chains)
    ]

    retained = config.retained_per_chain
    K = config.n_retained

    def cat(key):
        return np.concatenate([r["rec"][key] for r in results], axis=0)

    u_fields = []
    u_draw_index = []
    for c, r in enumerate(results):
        for row, ret in zip(r["u_rows"], r["u_row_retained"]):
            u_fields.append(row)
            u_draw_index.append(c * retained + ret)
    u_fields = np.array(u_fields) if u_fields else np.empty((0, len(ws.years), spec.grid.q))
    acceptance = {
        name: float(np.mean([r["acceptance"][name] for r in results])) for name in BLOCKS
    }
    adapt_log = {
        name: np.stack([r["adapt_log"][name] for r in results]) for name in BLOCKS
    }
    samples = PosteriorSamples(
        seed=config.seed,
        config=config,
        years=ws.years,
        param_names=tuple(param_names),
        phi=cat("phi"),
        beta=cat("beta"),
        alpha=cat("alpha"),
        tau=cat("tau"),
        kappa=cat("kappa"),
        log_post=cat("log_post"),
        chain_id=np.repeat(np.arange(config.n_chains, dtype=np.int64), retained),
        iteration=cat("iteration"),
        u_total_by_year=cat("u_totals"),
        u_draw_index=np.array(u_draw_index, dtype=np.int64),
        u_fields=u_fields,
        acceptance=acceptance,
        stability_rejects=int(sum(r["stability_rejects"] for r in results)),
        adapt_log=adapt_log,
        imputation_index=cat("imputation") if cycling is not None else None,
    )
    assert samples.n_draws == K
    return samples


def gelman_rubin(samples: PosteriorSamples) -> dict[str, float]:
    """Split-chain potential scale reduction factor per scalar parameter.

    Each chain is split in half, giving 2 * n_chains sequences; identical
    constant chains return 1.0 by convention.

    Raises:
        DomainError: fewer than two chains were run.
    """
    if samples.config.n_chains < 2:
        raise DomainError("Gelman-Rubin needs >= 2 chains; rerun with n_chains >= 2")
    matrix = samples.scalar_matrix()
    out = {}
    for j, name in enumerate(samples.param_names):
        chains = samples.per_chain(matrix[:, j])
        halves = []
        for seq in chains:
            L = seq.shape[0] // 2
            if L < 2:
                raise DomainError("chains too short to split for Gelman-Rubin")
            halves.append(seq[:L])
            halves.append(seq[-L:])
        L = halves[0].shape[0]
        means = np.array([h.mean() for h in halves])
        variances = np.array([h.var(ddof=1) for h in halves])
        W = float(variances.mean())
        B = L * float(means.var(ddof=1))
        if W == 0.0:
            out[name] = 1.0 if B == 0.0 else float("inf")
            continue
        var_plus = (L - 1) / L * W + B / L
        out[name] = float(math.sqrt(var_plus / W))
    return out


def bayesian_p_value(
    samples: PosteriorSamples,
    data: SurveyData,
    seed: int | None = None,
    eps: float = 1e-6,
) -> float:
    """Posterior predictive check with a chi-square discrepancy.

    For each archived draw, compares sum((y - E[y])^2 / (E[y] + eps)) on
    the observed data against the same discrepancy on replicated data
    (n ~ Poisson(u), y ~ Binomial(n, phi)); returns the fraction of draws
    whose replicated discrepancy is at least the observed one.
    """
    obs_years = [y for y in data.years if data.cells[y].size]
    if not obs_years:
        raise DomainError("Bayesian p-value needs a nonempty observed-cell set")
    if samples.u_fields.shape[0] == 0:
        raise DomainError("no archived intensity fields in samples")
    rng = substream(seed if seed is not None else samples.seed, "bayes-p")
    year_row = {year: i for i, year in enumerate(samples.years)}
    hits = 0
    K = samples.u_fields.shape[0]
    for row in range(K):
        k = samples.u_draw_index[row]
        phi = float(samples.phi[k])
        d_obs = 0.0
        d_rep = 0.0
        for year in obs_years:
            u = samples.u_fields[row, year_row[year], data.cells[year]]
            expected = phi * u
            y_obs = data.counts[year]
            n_rep = rng.poisson(u)
            y_rep = rng.binomial(n_rep, phi)
            d_obs += float(((y_obs - expected) ** 2 / (expected + eps)).sum())
            d_rep += float(((y_rep - expected) ** 2 / (expected + eps)).sum())
        if d_rep >= d_obs:
            hits += 1
    return hits / K


def latent_state_from_arrays(years, n_by_year) -> LatentState:
    """Convenience wrapper assembling a LatentState from per-year vectors."""
    return LatentState({int(y): n_by_year[y] for y in years})
