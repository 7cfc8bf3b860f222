"""Design criterion and search: parallel random search plus exchange.

A design is a size-n subset of the selectable transects. Its criterion
q_d is the population-form Monte Carlo variance (divisor K) of forecast
total abundance after a multiple-imputation refit conditioned on the
data the design would collect. Smaller is better.

Every evaluation inside one search shares the same random-number streams
(common random numbers): the forecast fields and the full-grid imputed
datasets are drawn once, and each design only restricts them to its own
cells before the refit, so q_d differences reflect designs rather than
Monte Carlo noise. Evaluations are pure functions of (design, seed,
config) and are cached on that key.
"""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .domain import TransectSet, design_cells
from .errors import DomainError
from .forecast import ForecastDraws, ImputedDataset, forecast, posterior_predictive, refit_with_imputation
from .mcmc import ChainConfig, PosteriorSamples, run_chain
from .model import ModelSpec, SurveyData
from .seeding import derive_seed, substream


@dataclass(frozen=True, order=True)
class Design:
    """Sorted set of transect indices."""

    members: tuple[int, ...]

    def __post_init__(self):
        members = tuple(int(t) for t in self.members)
        if len(set(members)) != len(members):
            raise DomainError("design members must be unique")
        object.__setattr__(self, "members", tuple(sorted(members)))

    @property
    def n(self) -> int:
        return len(self.members)

    def swap(self, old: int, new: int) -> "Design":
        if old not in self.members or new in self.members:
            raise DomainError("invalid exchange")
        return Design(tuple(t for t in self.members if t != old) + (new,))


@dataclass(frozen=True)
class CriterionResult:
    design: Design
    qd: float
    k_used: int
    excluded: int
    mean_total: float
    seconds: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.qd) and self.qd >= 0.0):
            raise DomainError("criterion must be finite and nonnegative")


@dataclass
class SearchReport:
    """Everything a search evaluated, plus the exchange trajectory."""

    n: int
    seed: int
    evaluations: dict = field(default_factory=dict)  # members -> CriterionResult
    failures: dict = field(default_factory=dict)  # members -> error string
    random_results: list = field(default_factory=list)
    best_random: CriterionResult | None = None
    trajectory: list = field(default_factory=list)  # start + accepted swaps
    final: CriterionResult | None = None
    improvement: float | None = None
    passes: int = 0

    def record(self, result: CriterionResult):
        self.evaluations[result.design.members] = result

    def merge(self, other: "SearchReport"):
        self.evaluations.update(other.evaluations)
        self.failures.update(other.failures)


def criterion_qd(totals) -> float:
    """Monte Carlo variance of per-draw totals, divisor K (population form)."""
    totals = np.asarray(totals, dtype=float)
    if totals.ndim != 1 or totals.shape[0] < 2:
        raise DomainError("criterion needs at least two draws")
    return float(np.var(totals))


def design_space_size(count: int, n: int) -> float:
    """Number of size-n designs over ``count`` transects, via log-gamma."""
    if not (0 <= n <= count):
        raise DomainError("need 0 <= n <= count")
    return math.exp(
        math.lgamma(count + 1) - math.lgamma(n + 1) - math.lgamma(count - n + 1)
    )


def sample_design(rng: np.random.Generator, count: int, n: int) -> Design:
    """One design drawn uniformly from all size-n subsets."""
    if n > count:
        raise DomainError(f"design size {n} exceeds transect count {count}")
    return Design(tuple(int(t) for t in rng.choice(count, size=n, replace=False)))


def sample_distinct_designs(rng: np.random.Generator, count: int, n: int, m: int) -> list[Design]:
    """m distinct designs drawn uniformly (rejection of duplicates)."""
    if m < 1:
        raise DomainError("m must be >= 1")
    if m > design_space_size(count, n):
        raise DomainError(f"cannot draw {m} distinct designs from C({count},{n})")
    seen: set[tuple[int, ...]] = set()
    out: list[Design] = []
    while len(out) < m:
        d = sample_design(rng, count, n)
        if d.members not in seen:
            seen.add(d.members)
            out.append(d)
    return out


# ---------------------------------------------------------------------------
# Evaluation context


@dataclass
class EvaluationContext:
    """Shared immutable inputs for all design evaluations in one search."""

    spec: ModelSpec
    data: SurveyData
    transects: TransectSet
    baseline: PosteriorSamples
    horizon: int
    refit_config: ChainConfig
    seed: int
    fore: ForecastDraws = None
    imputed_full: ImputedDataset = None
    cache: dict = field(default_factory=dict, repr=False)

    def evaluate(self, design: Design) -> CriterionResult:
        """q_d for one design via imputation refit; cached per design."""
        if design.members in self.cache:
            return self.cache[design.members]
        t0 = time.perf_counter()
        cells = design_cells(self.transects, design)
        imputed = self.imputed_full.restrict(cells)
        samples = refit_with_imputation(self.data, imputed, self.spec, self.refit_config)
        totals = samples.u_total_by_year[:, -1]
        result = CriterionResult(
            design=design,
            qd=criterion_qd(totals),
            k_used=int(totals.shape[0]),
            excluded=self.fore.excluded,
            mean_total=float(totals.mean()),
            seconds=time.perf_counter() - t0,
        )
        self.cache[design.members] = result
        return result


def build_evaluation_context(
    spec: ModelSpec,
    data: SurveyData,
    transects: TransectSet,
    baseline: PosteriorSamples,
    horizon: int,
    seed: int,
    refit_config: ChainConfig | None = None,
) -> EvaluationContext:
    """Precompute the shared forecast and full-grid imputations.

    The default refit chain reuses the baseline configuration at half
    length; its seed is fixed for the whole search (common random
    numbers across designs).
    """
    if refit_config is None:
        base = baseline.config
        refit_config = replace(
            base,
            n_iter=max(2, base.n_iter // 2),
            n_burn=base.n_burn // 2,
            thin=1,
            u_thin=max(1, (base.n_iter // 2 - base.n_burn // 2)),
            seed=derive_seed(seed, "refit"),
        )
    else:
        refit_config = replace(refit_config, seed=derive_seed(seed, "refit"))
    fore = forecast(baseline, horizon, spec)
    rng = substream(seed, "impute")
    all_cells = np.arange(spec.grid.q, dtype=np.int64)
    imputed_full = posterior_predictive(fore, all_cells, rng)
    return EvaluationContext(
        spec=spec,
        data=data,
        transects=transects,
        baseline=baseline,
        horizon=horizon,
        refit_config=refit_config,
        seed=seed,
        fore=fore,
        imputed_full=imputed_full,
    )


def evaluate_design(ctx, design: Design) -> CriterionResult:
    """Evaluate one design through a context (module-level convenience)."""
    return ctx.evaluate(design)


# ---------------------------------------------------------------------------
# Parallel evaluation pool

_WORKER_CTX = None


def _pool_init(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _pool_eval(members):
    t0 = time.perf_counter()
    try:
        result = _WORKER_CTX.evaluate(Design(members))
        return ("ok", members, replace(result, seconds=time.perf_counter() - t0))
    except Exception as exc:  # failures are reported, not fatal to a search
        return ("error", members, f"{type(exc).__name__}: {exc}")


def evaluate_designs(ctx, designs, parallelism: int = 1, report: SearchReport | None = None):
    """Evaluate designs, deduplicated against the context cache.

    Returns results aligned with ``designs`` (None where the evaluation
    failed); failures are recorded in the report when given.
    """
    pending = []
    for d in designs:
        if d.members not in ctx.cache and all(d.members != p.members for p in pending):
            pending.append(d)
    if pending:
        if parallelism > 1 and len(pending) > 1:
            with ProcessPoolExecutor(
                max_workers=parallelism, initializer=_pool_init, initargs=(ctx,)
            ) as pool:
                outcomes = list(pool.map(_pool_eval, [d.members for d in pending]))
        else:
            outcomes = [_pool_eval_local(ctx, d) for d in pending]
        for status, members, payload in outcomes:
            if status == "ok":
                ctx.cache[members] = payload
                if report is not None:
                    report.record(payload)
            elif report is not None:
                report.failures[members] = payload
    out = []
    for d in designs:
        res = ctx.cache.get(d.members)
        if res is not None and report is not None:
            report.record(res)
        out.append(res)
    return out


def _pool_eval_local(ctx, design: Design):
    try:
        return ("ok", design.members, ctx.evaluate(design))
    except Exception as exc:
        return ("error", design.members, f"{type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# Search


def random_search(
    m: int,
    n: int,
    transects: TransectSet,
    ctx,
    parallelism: int = 1,
    seed: int | None = None,
) -> SearchReport:
    """Evaluate m designs drawn uniformly without replacement; keep the best."""
    if n > transects.count:
        raise DomainError(f"design size {n} exceeds transect count {transects.count}")
    seed = ctx.seed if seed is None else seed
    rng = substream(seed, "random-search")
    designs = sample_distinct_designs(rng, transects.count, n, m)
    report = SearchReport(n=n, seed=seed)
    results = evaluate_designs(ctx, designs, parallelism, report)
    report.random_results = [r for r in results if r is not None]
    if not report.random_results:
        raise DomainError("all random-design evaluations failed")
    report.best_random = min(report.random_results, key=lambda r: (r.qd, r.design.members))
    report.final = report.best_random
    return report


def exchange_improve(
    start: Design,
    transects: TransectSet,
    ctx,
    parallelism: int = 1,
) -> SearchReport:
    """Improve a design by neighbor exchange until 1-swap locally optimal.

    Passes run over members in ascending index order; each member is
    tested against the transect above and below (evaluable in parallel),
    and the better strictly improving swap is accepted. A full pass with
    no accepted swap terminates the search.
    """
    report = SearchReport(n=start.n, seed=getattr(ctx, "seed", 0))
    (current_res,) = evaluate_designs(ctx, [start], parallelism, report)
    if current_res is None:
        raise DomainError(f"failed to evaluate the starting design: {report.failures}")
    report.trajectory = [current_res]
    current = start
    improved = True
    while improved:
        improved = False
        report.passes += 1
        for member in list(current.members):
            neighbors = [
                nb
                for nb in (member - 1, member + 1)
                if 0 <= nb < transects.count and nb not in current.members
            ]
            if not neighbors:
                continue
            candidates = [current.swap(member, nb) for nb in neighbors]
            results = evaluate_designs(ctx, candidates, parallelism, report)
            best = None
            for cand, res in zip(candidates, results):
                if res is None:  # failed evaluation: treated as non-improving
                    continue
                if res.qd < current_res.qd and (best is None or res.qd < best.qd):
                    best = res
            if best is not None:
                current = best.design
                current_res = best
                report.trajectory.append(best)
                improved = True
    report.final = current_res
    return report


def optimize(
    spec: ModelSpec,
    data: SurveyData,
    transects: TransectSet,
    chain_config: ChainConfig,
    m: int,
    n: int,
    horizon: int,
    seed: int,
    refit_config: ChainConfig | None = None,
    parallelism: int = 1,
    baseline: PosteriorSamples | None = None,
    progress=None,
) -> tuple[SearchReport, EvaluationContext]:
    """Full pipeline: fit, forecast, impute, random search, exchange.

    Returns the merged report (random phase plus exchange trajectory,
    final design, and the improvement statistic relative to the mean
    random criterion) together with the evaluation context.
    """
    if baseline is None:
        fit_config = replace(chain_config, seed=derive_seed(seed, "baseline-fit"))
        baseline = run_chain(spec, data, fit_config, progress=progress)
    ctx = build_evaluation_context(
        spec, data, transects, baseline, horizon, derive_seed(seed, "evaluation"), refit_config
    )
    report = random_search(m, n, transects, ctx, parallelism, seed=derive_seed(seed, "search"))
    exchange = exchange_improve(report.best_random.design, transects, ctx, parallelism)
    report.merge(exchange)
    report.trajectory = exchange.trajectory
    report.passes = exchange.passes
    report.final = exchange.final
    mean_random = float(np.mean([r.qd for r in report.random_results]))
    report.improvement = (mean_random - report.final.qd) / mean_random if mean_random > 0 else 0.0
    return report, ctx


def all_designs(count: int, n: int):
    """Iterate every size-n design (for exhaustive checks on tiny instances)."""
    for members in itertools.combinations(range(count), n):
        yield Design(members)
