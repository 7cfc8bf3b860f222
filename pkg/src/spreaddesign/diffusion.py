"""Discretized ecological-diffusion operator with optional growth.

The underlying dynamic is du/dt = Laplacian[mu(s) u] + f(u, s): the
motility coefficient sits inside both spatial derivatives, so animals
accumulate where motility is low. Forward-Euler finite differencing on
the active-cell lattice turns one time step into a sparse linear map
u_{t+1} = H u_t with at most five nonzero bands per cell (center plus
the four lattice neighbors):

    H[i, j] = dt * mu_j / h^2                 for j a neighbor of i
    H[i, i] = 1 + dt * (gamma_i - c_i * mu_i / h^2)

where c_i counts neighbor links under the boundary mode: absorbing
boundaries always use 4 (mass crossing into inactive cells is lost),
reflecting boundaries count only active neighbors (columns of H then sum
to exactly 1 + dt * gamma_j, so the step conserves mass when growth is
off). Logistic growth is state dependent and is applied per step on top
of the growth-free operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .domain import Grid
from .errors import DomainError, NumericError, StabilityError

STABILITY_MARGIN = 0.05

GROWTH_KINDS = ("none", "malthusian", "logistic")
BOUNDARY_MODES = ("absorbing", "reflecting")


@dataclass(frozen=True)
class MotilityField:
    """Per-cell motility (m^2 per unit time); strictly positive."""

    mu: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        if not np.all(np.isfinite(mu)):
            raise NumericError("motility field has non-finite values")
        if np.any(mu <= 0):
            raise DomainError("motility must be strictly positive")
        object.__setattr__(self, "mu", mu)
        mu.setflags(write=False)


@dataclass(frozen=True)
class GrowthModel:
    """Growth term. kind in {none, malthusian, logistic}.

    gamma is the per-cell instantaneous rate (1/time); kappa_eq the
    per-cell equilibrium density, required for logistic growth where the
    per-step increment is dt * gamma * u * (1 - u / kappa_eq).
    """

    kind: str = "none"
    gamma: np.ndarray | float = 0.0
    kappa_eq: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in GROWTH_KINDS:
            raise DomainError(f"unknown growth kind {self.kind!r}")
        if self.kind == "logistic":
            if self.kappa_eq is None:
                raise DomainError("logistic growth requires kappa_eq")
            kap = np.asarray(self.kappa_eq, dtype=float)
            if np.any(kap <= 0):
                raise DomainError("kappa_eq must be strictly positive")
            object.__setattr__(self, "kappa_eq", kap)

    def gamma_vector(self, q: int) -> np.ndarray:
        if self.kind == "none":
            return np.zeros(q)
        return np.broadcast_to(np.asarray(self.gamma, dtype=float), (q,)).copy()


@dataclass(frozen=True)
class IntensityField:
    """Abundance intensity per active cell at time index t."""

    u: np.ndarray
    t: int = 0

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        object.__setattr__(self, "u", u)

    @property
    def total(self) -> float:
        return float(self.u.sum())


@dataclass(frozen=True)
class StabilityReport:
    stable: bool
    max_dt: float
    margin: float = STABILITY_MARGIN


@dataclass(frozen=True)
class Propagator:
    """One-step linear operator in CSR form plus band metadata.

    data/indices/indptr hold the q x q operator; ``diag_slots[i]`` is the
    position of row i's diagonal entry inside ``data``. For logistic
    growth the operator itself is growth-free and gamma/kappa_eq are
    applied per step.
    """

    grid: Grid
    dt: float
    h: float
    boundary: str
    growth: GrowthModel
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    diag_slots: np.ndarray
    mu: np.ndarray
    gamma: np.ndarray = field(repr=False, default=None)

    def as_csr(self):
        from scipy.sparse import csr_matrix

        q = self.grid.q
        return csr_matrix((self.data, self.indices, self.indptr), shape=(q, q))

    def column_sums(self) -> np.ndarray:
        return np.asarray(self.as_csr().sum(axis=0)).ravel()

    def band_offsets(self) -> np.ndarray:
        """Distinct full-lattice index offsets of the nonzero stencil entries.

        In full row-major lattice indexing the stencil touches offsets
        {0, +-1, +-ncols}, so at most five bands exist for any mask.
        """
        rc = self.grid.cells_rc
        full = rc[:, 0] * self.grid.ncols + rc[:, 1]
        rows = np.repeat(np.arange(self.grid.q), np.diff(self.indptr))
        nz = self.data != 0.0
        return np.unique(full[self.indices[nz]] - full[rows[nz]])


def _structure(grid: Grid, boundary: str):
    """CSR sparsity pattern and link counts for a grid/boundary pair (cached)."""
    if boundary not in BOUNDARY_MODES:
        raise DomainError(f"unknown boundary mode {boundary!r}")
    cache = grid._structure_cache
    if boundary in cache:
        return cache[boundary]
    q = grid.q
    idx = grid.cell_index
    rc = grid.cells_rc
    nbr = np.full((q, 4), -1, dtype=np.int64)  # E, W, N, S
    r, c = rc[:, 0], rc[:, 1]
    east = c + 1 < grid.ncols
    nbr[east, 0] = idx[r[east], c[east] + 1]
    west = c - 1 >= 0
    nbr[west, 1] = idx[r[west], c[west] - 1]
    north = r - 1 >= 0
    nbr[north, 2] = idx[r[north] - 1, c[north]]
    south = r + 1 < grid.nrows
    nbr[south, 3] = idx[r[south] + 1, c[south]]

    active_links = (nbr >= 0).sum(axis=1).astype(np.int64)
    n_links = np.full(q, 4, dtype=np.int64) if boundary == "absorbing" else active_links

    indptr = np.zeros(q + 1, dtype=np.int64)
    indptr[1:] = np.cumsum(active_links + 1)
    nnz = int(indptr[-1])
    indices = np.empty(nnz, dtype=np.int64)
    diag_slots = np.empty(q, dtype=np.int64)
    for i in range(q):
        cols = np.sort(np.append(nbr[i][nbr[i] >= 0], i))
        start = indptr[i]
        indices[start : start + cols.size] = cols
        diag_slots[i] = start + int(np.searchsorted(cols, i))
    for arr in (indptr, indices, diag_slots, n_links):
        arr.setflags(write=False)
    cache[boundary] = (indptr, indices, diag_slots, n_links)
    return cache[boundary]


def motility_field(X: np.ndarray, beta: np.ndarray) -> MotilityField:
    """Log-linear motility mu_i = exp(x_i' beta).

    Args:
        X: (q, p) covariate matrix whose first column is all ones.
        beta: (p,) coefficients.

    Raises:
        NumericError: overflow to non-finite motility, naming the cell.
    """
    X = np.asarray(X, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if X.ndim != 2 or X.shape[1] != beta.shape[0]:
        raise DomainError(
            f"covariate matrix {X.shape} incompatible with {beta.shape[0]} coefficients"
        )
    mu = np.exp(X @ beta)
    if not np.all(np.isfinite(mu)):
        bad = int(np.flatnonzero(~np.isfinite(mu))[0])
        raise NumericError(f"motility overflow at cell {bad}")
    return MotilityField(mu)


def _as_mu_array(mu, q: int) -> np.ndarray:
    mu = mu.mu if isinstance(mu, MotilityField) else np.asarray(mu, dtype=float)
    mu = np.broadcast_to(mu, (q,)).astype(float, copy=True)
    if not np.all(np.isfinite(mu)):
        raise NumericError("motility has non-finite values")
    if np.any(mu < 0):
        raise DomainError("motility must be nonnegative")
    return mu


def stability_check(mu, dt: float, h: float, growth: GrowthModel | None = None) -> StabilityReport:
    """Explicit-step stability bound for the discretized operator.

    Stable iff dt * (4 max(mu) / h^2 + max(0, -min(gamma))) < 1 - margin
    (strict, margin 0.05); the report carries the implied max_dt.
    """
    mu = mu.mu if isinstance(mu, MotilityField) else np.asarray(mu, dtype=float)
    load = 4.0 * float(np.max(mu)) / (h * h)
    if growth is not None and growth.kind != "none":
        gamma = np.asarray(growth.gamma, dtype=float)
        load += max(0.0, -float(np.min(gamma)))
    if load <= 0.0:
        return StabilityReport(True, np.inf)
    max_dt = (1.0 - STABILITY_MARGIN) / load
    return StabilityReport(bool(dt * load < 1.0 - STABILITY_MARGIN), max_dt)


def build_propagator(
    mu,
    growth: GrowthModel,
    dt: float,
    grid: Grid,
    boundary: str = "absorbing",
    check_stability: bool = True,
) -> Propagator:
    """Assemble the one-step operator H for motility ``mu`` and growth.

    ``mu`` may be a MotilityField or a plain nonnegative array. With
    ``check_stability`` a violated bound raises StabilityError carrying
    the computed max_dt.
    """
    q = grid.q
    mu_arr = _as_mu_array(mu, q)
    if dt <= 0:
        raise DomainError("dt must be positive")
    if check_stability:
        report = stability_check(mu_arr, dt, grid.cell_size, growth)
        if not report.stable:
            raise StabilityError(
                f"dt={dt} violates the stability bound (max_dt={report.max_dt:.6g})"
            )
    indptr, indices, diag_slots, n_links = _structure(grid, boundary)
    gamma = growth.gamma_vector(q)
    gamma_linear = gamma if growth.kind == "malthusian" else np.zeros(q)
    off = (dt / grid.cell_area) * mu_arr
    data = off[indices]
    data[diag_slots] = 1.0 + dt * gamma_linear - n_links * off
    return Propagator(
        grid=grid,
        dt=dt,
        h=grid.cell_size,
        boundary=boundary,
        growth=growth,
        indptr=indptr,
        indices=indices,
        data=data,
        diag_slots=diag_slots,
        mu=mu_arr,
        gamma=gamma,
    )


@njit(cache=True)
def _steps_linear(indptr, indices, data, u0, steps):  # pragma: no cover - jitted
    q = u0.shape[0]
    cur = u0.copy()
    nxt = np.empty(q)
    for step in range(steps):
        for i in range(q):
            acc = 0.0
            for s in range(indptr[i], indptr[i + 1]):
                acc += data[s] * cur[indices[s]]
            nxt[i] = acc
        for i in range(q):
            if not np.isfinite(nxt[i]):
                return nxt, step + 1
        cur, nxt = nxt, cur
    return cur, -1


@njit(cache=True)
def _steps_logistic(indptr, indices, data, gamma, kappa, dt, u0, steps):  # pragma: no cover
    q = u0.shape[0]
    cur = u0.copy()
    nxt = np.empty(q)
    for step in range(steps):
        for i in range(q):
            acc = 0.0
            for s in range(indptr[i], indptr[i + 1]):
                acc += data[s] * cur[indices[s]]
            nxt[i] = acc + dt * gamma[i] * cur[i] * (1.0 - cur[i] / kappa[i])
        for i in range(q):
            if not np.isfinite(nxt[i]):
                return nxt, step + 1
        cur, nxt = nxt, cur
    return cur, -1


def step_field(prop: Propagator, u: np.ndarray, steps: int, step_offset: int = 0) -> np.ndarray:
    """Apply ``steps`` propagator steps to a raw field (fast path)."""
    if steps == 0:
        return np.array(u, dtype=float, copy=True)
    u = np.ascontiguousarray(u, dtype=float)
    if prop.growth.kind == "logistic":
        out, bad = _steps_logistic(
            prop.indptr,
            prop.indices,
            prop.data,
            prop.gamma,
            prop.growth.kappa_eq,
            prop.dt,
            u,
            steps,
        )
    else:
        out, bad = _steps_linear(prop.indptr, prop.indices, prop.data, u, steps)
    if bad >= 0:
        raise NumericError(f"non-finite intensity at propagation step {step_offset + bad}")
    return out


def propagate(prop: Propagator, u1, steps: int, record_every: int = 1) -> list[IntensityField]:
    """Iterate u_{t+1} = H u_t and record intermediate fields.

    Args:
        u1: Initial IntensityField or raw per-cell array (nonnegative).
        steps: Number of steps to take (>= 0).
        record_every: Record one field every this many steps; ``steps``
            must be divisible by it. The returned sequence starts with
            the initial field, so its length is steps / record_every + 1.

    Raises:
        NumericError: NaN/Inf appearing at any step (step index reported).
    """
    if steps < 0:
        raise DomainError("steps must be nonnegative")
    if record_every < 1 or steps % record_every:
        raise DomainError("steps must be a multiple of record_every")
    t0 = u1.t if isinstance(u1, IntensityField) else 0
    u = u1.u if isinstance(u1, IntensityField) else np.asarray(u1, dtype=float)
    if np.any(u < 0):
        raise DomainError("initial intensity must be nonnegative")
    fields = [IntensityField(np.array(u, copy=True), t0)]
    done = 0
    while done < steps:
        u = step_field(prop, u, record_every, step_offset=done)
        done += record_every
        fields.append(IntensityField(u, t0 + done))
    return fields


def initial_condition(tau: float, kappa_kernel: float, epicenter, grid: Grid) -> IntensityField:
    """Scaled Gaussian kernel around an epicenter.

    The discrete kernel w_i = exp(-|s_i - d|^2 / kappa^2) is normalized by
    its cell-area quadrature, so the field integrates (sum times cell
    area) to ``tau`` up to discretization error.

    Raises:
        DomainError: epicenter outside the lattice bounding box.
        NumericError: kernel mass underflow (kappa much smaller than the
            cell size); advises refining the grid.
    """
    if tau <= 0 or kappa_kernel <= 0:
        raise DomainError("tau and kappa_kernel must be positive")
    x0, y0 = float(epicenter[0]), float(epicenter[1])
    xmin, ymin, xmax, ymax = grid.bounding_box()
    if not (xmin <= x0 <= xmax and ymin <= y0 <= ymax):
        raise DomainError(f"epicenter {(x0, y0)} outside domain bounding box")
    centers = grid.cell_centers()
    d2 = (centers[:, 0] - x0) ** 2 + (centers[:, 1] - y0) ** 2
    w = np.exp(-d2 / (kappa_kernel * kappa_kernel))
    denom = float(w.sum()) * grid.cell_area
    if denom <= 0.0 or float(w.max()) < 1e-300:
        raise NumericError(
            "initial kernel mass underflow: kappa_kernel is far below the "
            "cell size; use a finer grid or a wider kernel"
        )
    return IntensityField(tau * w / denom, 0)
