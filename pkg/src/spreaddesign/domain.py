"""Gridded study domain, covariate rasters, and survey transects.

The domain is a rectangular lattice of square cells with a boolean
activity mask (water cells are active, land cells are not). Active cells
get a row-major linear index in ``[0, q)``; every field in the package
(motility, abundance intensity, covariates) is stored as a length-q
vector in that indexing. Transects are the West-to-East rows of active
cells and form the design space for survey optimization.

Raster text format (shared by masks and covariates)::

    nrows ncols cell_size
    v v v ... (ncols whitespace-separated values, one line per grid row)

Masks contain only 0/1. Covariates may contain ``nan`` on inactive cells;
``nan`` on an active cell is an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, DomainError


@dataclass(frozen=True)
class Grid:
    """Rectangular cell lattice with an active-cell mask.

    Attributes:
        nrows, ncols: Lattice dimensions.
        cell_size: Cell edge length in meters.
        active: (nrows, ncols) boolean mask; True cells are in the domain.
        origin: Planar (x, y) coordinates of the grid corner.
        cell_index: (nrows, ncols) int array, linear active index or -1.
        cells_rc: (q, 2) int array of (row, col) per active cell.
        q: Number of active cells.
    """

    nrows: int
    ncols: int
    cell_size: float
    active: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)
    cell_index: np.ndarray = field(init=False, repr=False)
    cells_rc: np.ndarray = field(init=False, repr=False)
    q: int = field(init=False)

    def __post_init__(self):
        if self.nrows <= 0 or self.ncols <= 0:
            raise DomainError("grid dimensions must be positive")
        if self.cell_size <= 0:
            raise DomainError("cell_size must be positive")
        active = np.asarray(self.active, dtype=bool)
        if active.shape != (self.nrows, self.ncols):
            raise DomainError(
                f"mask shape {active.shape} does not match grid "
                f"({self.nrows}, {self.ncols})"
            )
        q = int(active.sum())
        if q < 1:
            raise DomainError("grid has no active cells")
        cell_index = np.full((self.nrows, self.ncols), -1, dtype=np.int64)
        rr, cc = np.nonzero(active)
        cell_index[rr, cc] = np.arange(q)
        cells_rc = np.column_stack([rr, cc]).astype(np.int64)
        for name, value in [
            ("active", active),
            ("cell_index", cell_index),
            ("cells_rc", cells_rc),
            ("q", q),
        ]:
            object.__setattr__(self, name, value)
        active.setflags(write=False)
        cell_index.setflags(write=False)
        cells_rc.setflags(write=False)
        object.__setattr__(self, "_structure_cache", {})

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size

    def cell_centers(self) -> np.ndarray:
        """(q, 2) planar (x, y) centers of active cells; x runs along columns."""
        h = self.cell_size
        x = self.origin[0] + (self.cells_rc[:, 1] + 0.5) * h
        y = self.origin[1] + (self.cells_rc[:, 0] + 0.5) * h
        return np.column_stack([x, y])

    def bounding_box(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the full lattice."""
        return (
            self.origin[0],
            self.origin[1],
            self.origin[0] + self.ncols * self.cell_size,
            self.origin[1] + self.nrows * self.cell_size,
        )


@dataclass(frozen=True)
class CovariateRaster:
    """Per-active-cell covariate values.

    ``kind`` is "indicator" (values restricted to {0, 1}, used as-is) or
    "continuous" (standardized to mean 0, sd 1 before model fitting).
    """

    name: str
    values: np.ndarray
    kind: str = "continuous"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise DomainError(f"covariate {self.name!r} must be a flat vector")
        if not np.all(np.isfinite(values)):
            raise DomainError(f"covariate {self.name!r} has non-finite values")
        if self.kind not in ("continuous", "indicator"):
            raise DomainError(f"unknown covariate kind {self.kind!r}")
        if self.kind == "indicator" and not np.all(np.isin(values, (0.0, 1.0))):
            raise DomainError(f"indicator covariate {self.name!r} has values outside {{0,1}}")
        object.__setattr__(self, "values", values)
        values.setflags(write=False)

    def standardized(self) -> "CovariateRaster":
        """Return a standardized copy (indicators are returned unchanged)."""
        if self.kind == "indicator":
            return self
        return CovariateRaster(self.name, standardize(self.values), "continuous")


def standardize(values: np.ndarray) -> np.ndarray:
    """Center to mean 0 and scale to population sd 1."""
    values = np.asarray(values, dtype=float)
    sd = float(values.std())
    if sd == 0.0:
        raise DomainError("cannot standardize a constant covariate")
    return (values - values.mean()) / sd


@dataclass(frozen=True)
class Transect:
    """One selectable transect: a grid line of active cells."""

    row: int
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64)
        object.__setattr__(self, "cells", cells)
        cells.setflags(write=False)

    @property
    def size(self) -> int:
        return int(self.cells.size)


@dataclass(frozen=True)
class TransectSet:
    """Ordered selectable transects; index = position in this list.

    Grid lines without active cells are not selectable and do not appear
    here; each transect records the grid row (or column) it came from.
    """

    transects: tuple[Transect, ...]
    axis: str = "rows"

    @property
    def count(self) -> int:
        return len(self.transects)

    def rows(self) -> list[int]:
        return [t.row for t in self.transects]


def build_grid(mask, cell_size: float = 400.0, origin=(0.0, 0.0)) -> Grid:
    """Build a Grid from a boolean activity mask.

    Args:
        mask: (nrows, ncols) array-like; truthy entries are active cells.
        cell_size: Cell edge length in meters.
        origin: Planar coordinates of the grid corner.

    Raises:
        DomainError: Empty active set or nonpositive dimensions.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DomainError("mask must be 2-dimensional")
    return Grid(mask.shape[0], mask.shape[1], float(cell_size), mask.astype(bool), tuple(origin))


def enumerate_transects(grid: Grid, axis: str = "rows") -> TransectSet:
    """List the selectable transects of a grid.

    One transect per grid row (default) holding that row's active-cell
    indices in West-to-East order; rows with no active cells are skipped.
    ``axis="cols"`` transposes the convention.
    """
    if axis not in ("rows", "cols"):
        raise DomainError(f"transect axis must be 'rows' or 'cols', got {axis!r}")
    index = grid.cell_index if axis == "rows" else grid.cell_index.T
    transects = []
    for line in range(index.shape[0]):
        cells = index[line]
        cells = cells[cells >= 0]
        if cells.size:
            transects.append(Transect(line, np.sort(cells)))
    return TransectSet(tuple(transects), axis)


def design_cells(transects: TransectSet, design) -> np.ndarray:
    """Union of active-cell indices covered by a design's transects.

    ``design`` is anything with a ``members`` attribute or an iterable of
    transect indices. Transects are disjoint, so the result size is the
    sum of member transect sizes.
    """
    members = getattr(design, "members", design)
    cells = []
    for t in members:
        t = int(t)
        if t < 0 or t >= transects.count:
            raise DomainError(f"transect index {t} out of range [0, {transects.count})")
        cells.append(transects.transects[t].cells)
    if not cells:
        return np.empty(0, dtype=np.int64)
    out = np.sort(np.concatenate(cells))
    if np.unique(out).size != out.size:
        raise DomainError("transects are not disjoint")
    return out


def shoreline_complexity(grid: Grid, shoreline_mask, radius: float) -> CovariateRaster:
    """Count shoreline cells within ``radius`` of each active cell.

    A shoreline cell counts when its center lies within ``radius`` meters
    (Euclidean, inclusive at exactly the radius) of the active cell's
    center. ``shoreline_mask`` covers the full lattice and may mark
    inactive (land) cells.
    """
    if radius <= 0:
        raise DomainError("radius must be positive")
    shoreline_mask = np.asarray(shoreline_mask, dtype=bool)
    if shoreline_mask.shape != (grid.nrows, grid.ncols):
        raise DomainError("shoreline mask shape does not match grid")
    rr, cc = np.nonzero(shoreline_mask)
    centers = grid.cell_centers()
    counts = np.zeros(grid.q, dtype=float)
    if rr.size:
        h = grid.cell_size
        sx = grid.origin[0] + (cc + 0.5) * h
        sy = grid.origin[1] + (rr + 0.5) * h
        r2 = radius * radius
        # Blocked pairwise squared distances; inclusive comparison keeps the
        # boundary convention exact in floating point.
        block = max(1, int(2_000_000 // max(rr.size, 1)))
        for start in range(0, grid.q, block):
            stop = min(start + block, grid.q)
            dx = centers[start:stop, 0][:, None] - sx[None, :]
            dy = centers[start:stop, 1][:, None] - sy[None, :]
            counts[start:stop] = (dx * dx + dy * dy <= r2).sum(axis=1)
    return CovariateRaster("complexity", counts, "continuous")


# ---------------------------------------------------------------------------
# Raster text I/O


def _parse_header(line: str, path) -> tuple[int, int, float]:
    parts = line.split()
    if len(parts) != 3:
        raise DataFormatError(f"{path}: header must be 'nrows ncols cell_size'")
    try:
        nrows, ncols = int(parts[0]), int(parts[1])
        cell_size = float(parts[2])
    except ValueError as exc:
        raise DataFormatError(f"{path}: bad header '{line.strip()}'") from exc
    return nrows, ncols, cell_size


def read_raster(path) -> tuple[tuple[int, int, float], np.ndarray]:
    """Read a raster text file; returns ((nrows, ncols, cell_size), values)."""
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataFormatError(f"{path}: empty raster file")
    nrows, ncols, cell_size = _parse_header(lines[0], path)
    if len(lines) - 1 != nrows:
        raise DataFormatError(f"{path}: expected {nrows} data rows, found {len(lines) - 1}")
    values = np.empty((nrows, ncols), dtype=float)
    for r, line in enumerate(lines[1:]):
        parts = line.split()
        if len(parts) != ncols:
            raise DataFormatError(f"{path}: row {r} has {len(parts)} values, expected {ncols}")
        try:
            values[r] = [float(p) for p in parts]
        except ValueError as exc:
            raise DataFormatError(f"{path}: non-numeric value in row {r}") from exc
    return (nrows, ncols, cell_size), values


def read_grid(path, origin=(0.0, 0.0)) -> Grid:
    """Read an activity-mask raster ({0,1} values) into a Grid."""
    (nrows, ncols, cell_size), values = read_raster(path)
    if not np.all(np.isin(values, (0.0, 1.0))):
        raise DataFormatError(f"{path}: mask raster must contain only 0 and 1")
    return build_grid(values.astype(bool), cell_size, origin)


def read_covariate(path, grid: Grid, name: str | None = None) -> CovariateRaster:
    """Read a covariate raster aligned with ``grid``.

    The header must match the grid's dimensions and cell size. ``nan`` on
    active cells is an error. Kind is inferred: values restricted to
    {0, 1} on active cells make an indicator, anything else continuous.
    """
    (nrows, ncols, cell_size), values = read_raster(path)
    if (nrows, ncols) != (grid.nrows, grid.ncols):
        raise DataFormatError(f"{path}: raster shape does not match grid")
    if abs(cell_size - grid.cell_size) > 1e-9 * max(1.0, grid.cell_size):
        raise DataFormatError(f"{path}: cell_size {cell_size} does not match grid")
    flat = values[grid.active]
    if not np.all(np.isfinite(flat)):
        bad = int(np.flatnonzero(~np.isfinite(flat))[0])
        r, c = grid.cells_rc[bad]
        raise DataFormatError(f"{path}: missing value on active cell (row {r}, col {c})")
    kind = "indicator" if np.all(np.isin(flat, (0.0, 1.0))) else "continuous"
    if name is None:
        name = Path(path).stem
    return CovariateRaster(name, flat, kind)


def format_raster(grid: Grid, per_active_values=None, full_values=None, fmt="{:.17g}") -> str:
    """Render a raster text document for the grid.

    Provide either per-active values (inactive cells rendered as nan) or a
    full (nrows, ncols) matrix.
    """
    if full_values is None:
        full = np.full((grid.nrows, grid.ncols), np.nan)
        if per_active_values is not None:
            full[grid.active] = np.asarray(per_active_values, dtype=float)
    else:
        full = np.asarray(full_values, dtype=float)
    lines = [f"{grid.nrows} {grid.ncols} {grid.cell_size:.17g}"]
    for r in range(grid.nrows):
        lines.append(" ".join(fmt.format(v) for v in full[r]))
    return "\n".join(lines) + "\n"


def write_raster(path, grid: Grid, per_active_values=None, full_values=None, fmt="{:.17g}"):
    Path(path).write_text(format_raster(grid, per_active_values, full_values, fmt))


def write_grid(path, grid: Grid):
    write_raster(path, grid, full_values=grid.active.astype(float), fmt="{:.0f}")
