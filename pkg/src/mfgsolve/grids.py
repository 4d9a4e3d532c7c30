"""Hierarchical periodic space-time grids, grid functions, and discrete norms.

Space is the periodic box [0,1)^d sampled at n points per axis, x_i = i*h with
h = 1/n; time is [0,T] with n_t uniform steps, t_k = k*tau with tau = T/n_t.
Grid functions are stored flat; in 2D the ordering is row-major, i = i1*n + i2,
with periodic wrap applied per axis.  The space-time norm carries the tau*h^d
quadrature weight so that magnitudes are comparable across hierarchy levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridError

__all__ = [
    "LevelGrid",
    "GridFn",
    "FieldSeries",
    "build_hierarchy",
    "sample",
    "rel_norm",
    "series_norm",
    "grid_norm",
    "total_mass",
    "restrict_series",
]


@dataclass(frozen=True)
class LevelGrid:
    """One level of the grid hierarchy.

    With the default level convention n = n_t = 2^level, so that both the
    spatial step h = 2^-level and the time step tau = 2^-level * T halve from
    one level to the next.  n and n_t may differ (and need not be powers of
    two) as long as refinement doubles both.
    """

    level: int
    d: int
    n: int
    n_t: int
    t_end: float

    def __post_init__(self):
        if self.d not in (1, 2):
            raise GridError(f"dimension must be 1 or 2, got {self.d}")
        if self.n < 4:
            raise GridError(f"n = {self.n}: width-2 stencils do not fit (need n >= 4)")
        if self.n_t < 1:
            raise GridError(f"n_t must be positive, got {self.n_t}")
        if not (self.t_end > 0):
            raise GridError(f"end time must be positive, got {self.t_end}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def tau(self) -> float:
        return self.t_end / self.n_t

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    def axis_points(self) -> np.ndarray:
        return np.arange(self.n) * self.h

    def meshgrid(self) -> tuple[np.ndarray, ...]:
        x = self.axis_points()
        if self.d == 1:
            return (x,)
        return tuple(np.meshgrid(x, x, indexing="ij"))

    def times(self) -> np.ndarray:
        return np.arange(self.n_t + 1) * self.tau

    def refined(self) -> "LevelGrid":
        return LevelGrid(self.level + 1, self.d, 2 * self.n, 2 * self.n_t, self.t_end)

    def is_refinement_of(self, coarse: "LevelGrid") -> bool:
        return (
            self.d == coarse.d
            and self.t_end == coarse.t_end
            and self.n == 2 * coarse.n
            and self.n_t == 2 * coarse.n_t
        )


def build_hierarchy(spec, l_coarse: int, l_fine: int, *, n0: int | None = None,
                    nt0: int | None = None) -> list[LevelGrid]:
    """Nested grids for levels l_coarse..l_fine.

    Default convention: n = n_t = 2^level.  Passing n0 (and optionally nt0)
    anchors the coarsest level at n0 points instead, doubling per level; this
    covers hierarchies like 20 -> 40 -> ... -> 320 whose sizes are not powers
    of two.
    """
    if l_coarse < 2:
        raise GridError(f"coarsest level must be >= 2, got {l_coarse}")
    if l_coarse > l_fine:
        raise GridError(f"invalid level range [{l_coarse}, {l_fine}]")
    grids = []
    for lev in range(l_coarse, l_fine + 1):
        if n0 is None:
            n = 2**lev
        else:
            n = n0 * 2 ** (lev - l_coarse)
        if nt0 is None:
            n_t = 2**lev if n0 is None else n
        else:
            n_t = nt0 * 2 ** (lev - l_coarse)
        grids.append(LevelGrid(lev, spec.d, n, n_t, spec.t_end))
    return grids


@dataclass(frozen=True)
class GridFn:
    """A real function sampled on one spatial grid (a single time level)."""

    grid: LevelGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.size,):
            raise GridError(f"expected {self.grid.size} values, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise GridError("grid function contains non-finite values")
        object.__setattr__(self, "values", v)

    def shaped(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)


@dataclass(frozen=True)
class FieldSeries:
    """The full space-time solution on one level: frames k = 0..n_t, flat in space.

    Arrays are not defensively copied; treat a constructed series as immutable.
    Frames may hold non-finite values transiently (divergence detection happens
    in the solvers), but frame() refuses to wrap such data.
    """

    grid: LevelGrid
    data: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(self.data, dtype=np.float64)
        if a.shape != (self.grid.n_t + 1, self.grid.size):
            raise GridError(
                f"expected shape {(self.grid.n_t + 1, self.grid.size)}, got {a.shape}"
            )
        object.__setattr__(self, "data", a)

    @classmethod
    def constant(cls, grid: LevelGrid, value: float) -> "FieldSeries":
        return cls(grid, np.full((grid.n_t + 1, grid.size), float(value)))

    @classmethod
    def from_frames(cls, grid: LevelGrid, frames) -> "FieldSeries":
        return cls(grid, np.vstack([np.asarray(f, dtype=np.float64) for f in frames]))

    def frame(self, k: int) -> GridFn:
        return GridFn(self.grid, self.data[k])

    def copy(self) -> "FieldSeries":
        return FieldSeries(self.grid, self.data.copy())


def sample(f, grid: LevelGrid) -> GridFn:
    """Sample a continuous function on the grid points.

    1D callables receive the x array; 2D callables receive the (X1, X2)
    meshgrid arrays.  Scalar-valued callables (constants) broadcast.
    """
    vals = np.asarray(f(*grid.meshgrid()), dtype=np.float64)
    if vals.ndim == 0:
        vals = np.full(grid.shape, float(vals))
    if vals.shape != grid.shape:
        raise GridError(f"sampled shape {vals.shape} does not match grid {grid.shape}")
    flat = np.ascontiguousarray(vals.reshape(-1))
    if not np.isfinite(flat).all():
        raise GridError("sampled function produced non-finite values")
    return GridFn(grid, flat)


def series_norm(x: FieldSeries) -> float:
    """Mesh-weighted L2 norm sqrt(tau * h^d * sum x^2) over all frames."""
    w = x.grid.tau * x.grid.h**x.grid.d
    return float(np.sqrt(w * np.dot(x.data.ravel(), x.data.ravel())))


def grid_norm(g: GridFn) -> float:
    """Spatial L2 norm sqrt(h^d * sum g^2)."""
    w = g.grid.h**g.grid.d
    return float(np.sqrt(w * np.dot(g.values, g.values)))


def rel_norm(x_new: FieldSeries, x_old: FieldSeries) -> float:
    """Relative change ||x_new - x_old|| / ||x_old|| in the weighted norm.

    Returns 0 when both fields vanish and +inf when only the reference does.
    """
    if x_new.grid != x_old.grid:
        raise GridError("rel_norm requires both series on the same grid")
    num = series_norm(FieldSeries(x_new.grid, x_new.data - x_old.data))
    den = series_norm(x_old)
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / den


def total_mass(m: GridFn) -> float:
    """Rectangle-rule mass h^d * sum m_i."""
    return float(m.grid.h**m.grid.d * m.values.sum())


def restrict_series(x: FieldSeries, coarse: LevelGrid) -> FieldSeries:
    """Pointwise restriction onto a coarser nested grid (grids must nest)."""
    fine = x.grid
    if fine.d != coarse.d or fine.t_end != coarse.t_end:
        raise GridError("restriction requires matching dimension and end time")
    if fine.n % coarse.n or fine.n_t % coarse.n_t:
        raise GridError(
            f"grid {coarse.n}x{coarse.n_t} does not nest in {fine.n}x{fine.n_t}"
        )
    ss = fine.n // coarse.n
    st = fine.n_t // coarse.n_t
    if fine.d == 1:
        data = x.data[::st, ::ss]
    else:
        shaped = x.data.reshape(fine.n_t + 1, fine.n, fine.n)
        data = shaped[::st, ::ss, ::ss].reshape(coarse.n_t + 1, -1)
    return FieldSeries(coarse, np.ascontiguousarray(data))
