"""Continuous problem definitions: couplings and the full MFG data set."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import GridError
from .grids import FieldSeries, LevelGrid, sample

__all__ = [
    "LocalPower",
    "ZeroCoupling",
    "NonlocalKernel",
    "ProblemSpec",
    "naive_density_guess",
]


@dataclass(frozen=True)
class LocalPower:
    """Local coupling V[m](x) = m(x)^q."""

    q: float

    def __post_init__(self):
        if not np.isfinite(self.q):
            raise GridError("local power exponent must be finite")


@dataclass(frozen=True)
class ZeroCoupling:
    """V identically zero (the default for V0)."""


class NonlocalKernel:
    """Nonlocal coupling V[m](x) = integral K(x,y) m(y) dy, K symmetric.

    Separable kernels K(x,y) = factor * f(x) f(y) are given through `profile`
    and applied in O(n); a general symmetric `kernel` callable K(x,y) falls
    back to a dense rectangle-rule matrix (1D only).
    """

    def __init__(self, kernel: Callable | None = None, *, factor: float = 1.0,
                 profile: Callable | None = None):
        if (kernel is None) == (profile is None):
            raise GridError("give exactly one of kernel=K(x,y) or profile=f(x)")
        self.kernel = kernel
        self.factor = float(factor)
        self.profile = profile
        self._cache: dict[tuple, np.ndarray] = {}

    def profile_values(self, grid: LevelGrid) -> np.ndarray:
        key = ("profile", grid.d, grid.n)
        if key not in self._cache:
            self._cache[key] = sample(self.profile, grid).values
        return self._cache[key]

    def matrix(self, grid: LevelGrid) -> np.ndarray:
        """Dense rectangle-rule matrix h^d * K(x_i, x_j) (includes the weight)."""
        key = ("matrix", grid.d, grid.n)
        if key not in self._cache:
            if self.profile is not None:
                f = self.profile_values(grid)
                mat = (self.factor * grid.h**grid.d) * np.outer(f, f)
            else:
                if grid.d != 1:
                    raise GridError("general nonlocal kernels are supported in 1D only")
                x = grid.axis_points()
                mat = grid.h * np.asarray(self.kernel(x[:, None], x[None, :]), float)
                if not np.allclose(mat, mat.T, atol=1e-12 * max(1.0, abs(mat).max())):
                    raise GridError("nonlocal kernel is not symmetric on the grid")
            self._cache[key] = mat
        return self._cache[key]


@dataclass(frozen=True)
class ProblemSpec:
    """The continuous MFG problem: coefficients, Hamiltonian potential, couplings, data.

    The Hamiltonian family is H(x, p) = phi(x) + |p|^gamma; gamma = 0 drops the
    gradient term entirely (a constant |p|^0 would just shift phi), which gives
    the linear problems used for diagnostics.
    """

    d: int
    nu: float
    gamma: float
    t_end: float
    phi: Callable
    v: object
    v0: object
    u0: Callable
    m_T: Callable

    def __post_init__(self):
        if self.d not in (1, 2):
            raise GridError(f"dimension must be 1 or 2, got {self.d}")
        if not (self.nu > 0):
            raise GridError(f"diffusion coefficient must be positive, got {self.nu}")
        if self.gamma < 0:
            raise GridError(f"Hamiltonian exponent must be >= 0, got {self.gamma}")
        if not (self.t_end > 0):
            raise GridError(f"end time must be positive, got {self.t_end}")

    def validate_on_grid(self, grid: LevelGrid) -> None:
        """Cheap sanity checks of the data on a concrete grid."""
        m = sample(self.m_T, grid)
        if m.values.min() < -1e-12:
            raise GridError(f"terminal density has negative values (min {m.values.min():.3e})")
        if isinstance(self.v, NonlocalKernel) and self.v.kernel is not None:
            x = grid.axis_points()[: min(grid.n, 8)]
            k_xy = np.asarray(self.v.kernel(x[:, None], x[None, :]), float)
            if not np.allclose(k_xy, k_xy.T, atol=1e-12 * max(1.0, abs(k_xy).max())):
                raise GridError("nonlocal kernel is not symmetric")


def naive_density_guess(spec: ProblemSpec, grid: LevelGrid) -> FieldSeries:
    """Copy the terminal density to every time frame."""
    m_t = sample(spec.m_T, grid).values
    return FieldSeries(grid, np.tile(m_t, (grid.n_t + 1, 1)))
