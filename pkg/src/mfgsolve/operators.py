"""Spatial finite-difference operators on periodic grids.

Conventions (1D; 2D applies the same stencils per axis and sums):

  one-sided gradients, second order (width-2 upwind stencils):
      (D W)_i^-  = (3 W_i - 4 W_{i-1} + W_{i-2}) / (2h)
      (D W)_i^+  = (-3 W_i + 4 W_{i+1} - W_{i+2}) / (2h)
  first order:
      (D W)_i^-  = (W_i - W_{i-1}) / h,   (D W)_i^+ = (W_{i+1} - W_i) / h

  diffusion term (discretizes -nu * Laplacian):
      (L W)_i = -nu (W_{i+1} - 2 W_i + W_{i-1}) / h^2

  discrete Hamiltonian for H(x, p) = phi(x) + |p|^gamma (Godunov upwind
  selection; the scheme marches u forward, so the flux keeps the backward
  difference where it is positive and the forward difference where it is
  negative, which is the monotone, dissipative branch):
      H_i = phi(x_i) + s_i^gamma,
      s_i = sqrt( sum_axes max((D W)^-, 0)^2 + min((D W)^+, 0)^2 )
  with p-derivatives (slopes)
      dH/dp1 = +gamma s^(gamma-2) max(p1, 0)    (>= 0)
      dH/dp2 = +gamma s^(gamma-2) min(p2, 0)    (<= 0)
  both zero at s = 0; for gamma < 2 the factor s^(gamma-2) clamps s at 1e-12.

  transport operator: B(m, u) = -J(u)^T m where J(u) = dH/dU is the chain-rule
  Jacobian of U -> H(x, D U).  This is exactly the operator satisfying the
  summation-by-parts identity sum_i B_i(m,u) w_i = -sum_i m_i (grad_p H . (D w)_i)
  for every grid function w, and it annihilates constants (sum_i B_i = 0).

Kernels accept arrays with leading batch axes; the spatial axes are the last
d axes of the shaped array.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .errors import GridError
from .grids import GridFn, LevelGrid, sample
from .problem import LocalPower, NonlocalKernel, ZeroCoupling

__all__ = [
    "SchemeOrder",
    "OneSidedPair",
    "HamiltonianSlopes",
    "beam_warming",
    "upwind_first",
    "laplace_term",
    "discrete_hamiltonian",
    "hamiltonian_gradient",
    "transport_B",
    "coupling_V",
    "coupling_derivative",
    "stencil_matrix",
]

KINK_EPS = 1e-12


class SchemeOrder(Enum):
    FIRST = 1
    SECOND = 2

    @property
    def bandwidth(self) -> int:
        return 1 if self is SchemeOrder.FIRST else 2


# ---------------------------------------------------------------------------
# shaped-array kernels (batch-friendly: spatial axes are the trailing d axes)
# ---------------------------------------------------------------------------

def one_sided_shaped(w: np.ndarray, h: float, order: SchemeOrder, d: int):
    """Per-axis (minus, plus) one-sided differences with periodic wrap."""
    minus, plus = [], []
    for a in range(d):
        ax = w.ndim - d + a
        if order is SchemeOrder.SECOND:
            minus.append((3.0 * w - 4.0 * np.roll(w, 1, axis=ax) + np.roll(w, 2, axis=ax)) / (2.0 * h))
            plus.append((-3.0 * w + 4.0 * np.roll(w, -1, axis=ax) - np.roll(w, -2, axis=ax)) / (2.0 * h))
        else:
            minus.append((w - np.roll(w, 1, axis=ax)) / h)
            plus.append((np.roll(w, -1, axis=ax) - w) / h)
    return minus, plus


def adjoint_minus_shaped(y: np.ndarray, h: float, order: SchemeOrder, ax: int) -> np.ndarray:
    """Transpose action of the minus-side stencil along one axis."""
    if order is SchemeOrder.SECOND:
        return (3.0 * y - 4.0 * np.roll(y, -1, axis=ax) + np.roll(y, -2, axis=ax)) / (2.0 * h)
    return (y - np.roll(y, -1, axis=ax)) / h


def adjoint_plus_shaped(y: np.ndarray, h: float, order: SchemeOrder, ax: int) -> np.ndarray:
    """Transpose action of the plus-side stencil along one axis."""
    if order is SchemeOrder.SECOND:
        return (-3.0 * y + 4.0 * np.roll(y, 1, axis=ax) - np.roll(y, 2, axis=ax)) / (2.0 * h)
    return (np.roll(y, 1, axis=ax) - y) / h


def laplace_shaped(w: np.ndarray, h: float, nu: float, d: int) -> np.ndarray:
    """(L w) = -nu * central second difference, summed over axes."""
    out = np.zeros_like(w)
    for a in range(d):
        ax = w.ndim - d + a
        out += np.roll(w, 1, axis=ax) + np.roll(w, -1, axis=ax) - 2.0 * w
    return (-nu / h**2) * out


def upwind_speed(minus_list, plus_list):
    """s = sqrt(sum_axes max(minus,0)^2 + min(plus,0)^2) and its parts.

    v1 = max(minus, 0) and v2 = max(-plus, 0) are the active upwind
    magnitudes of the two sides.
    """
    v1 = [np.maximum(m, 0.0) for m in minus_list]
    v2 = [np.maximum(-p, 0.0) for p in plus_list]
    s2 = np.zeros_like(v1[0])
    for a in range(len(v1)):
        s2 += v1[a] ** 2 + v2[a] ** 2
    return np.sqrt(s2), v1, v2


def hamiltonian_shaped(minus_list, plus_list, phi_vals: np.ndarray, gamma: float) -> np.ndarray:
    if gamma == 0.0:
        return phi_vals + np.zeros_like(minus_list[0])
    s, _, _ = upwind_speed(minus_list, plus_list)
    return phi_vals + s**gamma


def slopes_shaped(minus_list, plus_list, gamma: float):
    """Per-axis (dH/dp1, dH/dp2); zero at the kink s = 0."""
    d = len(minus_list)
    if gamma == 0.0:
        z = [np.zeros_like(minus_list[a]) for a in range(d)]
        return z, [np.zeros_like(plus_list[a]) for a in range(d)]
    if gamma < 1.0:
        raise GridError(f"gamma = {gamma}: p-gradient unbounded at the kink for gamma < 1")
    s, v1, v2 = upwind_speed(minus_list, plus_list)
    base = gamma * np.maximum(s, KINK_EPS) ** (gamma - 2.0) if gamma < 2.0 \
        else gamma * s ** (gamma - 2.0) if gamma > 2.0 else np.full_like(s, gamma)
    q1 = [base * v1[a] for a in range(d)]
    q2 = [-base * v2[a] for a in range(d)]
    return q1, q2


def hessian_shaped(minus_list, plus_list, gamma: float):
    """Second p-derivatives of the Hamiltonian, indexed by slot pairs.

    Slots are ordered (axis0 minus, axis0 plus, axis1 minus, axis1 plus);
    returns hess[a][b] = d(q_a)/d(p_b) as arrays.  Exact away from s = 0;
    the clamped power keeps entries finite at the kink where they vanish.
    """
    d = len(minus_list)
    nslots = 2 * d
    if gamma == 0.0:
        z = np.zeros_like(minus_list[0])
        return [[z for _ in range(nslots)] for _ in range(nslots)]
    if gamma < 1.0:
        raise GridError(f"gamma = {gamma}: not differentiable enough for a Hessian")
    s, v1, v2 = upwind_speed(minus_list, plus_list)
    sc = np.maximum(s, KINK_EPS)
    pow2 = sc ** (gamma - 2.0)
    pow4 = sc ** (gamma - 4.0)
    # slope of v_slot w.r.t. its own p, and the s-derivative helper t_slot
    signs, tvals, dvals = [], [], []
    for a in range(d):
        chi1 = (minus_list[a] > 0.0).astype(np.float64)
        chi2 = (plus_list[a] < 0.0).astype(np.float64)
        signs += [1.0, -1.0]
        tvals += [v1[a], -v2[a]]
        dvals += [chi1, -chi2]
    vvals = []
    for a in range(d):
        vvals += [v1[a], v2[a]]
    hess = []
    for i in range(nslots):
        row = []
        for j in range(nslots):
            term = (gamma - 2.0) * pow4 * tvals[j] * vvals[i]
            if i == j:
                term = term + pow2 * dvals[i]
            row.append(signs[i] * gamma * term)
        hess.append(row)
    return hess


# ---------------------------------------------------------------------------
# GridFn-level API
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OneSidedPair:
    """One-sided gradient pair ((D W)^-, (D W)^+) per axis, flat storage."""

    grid: LevelGrid
    minus: tuple
    plus: tuple


@dataclass(frozen=True)
class HamiltonianSlopes:
    """dH/dp1 (minus slot) and dH/dp2 (plus slot) per axis, flat storage."""

    grid: LevelGrid
    p1: tuple
    p2: tuple


def _pair_from_shaped(grid, minus_list, plus_list) -> OneSidedPair:
    return OneSidedPair(
        grid,
        tuple(m.reshape(-1) for m in minus_list),
        tuple(p.reshape(-1) for p in plus_list),
    )


def beam_warming(w: GridFn) -> OneSidedPair:
    """Second-order one-sided gradient pair (periodic)."""
    g = w.grid
    if g.n < 4:
        raise GridError(f"n = {g.n}: width-2 stencil does not fit")
    minus, plus = one_sided_shaped(w.shaped(), g.h, SchemeOrder.SECOND, g.d)
    return _pair_from_shaped(g, minus, plus)


def upwind_first(w: GridFn) -> OneSidedPair:
    """First-order one-sided gradient pair (periodic)."""
    g = w.grid
    minus, plus = one_sided_shaped(w.shaped(), g.h, SchemeOrder.FIRST, g.d)
    return _pair_from_shaped(g, minus, plus)


def gradient_pair(w: GridFn, order: SchemeOrder) -> OneSidedPair:
    return beam_warming(w) if order is SchemeOrder.SECOND else upwind_first(w)


def laplace_term(w: GridFn, nu: float) -> GridFn:
    g = w.grid
    return GridFn(g, laplace_shaped(w.shaped(), g.h, nu, g.d).reshape(-1))


def _phi_values(phi, grid: LevelGrid) -> np.ndarray:
    if isinstance(phi, GridFn):
        return phi.shaped()
    if callable(phi):
        return sample(phi, grid).shaped()
    arr = np.asarray(phi, dtype=np.float64)
    return arr.reshape(grid.shape)


def _pair_shaped(pair: OneSidedPair):
    shape = pair.grid.shape
    return ([m.reshape(shape) for m in pair.minus],
            [p.reshape(shape) for p in pair.plus])


def discrete_hamiltonian(grid: LevelGrid, pair: OneSidedPair, phi, gamma: float) -> GridFn:
    if gamma < 0:
        raise GridError(f"gamma must be >= 0, got {gamma}")
    minus, plus = _pair_shaped(pair)
    vals = hamiltonian_shaped(minus, plus, _phi_values(phi, grid), gamma)
    return GridFn(grid, vals.reshape(-1))


def hamiltonian_gradient(grid: LevelGrid, pair: OneSidedPair, gamma: float) -> HamiltonianSlopes:
    minus, plus = _pair_shaped(pair)
    q1, q2 = slopes_shaped(minus, plus, gamma)
    return HamiltonianSlopes(
        grid,
        tuple(q.reshape(-1) for q in q1),
        tuple(q.reshape(-1) for q in q2),
    )


def apply_transport(m_shaped: np.ndarray, q1, q2, h: float, order: SchemeOrder,
                    d: int) -> np.ndarray:
    """B = -J^T m = -sum_axes [S_minus^T (q1 m) + S_plus^T (q2 m)]."""
    out = np.zeros_like(m_shaped)
    for a in range(d):
        ax = m_shaped.ndim - d + a
        out += adjoint_minus_shaped(q1[a] * m_shaped, h, order, ax)
        out += adjoint_plus_shaped(q2[a] * m_shaped, h, order, ax)
    return -out


def transport_B(m: GridFn, u: GridFn, order: SchemeOrder, spec) -> GridFn:
    """Adjoint transport operator: discrete div(m grad_p H(x, D u))."""
    if m.grid != u.grid:
        raise GridError("transport operator requires m and u on the same grid")
    g = m.grid
    minus, plus = one_sided_shaped(u.shaped(), g.h, order, g.d)
    q1, q2 = slopes_shaped(minus, plus, spec.gamma)
    vals = apply_transport(m.shaped(), q1, q2, g.h, order, g.d)
    return GridFn(g, vals.reshape(-1))


# ---------------------------------------------------------------------------
# couplings
# ---------------------------------------------------------------------------

def coupling_series(data: np.ndarray, coupling, grid: LevelGrid) -> np.ndarray:
    """Apply a coupling to every frame of a (frames, size) stack."""
    if isinstance(coupling, ZeroCoupling):
        return np.zeros_like(data)
    if isinstance(coupling, LocalPower):
        return data**coupling.q
    if isinstance(coupling, NonlocalKernel):
        if coupling.profile is not None:
            f = coupling.profile_values(grid)
            coeff = (coupling.factor * grid.h**grid.d) * (data @ f)
            return coeff[..., None] * f
        return data @ coupling.matrix(grid)
    raise GridError(f"unknown coupling {coupling!r}")


def coupling_V(m: GridFn, coupling) -> GridFn:
    vals = coupling_series(m.values[None, :], coupling, m.grid)[0]
    return GridFn(m.grid, vals)


def coupling_derivative(m: GridFn, coupling) -> sp.csr_matrix:
    """d(V[m])/dm as a sparse matrix (dense kernels wrapped)."""
    n = m.grid.size
    if isinstance(coupling, ZeroCoupling):
        return sp.csr_matrix((n, n))
    if isinstance(coupling, LocalPower):
        q = coupling.q
        if q == 0:
            return sp.csr_matrix((n, n))
        return sp.diags(q * m.values ** (q - 1.0)).tocsr()
    if isinstance(coupling, NonlocalKernel):
        return sp.csr_matrix(coupling.matrix(m.grid))
    raise GridError(f"unknown coupling {coupling!r}")


# ---------------------------------------------------------------------------
# sparse stencil matrices (Newton assembly and diagnostics)
# ---------------------------------------------------------------------------

def _stencil_1d(n: int, h: float, order: SchemeOrder, side: str) -> sp.csr_matrix:
    if order is SchemeOrder.SECOND:
        if side == "minus":
            offs = {0: 3.0, -1: -4.0, -2: 1.0}
        else:
            offs = {0: -3.0, 1: 4.0, 2: -1.0}
        scale = 1.0 / (2.0 * h)
    else:
        if side == "minus":
            offs = {0: 1.0, -1: -1.0}
        else:
            offs = {0: -1.0, 1: 1.0}
        scale = 1.0 / h
    rows, cols, vals = [], [], []
    idx = np.arange(n)
    for k, c in offs.items():
        rows.append(idx)
        cols.append((idx + k) % n)
        vals.append(np.full(n, c * scale))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )


def stencil_matrix(grid: LevelGrid, order: SchemeOrder, side: str, axis: int) -> sp.csr_matrix:
    """Sparse one-sided difference matrix for one axis of the (possibly 2D) grid."""
    s1 = _stencil_1d(grid.n, grid.h, order, side)
    if grid.d == 1:
        return s1
    eye = sp.identity(grid.n, format="csr")
    return (sp.kron(s1, eye) if axis == 0 else sp.kron(eye, s1)).tocsr()


def laplace_matrix(grid: LevelGrid, nu: float) -> sp.csr_matrix:
    """Sparse matrix of the diffusion term L = -nu * discrete Laplacian."""
    n, h = grid.n, grid.h
    idx = np.arange(n)
    rows = np.concatenate([idx, idx, idx])
    cols = np.concatenate([idx, (idx + 1) % n, (idx - 1) % n])
    vals = np.concatenate([np.full(n, 2.0), np.full(n, -1.0), np.full(n, -1.0)])
    l1 = sp.csr_matrix((vals * nu / h**2, (rows, cols)), shape=(n, n))
    if grid.d == 1:
        return l1
    eye = sp.identity(n, format="csr")
    return (sp.kron(l1, eye) + sp.kron(eye, l1)).tocsr()


def hamiltonian_jacobian_matrix(grid: LevelGrid, u_flat: np.ndarray, gamma: float,
                                order: SchemeOrder) -> sp.csr_matrix:
    """J(u) = dH/dU assembled sparsely from the slope diagonals and stencils."""
    shaped = u_flat.reshape(grid.shape)
    minus, plus = one_sided_shaped(shaped, grid.h, order, grid.d)
    q1, q2 = slopes_shaped(minus, plus, gamma)
    out = sp.csr_matrix((grid.size, grid.size))
    for a in range(grid.d):
        s_m = stencil_matrix(grid, order, "minus", a)
        s_p = stencil_matrix(grid, order, "plus", a)
        out = out + sp.diags(q1[a].reshape(-1)) @ s_m + sp.diags(q2[a].reshape(-1)) @ s_p
    return out.tocsr()


def transport_u_jacobian_matrix(grid: LevelGrid, m_flat: np.ndarray, u_flat: np.ndarray,
                                gamma: float, order: SchemeOrder) -> sp.csr_matrix:
    """K(m, u) = d(J(u)^T m)/du = sum_ab S_a^T diag(m hess_ab) S_b."""
    shaped = u_flat.reshape(grid.shape)
    minus, plus = one_sided_shaped(shaped, grid.h, order, grid.d)
    hess = hessian_shaped(minus, plus, gamma)
    mats = []
    for a in range(grid.d):
        mats.append(stencil_matrix(grid, order, "minus", a))
        mats.append(stencil_matrix(grid, order, "plus", a))
    m_shaped = m_flat.reshape(grid.shape)
    out = sp.csr_matrix((grid.size, grid.size))
    for i, s_i in enumerate(mats):
        for j, s_j in enumerate(mats):
            w = (m_shaped * hess[i][j]).reshape(-1)
            if np.any(w):
                out = out + s_i.T @ sp.diags(w) @ s_j
    return out.tocsr()
