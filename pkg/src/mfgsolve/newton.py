"""Coupled Newton-Raphson solve of the full discrete system.

The stacked state is x = [all U frames; all M frames].  Newton iterates on
the stacked residual (F; G) with the exact block Jacobian assembled sparsely
from the same stencils the marchers use, with step halving whenever the
2-norm of the residual fails to decrease.  Intended for coarse grids; cost
grows quickly with the grid size, which is the point of the comparison
against alternating sweeping.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NewtonError
from .grids import FieldSeries, GridFn, LevelGrid, sample
from .marchers import residual_blocks, solve_hjb
from .operators import (
    SchemeOrder,
    coupling_derivative,
    hamiltonian_jacobian_matrix,
    laplace_matrix,
    transport_u_jacobian_matrix,
)
from .problem import naive_density_guess
from .sweep import system_residual

__all__ = ["NewtonResult", "newton_solve", "stacked_residual", "assemble_jacobian"]

MAX_HALVINGS = 20


@dataclass
class NewtonResult:
    u: FieldSeries
    m: FieldSeries
    iterations: int
    residual_history: list
    seconds: float
    order: SchemeOrder


def stacked_residual(x: np.ndarray, spec, grid: LevelGrid,
                     order: SchemeOrder) -> np.ndarray:
    """Residual [F; G] of the stacked state vector."""
    p = (grid.n_t + 1) * grid.size
    u = FieldSeries(grid, x[:p].reshape(grid.n_t + 1, grid.size))
    m = FieldSeries(grid, x[p:].reshape(grid.n_t + 1, grid.size))
    f_rows, g_rows = residual_blocks(u, m, spec, order)
    return np.concatenate([f_rows.ravel(), g_rows.ravel()])


def assemble_jacobian(x: np.ndarray, spec, grid: LevelGrid,
                      order: SchemeOrder) -> sp.csr_matrix:
    """Exact sparse Jacobian of the stacked residual."""
    nt, size = grid.n_t, grid.size
    p = (nt + 1) * size
    u_frames = x[:p].reshape(nt + 1, size)
    m_frames = x[p:].reshape(nt + 1, size)
    tau = grid.tau
    eye = sp.identity(size, format="csr")
    lmat = laplace_matrix(grid, spec.nu)
    j_u = [hamiltonian_jacobian_matrix(grid, u_frames[n], spec.gamma, order)
           for n in range(nt + 1)]

    nb = nt + 1
    fu = [[None] * nb for _ in range(nb)]
    fm = [[None] * nb for _ in range(nb)]
    gu = [[None] * nb for _ in range(nb)]
    gm = [[None] * nb for _ in range(nb)]

    fu[0][0] = eye
    fm[0][0] = -coupling_derivative(GridFn(grid, m_frames[0]), spec.v0)
    vprime = [coupling_derivative(GridFn(grid, m_frames[n]), spec.v)
              for n in range(nt + 1)]
    if order is SchemeOrder.SECOND:
        for n in range(1, nt + 1):
            fu[n][n] = eye / tau + 0.5 * lmat + 0.5 * j_u[n]
            fu[n][n - 1] = -eye / tau + 0.5 * lmat + 0.5 * j_u[n - 1]
            fm[n][n] = -0.5 * vprime[n]
            fm[n][n - 1] = -0.5 * vprime[n - 1]
        for n in range(nt):
            gm[n][n] = -eye / tau - 0.5 * lmat - 0.5 * j_u[n].T
            gm[n][n + 1] = eye / tau - 0.5 * lmat - 0.5 * j_u[n + 1].T
            gu[n][n] = -0.5 * transport_u_jacobian_matrix(
                grid, m_frames[n], u_frames[n], spec.gamma, order)
            gu[n][n + 1] = -0.5 * transport_u_jacobian_matrix(
                grid, m_frames[n + 1], u_frames[n + 1], spec.gamma, order)
    else:
        for n in range(1, nt + 1):
            fu[n][n] = eye / tau + lmat + j_u[n]
            fu[n][n - 1] = -eye / tau
            fm[n][n - 1] = -vprime[n - 1]
        # G row n: -(m^{n+1}-m^n)/tau + L m^n - B(m^n, u^{n+1})
        for n in range(nt):
            gm[n][n] = eye / tau + lmat + j_u[n + 1].T
            gm[n][n + 1] = -eye / tau
            gu[n][n + 1] = transport_u_jacobian_matrix(
                grid, m_frames[n], u_frames[n + 1], spec.gamma, order)
    gm[nt][nt] = eye

    zero = sp.csr_matrix((size, size))
    for blocks in (fu, fm, gu, gm):
        for i in range(nb):
            if blocks[i][i] is None:
                blocks[i][i] = zero
    top = sp.bmat([[sp.bmat(fu, format="csr"), sp.bmat(fm, format="csr")]])
    bot = sp.bmat([[sp.bmat(gu, format="csr"), sp.bmat(gm, format="csr")]])
    return sp.vstack([top, bot]).tocsr()


def _normalized_residual(x: np.ndarray, spec, grid, order) -> float:
    p = (grid.n_t + 1) * grid.size
    u = FieldSeries(grid, x[:p].reshape(grid.n_t + 1, grid.size))
    m = FieldSeries(grid, x[p:].reshape(grid.n_t + 1, grid.size))
    res_f, res_g = system_residual(u, m, spec, order)
    return max(res_f, res_g)


def newton_solve(spec, grid: LevelGrid, order: SchemeOrder = SchemeOrder.SECOND,
                 tol: float = 1e-6, max_newton: int = 40,
                 m_init: FieldSeries | None = None,
                 u_init: FieldSeries | None = None) -> NewtonResult:
    """Damped Newton on the coupled system; stops when the normalized
    residual max(res_F, res_G) drops below tol."""
    if not (tol > 0):
        raise NewtonError(f"tolerance must be positive, got {tol}")
    t0 = time.perf_counter()
    m0 = m_init if m_init is not None else naive_density_guess(spec, grid)
    if u_init is None:
        u0, _ = solve_hjb(m0, spec, order)
    else:
        u0 = u_init
    x = np.concatenate([u0.data.ravel(), m0.data.ravel()])
    p = (grid.n_t + 1) * grid.size

    history = [_normalized_residual(x, spec, grid, order)]
    iterations = 0
    while history[-1] > tol:
        if iterations >= max_newton:
            raise NewtonError(
                f"no convergence in {max_newton} Newton iterations "
                f"(residual {history[-1]:.3e})"
            )
        r = stacked_residual(x, spec, grid, order)
        jac = assemble_jacobian(x, spec, grid, order)
        try:
            step = spla.spsolve(jac.tocsc(), r)
        except RuntimeError as exc:
            raise NewtonError(f"singular Jacobian: {exc}") from exc
        if not np.isfinite(step).all():
            raise NewtonError("singular Jacobian (non-finite Newton step)")
        r_norm = np.linalg.norm(r)
        lam = 1.0
        for _ in range(MAX_HALVINGS + 1):
            x_trial = x - lam * step
            r_trial = np.linalg.norm(stacked_residual(x_trial, spec, grid, order))
            if r_trial < r_norm or r_trial == 0.0:
                break
            lam *= 0.5
        else:
            raise NewtonError(
                f"step halving failed after {MAX_HALVINGS} tries "
                f"(residual {r_norm:.3e})"
            )
        x = x_trial
        iterations += 1
        history.append(_normalized_residual(x, spec, grid, order))

    u = FieldSeries(grid, x[:p].reshape(grid.n_t + 1, grid.size).copy())
    m = FieldSeries(grid, x[p:].reshape(grid.n_t + 1, grid.size).copy())
    return NewtonResult(u, m, iterations, history, time.perf_counter() - t0, order)
