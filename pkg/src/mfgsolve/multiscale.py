"""Level-by-level solve: coarse solve, interpolate the density upward, sweep.

The coarsest level is solved either by relaxed alternating sweeping or by the
coupled Newton method.  Each finer level starts from the space-time linear
interpolation of the previous level's density (odd points average their 2 or
4 coarse neighbors, coincident points copy exactly) and is refined by the
alternating sweep.  The hierarchy never returns to a coarse level.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import GridError, MultiscaleError, SweepAborted
from .grids import FieldSeries, LevelGrid
from .operators import SchemeOrder
from .problem import naive_density_guess
from .sweep import RelaxSchedule, SweepReport, alternating_sweep

__all__ = ["LevelReport", "interpolate_up", "multiscale_solve"]


def _refine_space_axis(arr: np.ndarray, axis: int, method: str) -> np.ndarray:
    """Double one periodic spatial axis; even points copy, odd points interpolate."""
    n = arr.shape[axis]
    out_shape = list(arr.shape)
    out_shape[axis] = 2 * n
    out = np.empty(out_shape, dtype=arr.dtype)
    even = [slice(None)] * arr.ndim
    odd = [slice(None)] * arr.ndim
    even[axis] = slice(0, 2 * n, 2)
    odd[axis] = slice(1, 2 * n, 2)
    nxt = np.roll(arr, -1, axis=axis)
    out[tuple(even)] = arr
    if method == "linear":
        out[tuple(odd)] = 0.5 * (arr + nxt)
    else:  # cubic midpoints, 4-point periodic stencil
        prv = np.roll(arr, 1, axis=axis)
        nx2 = np.roll(arr, -2, axis=axis)
        out[tuple(odd)] = (-prv + 9.0 * arr + 9.0 * nxt - nx2) / 16.0
    return out


def _refine_time(frames: np.ndarray, method: str) -> np.ndarray:
    """Double the frame count; time is not periodic, so cubic falls back to
    linear next to the endpoints."""
    nt = frames.shape[0] - 1
    out = np.empty((2 * nt + 1,) + frames.shape[1:], dtype=frames.dtype)
    out[0::2] = frames
    mid = 0.5 * (frames[:-1] + frames[1:])
    if method == "cubic" and nt >= 3:
        interior = (-frames[:-3] + 9.0 * frames[1:-2] + 9.0 * frames[2:-1]
                    - frames[3:]) / 16.0
        mid[1:-1] = interior
    out[1::2] = mid
    return out


def interpolate_up(x: FieldSeries, fine_grid: LevelGrid | None = None,
                   method: str = "linear") -> FieldSeries:
    """Space-time interpolation of a series onto the next finer level."""
    if method not in ("linear", "cubic"):
        raise GridError(f"unknown interpolation method {method!r}")
    coarse = x.grid
    fine = fine_grid if fine_grid is not None else coarse.refined()
    if not fine.is_refinement_of(coarse):
        raise GridError(
            f"grid {fine.n}x{fine.n_t} is not the refinement of {coarse.n}x{coarse.n_t}"
        )
    shaped = x.data.reshape((coarse.n_t + 1,) + coarse.shape)
    for a in range(coarse.d):
        shaped = _refine_space_axis(shaped, 1 + a, method)
    shaped = _refine_time(shaped, method)
    return FieldSeries(fine, shaped.reshape(fine.n_t + 1, fine.size))


@dataclass
class LevelReport:
    """Outcome of one hierarchy level."""

    level: int
    n: int
    n_t: int
    solver: str
    sweep: SweepReport | None
    interp_seconds: float
    seconds: float

    @property
    def iterations(self) -> int:
        return self.sweep.n_iterations if self.sweep is not None else 0


def multiscale_solve(spec, grids: list[LevelGrid], order: SchemeOrder, eps: float,
                     schedules, coarse_solver: str = "sweep",
                     interp: str = "linear", max_iters: int = 200,
                     eps_inner: float = 1e-7, newton_tol: float | None = None,
                     keep_levels: bool = False):
    """Solve on the finest grid of a nested hierarchy.

    schedules: one RelaxSchedule applied everywhere, or a sequence with one
    entry per level.  Returns (U, M, reports) and, with keep_levels, also the
    per-level (grid, U, M) solutions of the whole chain.
    """
    if not grids:
        raise MultiscaleError(-1, "empty hierarchy")
    for lo, hi in zip(grids, grids[1:]):
        if not hi.is_refinement_of(lo):
            raise MultiscaleError(hi.level, f"level {hi.level} does not refine {lo.level}")
    if isinstance(schedules, RelaxSchedule):
        schedules = [schedules] * len(grids)
    if len(schedules) != len(grids):
        raise MultiscaleError(-1, f"need {len(grids)} schedules, got {len(schedules)}")

    reports: list[LevelReport] = []
    solutions = []
    u_cur = m_cur = None
    for i, grid in enumerate(grids):
        t0 = time.perf_counter()
        interp_seconds = 0.0
        if i == 0:
            m_guess = naive_density_guess(spec, grid)
            u_guess = None
            if coarse_solver == "newton":
                from .newton import newton_solve

                tol = newton_tol if newton_tol is not None else eps
                try:
                    result = newton_solve(spec, grid, order, tol=tol)
                except Exception as exc:
                    raise MultiscaleError(grid.level, f"coarse Newton solve failed: {exc}") from exc
                u_cur, m_cur = result.u, result.m
                reports.append(LevelReport(grid.level, grid.n, grid.n_t, "newton",
                                           None, 0.0, time.perf_counter() - t0))
                if keep_levels:
                    solutions.append((grid, u_cur, m_cur))
                continue
            solver_name = "sweep"
        else:
            ti = time.perf_counter()
            m_guess = interpolate_up(m_cur, grid, method=interp)
            u_guess = interpolate_up(u_cur, grid, method=interp)
            interp_seconds = time.perf_counter() - ti
            solver_name = "sweep"
        try:
            u_cur, m_cur, rep = alternating_sweep(
                m_guess, spec, order, eps, schedules[i], max_iters=max_iters,
                u_init=u_guess, eps_inner=eps_inner)
        except SweepAborted as exc:
            raise MultiscaleError(grid.level, str(exc)) from exc
        if not rep.converged:
            raise MultiscaleError(grid.level, rep.message)
        reports.append(LevelReport(grid.level, grid.n, grid.n_t, solver_name,
                                   rep, interp_seconds, time.perf_counter() - t0))
        if keep_levels:
            solutions.append((grid, u_cur, m_cur))
    if keep_levels:
        return u_cur, m_cur, reports, solutions
    return u_cur, m_cur, reports
