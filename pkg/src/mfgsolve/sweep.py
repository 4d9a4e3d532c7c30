"""Alternating-sweeping fixed-point iteration with relaxation.

One iteration solves the HJB equation with M frozen, relaxes U, solves the
KFP equation with the updated U frozen, and relaxes M:

    U <- alpha U_new + (1 - alpha) U_old,
    M <- alpha M_new + (1 - alpha) M_old.

Relative changes err_U, err_M are measured between the unrelaxed solve output
and the previous iterate; the loop stops once max(err_U, err_M) <= eps.  The
relaxation factor follows a schedule (fixed or growing), switches to a late
factor once max err < 5 eps, and backs off automatically when the iteration
diverges or stalls.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InnerIterationDiverged, LinearSolveError, SweepAborted
from .grids import FieldSeries, rel_norm
from .marchers import residual_blocks, solve_hjb, solve_kfp, weighted_norm
from .operators import SchemeOrder

__all__ = [
    "RelaxSchedule",
    "SweepIteration",
    "SweepReport",
    "alternating_sweep",
    "system_residual",
    "relax",
]

ALPHA_FLOOR = 1e-3
SWEEP_LOG_HEADER = "iteration,alpha,err_u,err_m,res_f,res_g,seconds"


@dataclass(frozen=True)
class RelaxSchedule:
    """Relaxation factors: alpha_k = min(alpha0 * growth^k, 1), switching to
    alpha_late once the iterates are within 5 eps of convergence."""

    alpha0: float = 1.0
    growth: float = 1.0
    alpha_late: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.alpha0 <= 1.0):
            raise ValueError(f"alpha0 must lie in (0, 1], got {self.alpha0}")
        if self.growth < 1.0:
            raise ValueError(f"growth must be >= 1, got {self.growth}")
        if not (0.0 < self.alpha_late <= 1.0):
            raise ValueError(f"alpha_late must lie in (0, 1], got {self.alpha_late}")

    @classmethod
    def fixed(cls, alpha: float) -> "RelaxSchedule":
        return cls(alpha0=alpha, growth=1.0, alpha_late=alpha)


@dataclass(frozen=True)
class SweepIteration:
    index: int
    alpha: float
    err_u: float
    err_m: float
    res_f: float
    res_g: float
    seconds: float


@dataclass
class SweepReport:
    """Per-iteration history of one alternating-sweeping run."""

    eps: float
    iterations: list = field(default_factory=list)
    converged: bool = False
    message: str = ""
    total_seconds: float = 0.0
    inner_total: int = 0
    inner_steps: int = 0
    backoffs: list = field(default_factory=list)

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)

    @property
    def final_err(self) -> float:
        if not self.iterations:
            return float("inf")
        last = self.iterations[-1]
        return max(last.err_u, last.err_m)

    @property
    def err_m_history(self) -> np.ndarray:
        return np.array([it.err_m for it in self.iterations])

    @property
    def err_u_history(self) -> np.ndarray:
        return np.array([it.err_u for it in self.iterations])

    @property
    def average_inner(self) -> float:
        return self.inner_total / self.inner_steps if self.inner_steps else 0.0

    def write_csv(self, stream) -> None:
        stream.write(SWEEP_LOG_HEADER + "\n")
        for it in self.iterations:
            stream.write(
                f"{it.index},{it.alpha:.17g},{it.err_u:.17g},{it.err_m:.17g},"
                f"{it.res_f:.17g},{it.res_g:.17g},{it.seconds:.6f}\n"
            )


def relax(new: FieldSeries, old: FieldSeries, alpha: float) -> FieldSeries:
    """Affine relaxation; alpha = 1 returns the new iterate unchanged (bitwise)."""
    if alpha == 1.0:
        return new
    return FieldSeries(new.grid, alpha * new.data + (1.0 - alpha) * old.data)


def system_residual(u_series: FieldSeries, m_series: FieldSeries, spec,
                    order: SchemeOrder) -> tuple[float, float]:
    """Normalized residual of each discrete block (0 at an exact solution).

    Residual rows are measured in the weighted norm and scaled by the
    magnitude of the terms entering the rows, so the value is a relative
    defect independent of the size of the Hamiltonian data.
    """
    f_rows, g_rows, scale_f, scale_g = residual_blocks(
        u_series, m_series, spec, order, with_scales=True)
    grid = u_series.grid
    res_f = weighted_norm(f_rows, grid) / (1.0 + scale_f)
    res_g = weighted_norm(g_rows, grid) / (1.0 + scale_g)
    return res_f, res_g


DIVERGE_FACTOR = 20.0  # err beyond this multiple of the best seen marks divergence
MAX_BACKOFFS = 12


def alternating_sweep(m_init: FieldSeries, spec, order: SchemeOrder, eps: float,
                      schedule: RelaxSchedule, max_iters: int = 200,
                      u_init: FieldSeries | None = None,
                      eps_inner: float = 1e-7,
                      compute_residuals: bool = True,
                      adaptive: bool = True,
                      log_stream=None):
    """Run the alternating sweep until max(err_U, err_M) <= eps.

    Returns (U, M, report).  When the iteration diverges (the local map can
    have eigenvalues below -1, where only a small relaxation factor
    contracts), detected as the error exceeding 20x the best value seen or as
    a marching failure, the sweep rewinds to its best iterate and halves an
    internal scale on the scheduled alpha; the late-stage alpha switch is
    disabled if it is seen to amplify the error.  Transient error growth
    during far-from-fixed-point traversal stays untouched.  adaptive=False
    turns the guards off, leaving the plain relaxed iteration (marching
    failures then abort immediately).  After max_iters the best iterate is
    returned with report.converged False; non-finite iterates and repeated
    marching failures abort with SweepAborted carrying the partial report.
    """
    if not (0.0 < eps < 1.0):
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    grid = m_init.grid
    report = SweepReport(eps=eps)
    u_prev = u_init if u_init is not None else FieldSeries.constant(grid, 1.0)
    m_cur = m_init
    best = (u_prev, m_cur, float("inf"))
    guard = 1.0
    prev_err = float("inf")
    late_enabled = True
    late = False
    t_start = time.perf_counter()
    if log_stream is not None:
        log_stream.write(SWEEP_LOG_HEADER + "\n")

    def back_off(k, reason):
        nonlocal guard, prev_err, u_prev, m_cur
        guard = max(guard * 0.5, ALPHA_FLOOR)
        u_prev, m_cur = best[0], best[1]
        prev_err = best[2]
        report.backoffs.append((k, reason, guard))

    k = 0
    attempts = 0
    while k < max_iters and attempts < max_iters + MAX_BACKOFFS:
        attempts += 1
        t0 = time.perf_counter()
        if late:
            alpha = schedule.alpha_late * guard
        else:
            alpha = schedule.alpha0 * schedule.growth**k * guard
        alpha = min(max(alpha, ALPHA_FLOOR), 1.0)
        try:
            u_new, stats = solve_hjb(m_cur, spec, order, eps_inner=eps_inner)
            err_u = rel_norm(u_new, u_prev)
            u_rel = relax(u_new, u_prev, alpha)
            m_new = solve_kfp(u_rel, spec, order)
            err_m = rel_norm(m_new, m_cur)
            m_rel = relax(m_new, m_cur, alpha)
            finite = np.isfinite(u_rel.data).all() and np.isfinite(m_rel.data).all()
        except (InnerIterationDiverged, LinearSolveError) as exc:
            if adaptive and len(report.backoffs) < MAX_BACKOFFS \
                    and best[2] < float("inf") and guard > ALPHA_FLOOR:
                back_off(k, f"marching failure: {exc}")
                continue
            report.message = f"marching failed at iteration {k}: {exc}"
            report.total_seconds = time.perf_counter() - t_start
            raise SweepAborted(report.message, report) from exc
        report.inner_total += stats.total
        report.inner_steps += len(stats.inner_iterations)
        if not finite:
            if adaptive and len(report.backoffs) < MAX_BACKOFFS \
                    and best[2] < float("inf") and guard > ALPHA_FLOOR:
                back_off(k, "non-finite iterate")
                continue
            report.message = f"non-finite iterate at iteration {k} (alpha={alpha:g})"
            report.total_seconds = time.perf_counter() - t_start
            raise SweepAborted(report.message, report)
        u_prev, m_cur = u_rel, m_rel

        if compute_residuals:
            res_f, res_g = system_residual(u_prev, m_cur, spec, order)
        else:
            res_f = res_g = float("nan")
        seconds = time.perf_counter() - t0
        rec = SweepIteration(k, alpha, err_u, err_m, res_f, res_g, seconds)
        report.iterations.append(rec)
        if log_stream is not None:
            log_stream.write(
                f"{k},{alpha:.17g},{err_u:.17g},{err_m:.17g},"
                f"{res_f:.17g},{res_g:.17g},{seconds:.6f}\n"
            )

        err = max(err_u, err_m)
        if err < best[2]:
            best = (u_prev, m_cur, err)
        if err <= eps:
            report.converged = True
            break
        if adaptive and late and err > prev_err:
            late_enabled = False  # the larger late-stage alpha amplifies here
        late = late_enabled and err < 5.0 * eps
        prev_err = err
        if adaptive and err > DIVERGE_FACTOR * best[2]:
            if len(report.backoffs) >= MAX_BACKOFFS:
                # the map repels at the relaxation floor; more rewinds would
                # only replay the same trajectory
                report.message = (
                    f"diverging at the relaxation floor after "
                    f"{len(report.backoffs)} back-offs (best err {best[2]:.3e})")
                break
            back_off(k, "divergence")
        k += 1

    report.total_seconds = time.perf_counter() - t_start
    if report.converged:
        return u_prev, m_cur, report
    report.message = report.message or (
        f"not converged after {report.n_iterations} iterations "
        f"(best err {best[2]:.3e}, eps {eps:.1e})"
    )
    return best[0], best[1], report
