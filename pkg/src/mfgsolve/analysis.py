"""Convergence diagnostics.

Finite-difference Jacobian blocks of the discrete system at a fixed point,
the spectral radius of the composed sweep map G_m^-1 G_u F_u^-1 F_m (its
largest-modulus eigenvalue governs local convergence, and 2/(1+rho) bounds
the admissible relaxation factor), convergence-order tables against a fine
reference, and manufactured-solution truncation studies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import AnalysisError
from .grids import FieldSeries, LevelGrid, rel_norm, restrict_series
from .marchers import residual_blocks, weighted_norm
from .operators import SchemeOrder
from .problem import LocalPower, ProblemSpec, ZeroCoupling

__all__ = [
    "JacobianBlocks",
    "SpectralInfo",
    "estimate_jacobians",
    "sweep_spectral_radius",
    "relax_bound",
    "spectral_radius_commute_check",
    "OrderRow",
    "convergence_order_table",
    "ManufacturedPair",
    "default_manufactured_pair",
    "TruncationStudy",
    "truncation_order_study",
]

MAX_DENSE_SIZE = 2000


@dataclass
class JacobianBlocks:
    """Dense blocks dF/dU, dF/dM, dG/dU, dG/dM at a computed fixed point."""

    f_u: np.ndarray
    f_m: np.ndarray
    g_u: np.ndarray
    g_m: np.ndarray
    delta: float


@dataclass(frozen=True)
class SpectralInfo:
    rho: float
    lam_max: complex


def estimate_jacobians(u_series: FieldSeries, m_series: FieldSeries, spec,
                       order: SchemeOrder, delta: float | None = None) -> JacobianBlocks:
    """Central finite differences of the residual maps, column by column.

    Independent of the analytic assembly used by the Newton solver; restricted
    to stacked sizes <= 2000 (dense O(n^3) diagnostics are desk-scale only).
    """
    grid = u_series.grid
    p = (grid.n_t + 1) * grid.size
    if p > MAX_DENSE_SIZE:
        raise AnalysisError(f"stacked size {p} exceeds dense-analysis cap {MAX_DENSE_SIZE}")
    state_inf = max(np.abs(u_series.data).max(), np.abs(m_series.data).max())
    if delta is None:
        delta = 1e-6 * (1.0 + state_inf)

    u0 = u_series.data.copy()
    m0 = m_series.data.copy()

    def blocks(u_flat, m_flat):
        f, g = residual_blocks(
            FieldSeries(grid, u_flat.reshape(u0.shape)),
            FieldSeries(grid, m_flat.reshape(m0.shape)),
            spec, order)
        return f.ravel(), g.ravel()

    f_u = np.empty((p, p))
    g_u = np.empty((p, p))
    f_m = np.empty((p, p))
    g_m = np.empty((p, p))
    uf, mf = u0.ravel(), m0.ravel()
    for j in range(p):
        up = uf.copy(); up[j] += delta
        um = uf.copy(); um[j] -= delta
        fp, gp = blocks(up, mf)
        fm_, gm_ = blocks(um, mf)
        f_u[:, j] = (fp - fm_) / (2.0 * delta)
        g_u[:, j] = (gp - gm_) / (2.0 * delta)
    for j in range(p):
        mp = mf.copy(); mp[j] += delta
        mm = mf.copy(); mm[j] -= delta
        fp, gp = blocks(uf, mp)
        fm_, gm_ = blocks(uf, mm)
        f_m[:, j] = (fp - fm_) / (2.0 * delta)
        g_m[:, j] = (gp - gm_) / (2.0 * delta)

    for name, mat in (("F_u", f_u), ("G_m", g_m)):
        if not np.isfinite(mat).all():
            raise AnalysisError(f"{name} contains non-finite entries")
        if np.linalg.cond(mat) > 1e13:
            raise AnalysisError(f"{name} is numerically singular")
    return JacobianBlocks(f_u, f_m, g_u, g_m, delta)


def sweep_spectral_radius(blocks: JacobianBlocks) -> SpectralInfo:
    """rho and largest-modulus eigenvalue of G_m^-1 G_u F_u^-1 F_m."""
    try:
        x1 = np.linalg.solve(blocks.f_u, blocks.f_m)
        comp = np.linalg.solve(blocks.g_m, blocks.g_u @ x1)
    except np.linalg.LinAlgError as exc:
        raise AnalysisError(f"singular F_u or G_m: {exc}") from exc
    eig = np.linalg.eigvals(comp)
    idx = int(np.argmax(np.abs(eig)))
    return SpectralInfo(float(np.abs(eig[idx])), complex(eig[idx]))


def relax_bound(rho: float) -> float:
    """Admissible relaxation upper bound 2 / (1 + rho)."""
    if rho < 0:
        raise AnalysisError(f"spectral radius must be >= 0, got {rho}")
    return 2.0 / (1.0 + rho)


def spectral_radius_commute_check(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Spectral radii of AB and BA (equal for all square pairs)."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise AnalysisError("matrices must be square and of equal size")
    rho_ab = float(np.max(np.abs(np.linalg.eigvals(a @ b)))) if a.size else 0.0
    rho_ba = float(np.max(np.abs(np.linalg.eigvals(b @ a)))) if a.size else 0.0
    return rho_ab, rho_ba


# ---------------------------------------------------------------------------
# convergence order tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OrderRow:
    level: int
    n: int
    err_u: float
    err_m: float
    order_u: float | None
    order_m: float | None


def convergence_order_table(levels, reference) -> list[OrderRow]:
    """Errors per level against the restriction of a fine reference solution.

    levels: sequence of (grid, U, M); reference: (U_ref, M_ref) on a grid that
    every compared level nests into.  order(l) = log2(err(l-1) / err(l)).
    """
    u_ref, m_ref = reference
    rows: list[OrderRow] = []
    prev: tuple[float, float] | None = None
    for grid, u_lvl, m_lvl in levels:
        if grid.n > u_ref.grid.n or grid.n_t > u_ref.grid.n_t:
            raise AnalysisError(
                f"reference grid {u_ref.grid.n} is coarser than compared level {grid.n}")
        ur = restrict_series(u_ref, grid)
        mr = restrict_series(m_ref, grid)
        err_u = rel_norm(u_lvl, ur)
        err_m = rel_norm(m_lvl, mr)
        if prev is None or err_u == 0.0 or err_m == 0.0:
            order_u = order_m = None
        else:
            order_u = float(np.log2(prev[0] / err_u)) if prev[0] > 0 else None
            order_m = float(np.log2(prev[1] / err_m)) if prev[1] > 0 else None
        rows.append(OrderRow(grid.level, grid.n, err_u, err_m, order_u, order_m))
        prev = (err_u, err_m)
    return rows


# ---------------------------------------------------------------------------
# manufactured-solution truncation study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManufacturedPair:
    """Smooth 1D space-time pair with the derivatives the study needs."""

    u: Callable
    u_t: Callable
    u_x: Callable
    u_xx: Callable
    m: Callable
    m_t: Callable
    m_x: Callable
    m_xx: Callable


def default_manufactured_pair(amp_u: float = 1.0, amp_m: float = 0.5) -> ManufacturedPair:
    """Smooth pair with degenerate critical points of u.

    u_x = a sin^3(2 pi x) cos t vanishes to third order where it changes
    sign, so the upwind channel split of grad_p H stays C^2 there and the
    transport operator keeps its second-order truncation everywhere.  (With a
    simple-zero gradient, e.g. u = sin(2 pi x), the split max(g,0)/min(g,0)
    is only C^0 at the crossings and the one-sided adjoint stencils leave
    O(1) pointwise defects there; see sine_manufactured_pair.)
    """
    w = 2.0 * np.pi
    # P'(x) = sin^3(w x);  P = (-cos(w x) + cos^3(w x)/3) / w
    p = lambda x: (-np.cos(w * x) + np.cos(w * x) ** 3 / 3.0) / w
    return ManufacturedPair(
        u=lambda x, t: amp_u * p(x) * np.cos(t),
        u_t=lambda x, t: -amp_u * p(x) * np.sin(t),
        u_x=lambda x, t: amp_u * np.sin(w * x) ** 3 * np.cos(t),
        u_xx=lambda x, t: amp_u * 3.0 * w * np.sin(w * x) ** 2 * np.cos(w * x) * np.cos(t),
        m=lambda x, t: 1.0 + amp_m * np.cos(w * x) * np.exp(-t),
        m_t=lambda x, t: -amp_m * np.cos(w * x) * np.exp(-t),
        m_x=lambda x, t: -amp_m * w * np.sin(w * x) * np.exp(-t),
        m_xx=lambda x, t: -amp_m * w**2 * np.cos(w * x) * np.exp(-t),
    )


def sine_manufactured_pair(amp_u: float = 1.0, amp_m: float = 0.5) -> ManufacturedPair:
    """u = a sin(2 pi x) cos t, m = 1 + b cos(2 pi x) exp(-t).

    u_x crosses zero with nonzero slope, which puts C^0 kinks into the upwind
    channels of the transport operator; its truncation degrades to O(1) at
    those isolated points (O(h^(1/2)) in the weighted norm).  Kept as a
    characterization input for exactly that effect.
    """
    w = 2.0 * np.pi
    return ManufacturedPair(
        u=lambda x, t: amp_u * np.sin(w * x) * np.cos(t),
        u_t=lambda x, t: -amp_u * np.sin(w * x) * np.sin(t),
        u_x=lambda x, t: amp_u * w * np.cos(w * x) * np.cos(t),
        u_xx=lambda x, t: -amp_u * w**2 * np.sin(w * x) * np.cos(t),
        m=lambda x, t: 1.0 + amp_m * np.cos(w * x) * np.exp(-t),
        m_t=lambda x, t: -amp_m * np.cos(w * x) * np.exp(-t),
        m_x=lambda x, t: -amp_m * w * np.sin(w * x) * np.exp(-t),
        m_xx=lambda x, t: -amp_m * w**2 * np.cos(w * x) * np.exp(-t),
    )


@dataclass(frozen=True)
class TruncationStudy:
    levels: tuple
    h_values: tuple
    residuals: tuple
    slope: float


def _continuous_sources(mfd: ManufacturedPair, spec: ProblemSpec, x, t_u, t_m,
                        t_mix_u, t_mix_m):
    """Pointwise residuals of the continuous system for the manufactured pair.

    S_u is evaluated at time t_u with the coupling at time t_m (the discrete
    scheme may lag V); the transport source mixes m at t_mix_m with u at
    t_mix_u, matching the discrete pairing.
    """
    gamma, nu = spec.gamma, spec.nu
    if isinstance(spec.v, LocalPower):
        v_val = mfd.m(x, t_m) ** spec.v.q
    elif isinstance(spec.v, ZeroCoupling):
        v_val = 0.0
    else:
        raise AnalysisError("truncation study requires a pointwise coupling")
    ux = mfd.u_x(x, t_u)
    grad_term = np.abs(ux) ** gamma if gamma > 0 else 0.0
    s_u = mfd.u_t(x, t_u) - nu * mfd.u_xx(x, t_u) + spec.phi(x) + grad_term - v_val

    uxm = mfd.u_x(x, t_mix_u)
    uxxm = mfd.u_xx(x, t_mix_u)
    if gamma > 0:
        mag = np.where(np.abs(uxm) < 1e-30, 0.0, np.abs(uxm) ** (gamma - 2.0))
        transport = gamma * (mfd.m_x(x, t_mix_m) * mag * uxm
                             + (gamma - 1.0) * mfd.m(x, t_mix_m) * mag * uxxm)
    else:
        transport = 0.0
    s_m = (-mfd.m_t(x, t_mix_m) - nu * mfd.m_xx(x, t_mix_m) - transport)
    return s_u, s_m


def truncation_order_study(mfd: ManufacturedPair, spec: ProblemSpec, orders,
                           levels) -> dict:
    """Insert the sampled manufactured pair into the discrete equations and
    regress the residual norm against h (tau and h halve together)."""
    if spec.d != 1:
        raise AnalysisError("the manufactured study is one-dimensional")
    if spec.gamma != 0 and spec.gamma < 2:
        raise AnalysisError("transport source needs gamma = 0 or gamma >= 2")
    results = {}
    for order in orders:
        res_per_level = []
        hs = []
        for lev in levels:
            grid = LevelGrid(lev, 1, 2**lev, 2**lev, spec.t_end)
            x = grid.axis_points()
            times = grid.times()
            u_data = np.stack([mfd.u(x, t) for t in times])
            m_data = np.stack([mfd.m(x, t) for t in times])
            # compatible data: the initial/terminal rows vanish identically
            import dataclasses as _dc

            if isinstance(spec.v0, ZeroCoupling):
                u0_fn = lambda xs: mfd.u(xs, 0.0)
            elif isinstance(spec.v0, LocalPower):
                q0 = spec.v0.q
                u0_fn = lambda xs: mfd.u(xs, 0.0) - mfd.m(xs, 0.0) ** q0
            else:
                raise AnalysisError("truncation study requires a pointwise V0")
            spec_c = _dc.replace(spec, u0=u0_fn, m_T=lambda xs: mfd.m(xs, spec.t_end))
            useries = FieldSeries(grid, u_data)
            mseries = FieldSeries(grid, m_data)
            f_rows, g_rows = residual_blocks(useries, mseries, spec_c, order)
            tau = grid.tau
            if order is SchemeOrder.SECOND:
                for n in range(1, grid.n_t + 1):
                    s0u, _ = _continuous_sources(mfd, spec, x, times[n - 1],
                                                 times[n - 1], times[n - 1], times[n - 1])
                    s1u, _ = _continuous_sources(mfd, spec, x, times[n],
                                                 times[n], times[n], times[n])
                    f_rows[n] -= 0.5 * (s0u + s1u)
                for n in range(grid.n_t):
                    _, s0m = _continuous_sources(mfd, spec, x, times[n], times[n],
                                                 times[n], times[n])
                    _, s1m = _continuous_sources(mfd, spec, x, times[n + 1], times[n + 1],
                                                 times[n + 1], times[n + 1])
                    g_rows[n] -= -0.5 * (s0m + s1m)
            else:
                for n in range(1, grid.n_t + 1):
                    s_u, _ = _continuous_sources(mfd, spec, x, times[n],
                                                 times[n - 1], times[n], times[n])
                    f_rows[n] -= s_u
                for n in range(grid.n_t):
                    _, s_m = _continuous_sources(mfd, spec, x, times[n], times[n],
                                                 times[n + 1], times[n])
                    g_rows[n] -= s_m
            res = np.sqrt(weighted_norm(f_rows, grid) ** 2
                          + weighted_norm(g_rows, grid) ** 2)
            res_per_level.append(res)
            hs.append(grid.h)
        logs_h = np.log(np.array(hs))
        logs_r = np.log(np.maximum(np.array(res_per_level), 1e-300))
        slope = float(np.polyfit(logs_h, logs_r, 1)[0]) if len(hs) > 1 else float("nan")
        results[order] = TruncationStudy(tuple(levels), tuple(hs),
                                         tuple(res_per_level), slope)
    return results
