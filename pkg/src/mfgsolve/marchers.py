"""Time marching for the decoupled equations.

With the density series M frozen, the HJB equation is marched forward with an
inner Newton linearization of the Hamiltonian per time step:

    (I + c L + c dH/dU(Z^k)) Z^{k+1}
        = (I - c L) u^n + c (V[m^n] + V[m^{n+1}] - H(D u^n) - H(D Z^k)
                             + dH/dU(Z^k) Z^k),           c = tau/2

starting from Z^0 = u^n, until ||Z^{k+1} - Z^k|| / ||Z^k|| < eps_inner.
With the value series U frozen, the KFP equation is marched backward through
linear solves with the transposed Hamiltonian linearization:

    (I + c L + c J(u^n)^T) m^n = (I - c L - c J(u^{n+1})^T) m^{n+1}.

The first-order variant replaces Crank-Nicolson by implicit Euler and the
width-2 stencils by simple upwind differences; its HJB step uses the lagged
coupling V[m^n] and its KFP step pairs m^n with J(u^{n+1})^T.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import GridError, InnerIterationDiverged, LinearSolveError
from .grids import FieldSeries, LevelGrid, sample
from .linsolve import PeriodicBandMatrix, StencilOperator, make_fft_precond, solve
from .operators import (
    SchemeOrder,
    coupling_series,
    hamiltonian_shaped,
    laplace_shaped,
    one_sided_shaped,
    slopes_shaped,
    adjoint_minus_shaped,
    adjoint_plus_shaped,
)

log = logging.getLogger(__name__)

__all__ = ["HjbStats", "solve_hjb", "solve_kfp", "residual_blocks", "weighted_norm"]

DEFAULT_EPS_INNER = 1e-7
DEFAULT_MAX_INNER = 50
TOL_1D = 1e-12
TOL_HJB_2D = 1e-10
TOL_KFP_2D = 1e-12  # mass conservation rides on the KFP solve accuracy


@dataclass(frozen=True)
class HjbStats:
    """Inner-iteration counts of one HJB sweep (one entry per time step)."""

    inner_iterations: tuple

    @property
    def average(self) -> float:
        return float(np.mean(self.inner_iterations)) if self.inner_iterations else 0.0

    @property
    def total(self) -> int:
        return int(np.sum(self.inner_iterations)) if self.inner_iterations else 0


class _Stepper:
    """Per-grid assembly helpers shared by the two marchers."""

    def __init__(self, grid: LevelGrid, spec, order: SchemeOrder):
        self.grid = grid
        self.spec = spec
        self.order = order
        self.d = grid.d
        self.h = grid.h
        self.tau = grid.tau
        self.nu = spec.nu
        self.gamma = spec.gamma
        self.c = grid.tau / 2.0 if order is SchemeOrder.SECOND else grid.tau
        self.shape = grid.shape
        self.phi = sample(spec.phi, grid).shaped()
        self._preconds = {}
        self.precond = self.precond_for(self.c) if grid.d == 2 else None
        self.tol_hjb = TOL_1D if grid.d == 1 else TOL_HJB_2D
        self.tol_kfp = TOL_1D if grid.d == 1 else TOL_KFP_2D

    def precond_for(self, c: float):
        if c not in self._preconds:
            self._preconds[c] = make_fft_precond(self.shape, c, self.nu, self.h)
        return self._preconds[c]

    # shaped-array wrappers -------------------------------------------------
    def grad(self, w):
        return one_sided_shaped(w, self.h, self.order, self.d)

    def ham(self, minus, plus, theta=1.0):
        h = hamiltonian_shaped(minus, plus, self.phi, self.gamma)
        if theta == 1.0:
            return h
        return self.phi + theta * (h - self.phi)

    def slopes(self, minus, plus, theta=1.0):
        q1, q2 = slopes_shaped(minus, plus, self.gamma)
        if theta == 1.0:
            return q1, q2
        return [theta * q for q in q1], [theta * q for q in q2]

    def lap(self, w):
        return laplace_shaped(w, self.h, self.nu, self.d)

    def j_dot(self, q1, q2, minus, plus):
        """J(Z) Z evaluated from an existing gradient pair."""
        out = q1[0] * minus[0] + q2[0] * plus[0]
        for a in range(1, self.d):
            out = out + q1[a] * minus[a] + q2[a] * plus[a]
        return out

    def jt_apply(self, q1, q2, m):
        """J^T m (the transport operator is B = -J^T m)."""
        out = np.zeros_like(m)
        for a in range(self.d):
            ax = m.ndim - self.d + a
            out += adjoint_minus_shaped(q1[a] * m, self.h, self.order, ax)
            out += adjoint_plus_shaped(q2[a] * m, self.h, self.order, ax)
        return out

    # implicit operators ----------------------------------------------------
    def _band_1d(self, q1, q2, c) -> PeriodicBandMatrix:
        h = self.h
        visc = c * self.nu / h**2
        base0 = 1.0 + 2.0 * visc
        base1 = -visc
        if self.order is SchemeOrder.SECOND:
            w = c / (2.0 * h)
            diags = {
                0: base0 + 3.0 * w * (q1[0] - q2[0]),
                -1: base1 - 4.0 * w * q1[0],
                -2: w * q1[0],
                1: base1 + 4.0 * w * q2[0],
                2: -w * q2[0],
            }
        else:
            w = c / h
            diags = {
                0: base0 + w * (q1[0] - q2[0]),
                -1: base1 - w * q1[0],
                1: base1 + w * q2[0],
            }
        return PeriodicBandMatrix(self.grid.n, diags)

    def system_with_coef(self, q1, q2, c):
        """Implicit operator I + c L + c J for the current slopes."""
        if self.d == 1:
            return self._band_1d(q1, q2, c)
        precond = self.precond_for(c)

        def apply(xflat):
            x = np.asarray(xflat, dtype=np.float64).reshape(self.shape)
            minus, plus = self.grad(x)
            y = x + c * self.lap(x) + c * self.j_dot(q1, q2, minus, plus)
            return y.reshape(-1)

        return StencilOperator(self.grid.size, apply, precond)

    def hjb_system(self, q1, q2):
        return self.system_with_coef(q1, q2, self.c)

    def kfp_system(self, q1, q2):
        """Transposed implicit operator I + c L + c J^T."""
        if self.d == 1:
            return self._band_1d(q1, q2, self.c).transpose()
        c = self.c

        def apply(xflat):
            x = np.asarray(xflat, dtype=np.float64).reshape(self.shape)
            y = x + c * self.lap(x) + c * self.jt_apply(q1, q2, x)
            return y.reshape(-1)

        return StencilOperator(self.grid.size, apply, self.precond)


def _initial_u(spec, grid, m0_row: np.ndarray) -> np.ndarray:
    u0 = sample(spec.u0, grid).values
    v0 = coupling_series(m0_row[None, :], spec.v0, grid)[0]
    return u0 + v0


def solve_hjb(m_series: FieldSeries, spec, order: SchemeOrder,
              eps_inner: float = DEFAULT_EPS_INNER,
              max_inner: int = DEFAULT_MAX_INNER):
    """March the HJB equation forward for a frozen density series.

    Returns the value series and the inner-iteration statistics.
    """
    if not (0.0 < eps_inner < 1.0):
        raise GridError(f"eps_inner must lie in (0, 1), got {eps_inner}")
    grid = m_series.grid
    if spec.d != grid.d:
        raise GridError("problem dimension does not match the grid")
    st = _Stepper(grid, spec, order)
    mdata = m_series.data
    m_min = mdata.min()
    if m_min < -1e-3 * max(mdata.max(), 0.0):
        log.warning("density guess has negative values (min %.3e)", m_min)

    v_all = coupling_series(mdata, spec.v, grid)
    u = np.empty_like(mdata)
    u[0] = _initial_u(spec, grid, mdata[0])
    counts = []
    for n in range(grid.n_t):
        u_n = u[n].reshape(st.shape)
        v_lo = v_all[n].reshape(st.shape)
        v_hi = v_all[n + 1].reshape(st.shape)
        # Rannacher-style guard: trapezoidal stepping cannot damp an initial
        # layer whose Hamiltonian dwarfs the solution scale (it locks onto a
        # spurious steep branch); such steps take L-stable backward-Euler time
        # steps with the same spatial stencils instead.
        euler = False
        if st.order is SchemeOrder.SECOND and st.gamma > 0:
            h_n = st.ham(*st.grad(u_n)) - st.phi
            violence = st.c * float(np.max(np.abs(h_n)))
            euler = violence > VIOLENCE_RATIO * max(1.0, float(np.max(np.abs(u_n))))
        try:
            u_next, k = _implicit_step(st, u_n, v_lo, v_hi, 1.0, eps_inner,
                                       max_inner, euler=euler)
        except (InnerIterationDiverged, LinearSolveError):
            u_next, k = _robust_step(st, u_n, v_lo, v_hi, eps_inner, max_inner,
                                     n, euler)
        u[n + 1] = u_next.reshape(-1)
        counts.append(k)
    return FieldSeries(grid, u), HjbStats(tuple(counts))


MAX_SUBSTEP_DEPTH = 6
# a step whose Hamiltonian increment exceeds this multiple of the solution
# scale is treated as an initial-layer step (backward-Euler smoothing)
VIOLENCE_RATIO = 4.0


def _robust_step(st, u_n, v_lo, v_hi, eps_inner, max_inner, n, euler=False):
    """Globalized fallbacks for a time step whose plain Newton diverges.

    First continuation in the Hamiltonian strength (theta ramping to 1 with
    warm starts), which still solves the exact implicit relation; if even the
    homotopy fails, substep the same scheme with interpolated coupling.
    """
    try:
        z, k = _homotopy_step(st, u_n, v_lo, v_hi, 1.0, eps_inner, max_inner, euler)
        log.info("time step %d resolved by Hamiltonian continuation", n)
        return z, k
    except (InnerIterationDiverged, LinearSolveError):
        pass
    for depth in range(1, MAX_SUBSTEP_DEPTH + 1):
        nsub = 2**depth
        try:
            z, k = u_n, 0
            for j in range(nsub):
                th0, th1 = j / nsub, (j + 1) / nsub
                va = (1 - th0) * v_lo + th0 * v_hi
                vb = (1 - th1) * v_lo + th1 * v_hi
                try:
                    z, kj = _implicit_step(st, z, va, vb, 1.0 / nsub,
                                           eps_inner, max_inner, euler=euler)
                except (InnerIterationDiverged, LinearSolveError):
                    z, kj = _homotopy_step(st, z, va, vb, 1.0 / nsub,
                                           eps_inner, max_inner, euler)
                k += kj
            log.info("time step %d resolved with %d substeps", n, nsub)
            return z, k
        except (InnerIterationDiverged, LinearSolveError):
            continue
    raise InnerIterationDiverged(n, float("nan"), max_inner)


def _homotopy_step(st, u_n, v_lo, v_hi, frac, eps_inner, max_inner, euler=False):
    """Solve one implicit step by ramping the gradient term's strength.

    Adaptive continuation: each accepted stage's solution warm-starts the
    next, the ramp factor bisects geometrically when a stage's Newton fails,
    and the final stage (theta = 1) satisfies the unmodified implicit
    relation, so the discrete scheme is unchanged.  Needed when the
    Hamiltonian at the incoming data is orders of magnitude stiffer than the
    balanced state (e.g. |grad u|^10 on rough initial data), where plain
    Newton has no usable descent path.
    """
    pair = st.grad(u_n)
    h0 = st.ham(*pair) - st.phi
    scale = float(np.max(np.abs(h0)))
    u_scale = max(float(np.max(np.abs(u_n))), 1.0)
    c = (st.tau if euler else st.c) * frac
    if scale * c <= 10.0 * u_scale:
        theta0 = 1.0
    else:
        theta0 = 1e-3 * u_scale / (scale * c)
    z, total = _implicit_step(st, u_n, v_lo, v_hi, frac, eps_inner, max_inner,
                              theta=theta0, euler=euler)
    cur = theta0
    stages = 0
    while cur < 1.0:
        trial = min(cur * 10.0, 1.0)
        while True:
            stages += 1
            if stages > 200:
                raise InnerIterationDiverged(-1, float("nan"), max_inner)
            try:
                z_new, k = _implicit_step(st, u_n, v_lo, v_hi, frac, eps_inner,
                                          max_inner, theta=trial, z0=z, euler=euler)
                break
            except (InnerIterationDiverged, LinearSolveError):
                nxt = float(np.sqrt(cur * trial))
                if nxt / cur < 1.0 + 1e-4:
                    raise
                trial = nxt
        z = z_new
        total += k
        cur = trial
    return z, total


def _implicit_step(st: _Stepper, u_n, v_lo, v_hi, frac, eps_inner, max_inner,
                   theta=1.0, z0=None, euler=False):
    """One implicit step of length frac * tau from u_n, via safeguarded Newton.

    Returns (u_next, inner_iterations).  Full Newton steps are taken whenever
    they decrease the implicit defect ||Z + c L Z + c H(D Z) - b0|| (always the
    case for smooth dynamics, keeping the usual 2-iteration behavior); violent
    Hamiltonians get halved steps instead of cycling.  theta scales the
    gradient part of the Hamiltonian (continuation stages); z0 overrides the
    Newton start Z^0 = u^n; euler forces a backward-Euler time step (startup
    smoothing) while keeping the scheme's spatial stencils.
    """
    trapezoid = st.order is SchemeOrder.SECOND and not euler
    c = (st.c if trapezoid else st.tau) * frac

    def defect_of(z, h_vals, b0):
        g = z + c * st.lap(z) + c * h_vals - b0
        return float(np.linalg.norm(g.reshape(-1)))

    pair_n = st.grad(u_n)
    h_n = st.ham(*pair_n, theta=theta)
    if trapezoid:
        b0 = u_n - c * st.lap(u_n) - c * h_n + c * (v_lo + v_hi)
    else:
        b0 = u_n + c * v_lo  # implicit Euler keeps the lagged coupling
    z = u_n if z0 is None else z0
    pair = pair_n if z0 is None else st.grad(z)
    h_z = h_n if z0 is None else st.ham(*pair, theta=theta)
    defect = defect_of(z, h_z, b0)
    k = 0
    while True:
        q1, q2 = st.slopes(*pair, theta=theta)
        rhs = b0 - c * h_z + c * st.j_dot(q1, q2, *pair)
        sysop = st.system_with_coef(q1, q2, c)
        z_solve = solve(sysop, rhs.reshape(-1), st.tol_hjb, x0=z.reshape(-1))
        dz = z_solve.reshape(st.shape) - z
        lam = 1.0
        z_new = z + dz
        pair_new = st.grad(z_new)
        h_new = st.ham(*pair_new, theta=theta)
        defect_new = defect_of(z_new, h_new, b0)
        while (defect_new > defect or not np.isfinite(defect_new)) and lam > 1e-4:
            lam *= 0.5
            z_new = z + lam * dz
            pair_new = st.grad(z_new)
            h_new = st.ham(*pair_new, theta=theta)
            defect_new = defect_of(z_new, h_new, b0)
        if defect_new > defect or not np.isfinite(defect_new):
            # no descent along the Newton direction: the step is too violent
            raise InnerIterationDiverged(-1, float(defect_new), max_inner)
        k += 1
        z_scale = np.linalg.norm(z.reshape(-1))
        change = np.linalg.norm((z_new - z).reshape(-1))
        change = change / z_scale if z_scale > 0 else change
        z = z_new
        pair = pair_new
        h_z = h_new
        defect = defect_new
        if change < eps_inner:
            return z, k
        if k >= max_inner:
            raise InnerIterationDiverged(-1, change, max_inner)


def solve_kfp(u_series: FieldSeries, spec, order: SchemeOrder) -> FieldSeries:
    """March the KFP equation backward for a frozen value series."""
    grid = u_series.grid
    if spec.d != grid.d:
        raise GridError("problem dimension does not match the grid")
    st = _Stepper(grid, spec, order)
    udata = u_series.data
    m = np.empty_like(udata)
    m[grid.n_t] = sample(spec.m_T, grid).values
    c = st.c
    if order is SchemeOrder.SECOND:
        q_hi = st.slopes(*st.grad(udata[grid.n_t].reshape(st.shape)))
        for n in range(grid.n_t - 1, -1, -1):
            q_lo = st.slopes(*st.grad(udata[n].reshape(st.shape)))
            m_hi = m[n + 1].reshape(st.shape)
            rhs = m_hi - c * st.lap(m_hi) - c * st.jt_apply(*q_hi, m_hi)
            sysop = st.kfp_system(*q_lo)
            m[n] = solve(sysop, rhs.reshape(-1), st.tol_kfp, x0=m[n + 1])
            q_hi = q_lo
    else:
        for n in range(grid.n_t - 1, -1, -1):
            q_hi = st.slopes(*st.grad(udata[n + 1].reshape(st.shape)))
            sysop = st.kfp_system(*q_hi)
            m[n] = solve(sysop, m[n + 1], st.tol_kfp, x0=m[n + 1])
    return FieldSeries(grid, m)


def weighted_norm(rows: np.ndarray, grid: LevelGrid) -> float:
    """sqrt(tau h^d sum rows^2) for a (frames, size) stack of residual rows."""
    w = grid.tau * grid.h**grid.d
    return float(np.sqrt(w * np.dot(rows.ravel(), rows.ravel())))


def residual_blocks(u_series: FieldSeries, m_series: FieldSeries, spec,
                    order: SchemeOrder, with_scales: bool = False):
    """Rows of the discrete system F(U, M) = 0, G(U, M) = 0.

    F rows: initial-condition row, then one Crank-Nicolson (or implicit Euler)
    relation per time step; G rows: one relation per step plus the terminal
    row.  With with_scales=True also returns the weighted magnitudes of the
    constituent terms, used to normalize residuals.
    """
    grid = u_series.grid
    if m_series.grid != grid:
        raise GridError("residual requires U and M on the same grid")
    st = _Stepper(grid, spec, order)
    tau = grid.tau
    nf = grid.n_t + 1
    ud = u_series.data.reshape((nf,) + st.shape)
    md = m_series.data.reshape((nf,) + st.shape)

    minus_u, plus_u = st.grad(ud)
    h_all = st.ham(minus_u, plus_u)
    l_u = st.lap(ud)
    l_m = st.lap(md)
    v_all = coupling_series(m_series.data, spec.v, grid).reshape((nf,) + st.shape)
    q1, q2 = st.slopes(minus_u, plus_u)

    f_rows = np.empty((nf, grid.size))
    g_rows = np.empty((nf, grid.size))
    dt_u = (ud[1:] - ud[:-1]) / tau
    dt_m = (md[1:] - md[:-1]) / tau
    if order is SchemeOrder.SECOND:
        b_all = -st.jt_apply(q1, q2, md)
        l_avg = 0.5 * (l_u[1:] + l_u[:-1])
        h_avg = 0.5 * (h_all[1:] + h_all[:-1])
        v_avg = 0.5 * (v_all[1:] + v_all[:-1])
        f_rows[1:] = (dt_u + l_avg + h_avg - v_avg).reshape(grid.n_t, -1)
        lm_avg = 0.5 * (l_m[1:] + l_m[:-1])
        b_avg = 0.5 * (b_all[1:] + b_all[:-1])
        g_rows[:-1] = (dt_m - lm_avg + b_avg).reshape(grid.n_t, -1)
    else:
        q1_hi = [q[1:] for q in q1]
        q2_hi = [q[1:] for q in q2]
        b_mixed = -st.jt_apply(q1_hi, q2_hi, md[:-1])
        l_avg = l_u[1:]
        h_avg = h_all[1:]
        v_avg = v_all[:-1]
        f_rows[1:] = (dt_u + l_avg + h_avg - v_avg).reshape(grid.n_t, -1)
        lm_avg = l_m[:-1]
        b_avg = b_mixed
        g_rows[:-1] = (-dt_m + lm_avg - b_avg).reshape(grid.n_t, -1)
    f_rows[0] = u_series.data[0] - _initial_u(spec, grid, m_series.data[0])
    g_rows[-1] = m_series.data[-1] - sample(spec.m_T, grid).values

    if not with_scales:
        return f_rows, g_rows
    scale_f = (weighted_norm(dt_u.reshape(grid.n_t, -1), grid)
               + weighted_norm(l_avg.reshape(grid.n_t, -1), grid)
               + weighted_norm(h_avg.reshape(grid.n_t, -1), grid)
               + weighted_norm(v_avg.reshape(grid.n_t, -1), grid))
    scale_g = (weighted_norm(dt_m.reshape(grid.n_t, -1), grid)
               + weighted_norm(lm_avg.reshape(grid.n_t, -1), grid)
               + weighted_norm(b_avg.reshape(grid.n_t, -1), grid))
    return f_rows, g_rows, scale_f, scale_g
