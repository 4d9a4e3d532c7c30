import dataclasses

import numpy as np
import pytest

from mfgsolve.analysis import (
    ManufacturedPair,
    convergence_order_table,
    default_manufactured_pair,
    estimate_jacobians,
    relax_bound,
    spectral_radius_commute_check,
    sweep_spectral_radius,
    truncation_order_study,
    JacobianBlocks,
)
from mfgsolve.errors import AnalysisError
from mfgsolve.grids import FieldSeries, LevelGrid, build_hierarchy, restrict_series
from mfgsolve.newton import assemble_jacobian
from mfgsolve.operators import SchemeOrder
from mfgsolve.problem import LocalPower, ZeroCoupling, naive_density_guess
from mfgsolve.sweep import RelaxSchedule, alternating_sweep

from conftest import tiny_spec


def linear_spec():
    # gamma = 0 disables the gradient term; V linear in m
    return dataclasses.replace(tiny_spec(gamma=0.0), v=LocalPower(1.0))


def converged_pair(spec, grid, eps=1e-10):
    m0 = naive_density_guess(spec, grid)
    u, m, rep = alternating_sweep(m0, spec, SchemeOrder.SECOND, eps,
                                  RelaxSchedule.fixed(1.0), eps_inner=1e-12,
                                  max_iters=500)
    assert rep.converged
    return u, m


def test_jacobians_match_analytic_on_linear_problem():
    spec = linear_spec()
    grid = LevelGrid(2, 1, 4, 2, spec.t_end)
    u, m = converged_pair(spec, grid)
    blocks = estimate_jacobians(u, m, spec, SchemeOrder.SECOND)
    x = np.concatenate([u.data.ravel(), m.data.ravel()])
    jac = assemble_jacobian(x, spec, grid, SchemeOrder.SECOND).toarray()
    p = (grid.n_t + 1) * grid.size
    assert np.allclose(blocks.f_u, jac[:p, :p], atol=1e-8)
    assert np.allclose(blocks.f_m, jac[:p, p:], atol=1e-8)
    assert np.allclose(blocks.g_u, jac[p:, :p], atol=1e-8)
    assert np.allclose(blocks.g_m, jac[p:, p:], atol=1e-8)


def test_jacobian_f_m_diagonal_for_square_coupling():
    # V[m] = m^2: dF/dM rows carry -0.5 * 2 m factors on the two time slices
    spec = tiny_spec()
    grid = LevelGrid(2, 1, 4, 2, spec.t_end)
    u, m = converged_pair(spec, grid)
    blocks = estimate_jacobians(u, m, spec, SchemeOrder.SECOND)
    n, nt = grid.size, grid.n_t
    for frame in range(1, nt + 1):
        rows = slice(frame * n, (frame + 1) * n)
        cols = slice(frame * n, (frame + 1) * n)
        expected = np.diag(-0.5 * 2.0 * m.data[frame])
        assert np.allclose(blocks.f_m[rows, cols], expected, atol=1e-6)


def test_jacobian_probe_step_refinement():
    spec = tiny_spec()
    grid = LevelGrid(2, 1, 4, 2, spec.t_end)
    u, m = converged_pair(spec, grid)
    b1 = estimate_jacobians(u, m, spec, SchemeOrder.SECOND, delta=1e-4)
    b2 = estimate_jacobians(u, m, spec, SchemeOrder.SECOND, delta=5e-5)
    # central differences: entries move by O(delta^2)
    assert np.abs(b1.f_u - b2.f_u).max() < 1e-5


def test_dense_size_cap():
    spec = tiny_spec()
    grid = LevelGrid(6, 1, 64, 64, spec.t_end)
    u = FieldSeries.constant(grid, 1.0)
    m = FieldSeries.constant(grid, 1.0)
    with pytest.raises(AnalysisError):
        estimate_jacobians(u, m, spec, SchemeOrder.SECOND)


def test_spectral_radius_identity_blocks():
    n = 6
    eye = np.eye(n)
    info = sweep_spectral_radius(JacobianBlocks(eye, eye, eye, eye, 1e-6))
    assert info.rho == pytest.approx(1.0)


def test_sweep_rate_matches_spectral_radius():
    # empirical alpha=1 contraction of err_M near the fixed point vs rho
    spec = tiny_spec(t_end=0.3)
    grid = LevelGrid(2, 1, 4, 2, spec.t_end)
    u, m = converged_pair(spec, grid, eps=1e-12)
    blocks = estimate_jacobians(u, m, spec, SchemeOrder.SECOND)
    info = sweep_spectral_radius(blocks)
    assert 1e-4 < info.rho < 1.0

    # generic perturbation (both reflection symmetries, all frames)
    x = grid.axis_points()
    bump = 1e-3 * (np.cos(2 * np.pi * x) + 0.7 * np.sin(2 * np.pi * x))
    m_pert = FieldSeries(grid, m.data + bump)
    _, _, rep = alternating_sweep(m_pert, spec, SchemeOrder.SECOND, 1e-13,
                                  RelaxSchedule.fixed(1.0), eps_inner=1e-13,
                                  max_iters=12)
    errs = rep.err_m_history
    errs = errs[(errs > 1e-10) & (errs < 1e-2)]
    ratios = errs[1:] / errs[:-1]
    rate = float(np.exp(np.mean(np.log(ratios[-3:]))))
    assert rate == pytest.approx(info.rho, rel=0.2)


def test_relax_bound_values():
    assert relax_bound(0.0) == pytest.approx(2.0)
    assert relax_bound(1.0) == pytest.approx(1.0)
    assert relax_bound(3.0) == pytest.approx(0.5)
    with pytest.raises(AnalysisError):
        relax_bound(-0.1)


def test_rho_commute_trivial_cases():
    eye = np.eye(4)
    assert spectral_radius_commute_check(eye, eye) == (1.0, 1.0)
    zero = np.zeros((4, 4))
    assert spectral_radius_commute_check(zero, eye) == (0.0, 0.0)


def test_rho_commute_random_pairs(rng):
    for _ in range(100):
        n = int(rng.integers(1, 9))
        a = rng.standard_normal((n, n))
        b = rng.standard_normal((n, n))
        r_ab, r_ba = spectral_radius_commute_check(a, b)
        assert abs(r_ab - r_ba) <= 1e-8 * max(1.0, r_ab)


def test_relaxed_map_spectrum_identity(rng):
    # eigenvalues of alpha J + (1 - alpha) I are alpha lam + 1 - alpha
    j = rng.standard_normal((8, 8))
    lam = np.linalg.eigvals(j)
    for alpha in (0.2, 0.7, 1.0):
        relaxed = alpha * j + (1 - alpha) * np.eye(8)
        lam_r = np.linalg.eigvals(relaxed)
        expected = alpha * lam + (1 - alpha)
        assert np.allclose(sorted(lam_r, key=lambda z: (z.real, z.imag)),
                           sorted(expected, key=lambda z: (z.real, z.imag)),
                           atol=1e-10)


def test_order_table_identical_solutions():
    spec = tiny_spec()
    grids = build_hierarchy(spec, 4, 5)
    ref_u = FieldSeries.constant(grids[1], 2.0)
    ref_m = FieldSeries.constant(grids[1], 1.0)
    levels = [(grids[0], restrict_series(ref_u, grids[0]),
               restrict_series(ref_m, grids[0]))]
    rows = convergence_order_table(levels, (ref_u, ref_m))
    assert rows[0].err_u == 0.0 and rows[0].order_u is None


def test_order_table_synthetic_second_order(rng):
    spec = tiny_spec()
    grids = build_hierarchy(spec, 4, 7)
    fine = grids[-1]
    xs = fine.axis_points()
    base = np.array([1.0 + np.sin(2 * np.pi * xs) * np.cos(t) for t in fine.times()])
    ref_u = FieldSeries(fine, base)
    ref_m = FieldSeries(fine, 2.0 + base)
    levels = []
    for g in grids[:-1]:
        profile = np.array([np.cos(2 * np.pi * g.axis_points()) + 0.3
                            for _ in g.times()])
        err = 4.0 ** (-g.level) * profile
        levels.append((g, FieldSeries(g, restrict_series(ref_u, g).data + err),
                       FieldSeries(g, restrict_series(ref_m, g).data + err)))
    rows = convergence_order_table(levels, (ref_u, ref_m))
    # time-quadrature weights differ slightly across levels (1 + 1/n_t factor)
    for row in rows[1:]:
        assert row.order_u == pytest.approx(2.0, abs=0.05)
        assert row.order_m == pytest.approx(2.0, abs=0.05)


def test_order_table_reference_too_coarse():
    spec = tiny_spec()
    grids = build_hierarchy(spec, 4, 5)
    ref = (FieldSeries.constant(grids[0], 1.0), FieldSeries.constant(grids[0], 1.0))
    with pytest.raises(AnalysisError):
        convergence_order_table(
            [(grids[1], FieldSeries.constant(grids[1], 1.0),
              FieldSeries.constant(grids[1], 1.0))], ref)


def test_truncation_slopes_both_orders():
    spec = tiny_spec(nu=0.5, gamma=2.0, t_end=0.5)
    mfd = default_manufactured_pair()
    res = truncation_order_study(mfd, spec, [SchemeOrder.SECOND], range(4, 9))
    assert res[SchemeOrder.SECOND].slope == pytest.approx(2.0, abs=0.2)
    res1 = truncation_order_study(mfd, spec, [SchemeOrder.FIRST], range(5, 10))
    assert res1[SchemeOrder.FIRST].slope == pytest.approx(1.0, abs=0.2)


def test_truncation_kink_pollution_with_simple_sine():
    # simple-zero gradient crossings degrade the transport truncation to
    # O(h^(1/2)) in the weighted norm; this characterizes that effect
    from mfgsolve.analysis import sine_manufactured_pair

    spec = tiny_spec(nu=0.5, gamma=2.0, t_end=0.5)
    res = truncation_order_study(sine_manufactured_pair(), spec,
                                 [SchemeOrder.SECOND], range(4, 9))
    assert res[SchemeOrder.SECOND].slope == pytest.approx(0.5, abs=0.2)


def test_truncation_exact_for_constant_pair():
    spec = tiny_spec(gamma=2.0)
    zero = lambda x, t: 0.0 * x
    mfd = ManufacturedPair(
        u=lambda x, t: 0.0 * x + 2.0, u_t=zero, u_x=zero, u_xx=zero,
        m=lambda x, t: 0.0 * x + 1.0, m_t=zero, m_x=zero, m_xx=zero,
    )
    res = truncation_order_study(mfd, spec, [SchemeOrder.SECOND], [4, 5, 6])
    assert all(r < 1e-11 for r in res[SchemeOrder.SECOND].residuals)
