import dataclasses

import numpy as np
import pytest

from mfgsolve.errors import GridError
from mfgsolve.grids import FieldSeries, GridFn, LevelGrid, sample, total_mass
from mfgsolve.marchers import residual_blocks, solve_hjb, solve_kfp, weighted_norm
from mfgsolve.operators import (
    SchemeOrder,
    hamiltonian_jacobian_matrix,
    laplace_matrix,
)
from mfgsolve.problem import LocalPower, ZeroCoupling, naive_density_guess

from conftest import heat_spec, paper_1d_spec, spec_2d, tiny_spec


def test_hjb_constant_steady_state():
    # H = 0, V = 0, u0 = c: the constant solves the heat equation exactly
    spec = heat_spec()
    grid = LevelGrid(4, 1, 16, 16, spec.t_end)
    m = naive_density_guess(spec, grid)
    for order in SchemeOrder:
        u, stats = solve_hjb(m, spec, order)
        assert np.allclose(u.data, 1.0, atol=1e-12)
        assert all(c >= 1 for c in stats.inner_iterations)


def test_kfp_constant_density():
    spec = tiny_spec()
    grid = LevelGrid(4, 1, 16, 16, spec.t_end)
    spec = dataclasses.replace(spec, m_T=lambda x: 0.0 * x + 1.0)
    u = FieldSeries.constant(grid, 2.0)
    for order in SchemeOrder:
        m = solve_kfp(u, spec, order)
        assert np.allclose(m.data, 1.0, atol=1e-11)


@pytest.mark.parametrize("order", list(SchemeOrder))
@pytest.mark.parametrize("make_spec,lev", [(tiny_spec, 5), (paper_1d_spec, 5)])
def test_mass_conservation_1d(order, make_spec, lev):
    spec = make_spec()
    grid = LevelGrid(lev, 1, 2**lev, 2**lev, spec.t_end)
    m_guess = naive_density_guess(spec, grid)
    u, _ = solve_hjb(m_guess, spec, order)
    m = solve_kfp(u, spec, order)
    masses = [total_mass(m.frame(k)) for k in range(grid.n_t + 1)]
    terminal = masses[-1]
    assert max(abs(mm - terminal) for mm in masses) <= 1e-10


@pytest.mark.parametrize("order", list(SchemeOrder))
def test_mass_conservation_2d(order):
    spec = spec_2d(t_end=0.1)
    grid = LevelGrid(4, 2, 16, 8, spec.t_end)
    m_guess = naive_density_guess(spec, grid)
    u, _ = solve_hjb(m_guess, spec, order)
    m = solve_kfp(u, spec, order)
    masses = [total_mass(m.frame(k)) for k in range(grid.n_t + 1)]
    assert max(abs(mm - masses[-1]) for mm in masses) <= 1e-10


def test_hjb_nonlinear_residual_by_substitution():
    # plug the returned U back into the Crank-Nicolson relations
    spec = tiny_spec()
    grid = LevelGrid(4, 1, 16, 8, spec.t_end)
    m = naive_density_guess(spec, grid)
    eps_inner = 1e-9
    u, _ = solve_hjb(m, spec, SchemeOrder.SECOND, eps_inner=eps_inner)
    f_rows, _ = residual_blocks(u, m, spec, SchemeOrder.SECOND)
    # weighted norm relative to the weighted norm of U
    rel = weighted_norm(f_rows, grid) / weighted_norm(u.data, grid)
    assert rel <= 10 * eps_inner


def test_hjb_initial_condition_includes_v0():
    spec = tiny_spec()
    spec = dataclasses.replace(spec, v0=LocalPower(2.0))
    grid = LevelGrid(4, 1, 16, 8, spec.t_end)
    m = naive_density_guess(spec, grid)
    u, _ = solve_hjb(m, spec, SchemeOrder.SECOND)
    expected = sample(spec.u0, grid).values + m.data[0] ** 2
    assert np.allclose(u.data[0], expected, atol=1e-14)


@pytest.mark.parametrize("order", list(SchemeOrder))
def test_kfp_matches_dense_recurrence(order, rng):
    # independent dense assembly of the same linear backward recurrence
    spec = tiny_spec()
    grid = LevelGrid(4, 1, 16, 2, spec.t_end)
    u = FieldSeries(grid, np.stack([
        0.3 * np.sin(2 * np.pi * grid.axis_points() + 0.5 * k)
        for k in range(grid.n_t + 1)]))
    m = solve_kfp(u, spec, order)

    eye = np.eye(grid.n)
    lap = laplace_matrix(grid, spec.nu).toarray()
    tau = grid.tau
    m_exp = np.empty_like(m.data)
    m_exp[-1] = sample(spec.m_T, grid).values
    for n in range(grid.n_t - 1, -1, -1):
        j_lo = hamiltonian_jacobian_matrix(grid, u.data[n], spec.gamma, order).toarray()
        j_hi = hamiltonian_jacobian_matrix(grid, u.data[n + 1], spec.gamma, order).toarray()
        if order is SchemeOrder.SECOND:
            a = eye + tau / 2 * lap + tau / 2 * j_lo.T
            rhs = (eye - tau / 2 * lap - tau / 2 * j_hi.T) @ m_exp[n + 1]
        else:
            a = eye + tau * lap + tau * j_hi.T
            rhs = m_exp[n + 1]
        m_exp[n] = np.linalg.solve(a, rhs)
    assert np.allclose(m.data, m_exp, atol=1e-10)


def test_kfp_adjoint_of_hjb_linearization(rng):
    # the KFP implicit matrix is elementwise the transpose of the HJB one
    from mfgsolve.marchers import _Stepper

    spec = tiny_spec()
    grid = LevelGrid(4, 1, 16, 16, spec.t_end)
    st = _Stepper(grid, spec, SchemeOrder.SECOND)
    u = rng.standard_normal(16)
    q1, q2 = st.slopes(*st.grad(u))
    a_hjb = st.hjb_system(q1, q2).to_dense()
    a_kfp = st.kfp_system(q1, q2).to_dense()
    assert np.allclose(a_kfp, a_hjb.T, atol=1e-14)


def test_hjb_warns_on_negative_density(caplog):
    spec = tiny_spec()
    grid = LevelGrid(4, 1, 16, 8, spec.t_end)
    data = np.ones((grid.n_t + 1, grid.n))
    data[0, 0] = -0.5
    with caplog.at_level("WARNING"):
        solve_hjb(FieldSeries(grid, data), spec, SchemeOrder.SECOND)
    assert any("negative" in r.message for r in caplog.records)


def test_dimension_mismatch_rejected():
    spec = tiny_spec()
    grid = LevelGrid(4, 2, 16, 8, spec.t_end)
    m = FieldSeries.constant(grid, 1.0)
    with pytest.raises(GridError):
        solve_hjb(m, spec, SchemeOrder.SECOND)


@pytest.mark.parametrize("order", list(SchemeOrder))
def test_residual_blocks_vanish_after_solves(order):
    spec = tiny_spec()
    grid = LevelGrid(4, 1, 16, 8, spec.t_end)
    m_guess = naive_density_guess(spec, grid)
    u, _ = solve_hjb(m_guess, spec, order, eps_inner=1e-12)
    m = solve_kfp(u, spec, order)
    f_rows, g_rows = residual_blocks(u, m_guess, spec, order)
    assert weighted_norm(f_rows, grid) <= 1e-8
    f_rows2, g_rows2 = residual_blocks(u, m, spec, order)
    assert weighted_norm(g_rows2, grid) <= 1e-9
