import numpy as np
import pytest

from mfgsolve.grids import FieldSeries, LevelGrid, rel_norm
from mfgsolve.marchers import solve_hjb, solve_kfp
from mfgsolve.newton import assemble_jacobian, newton_solve, stacked_residual
from mfgsolve.operators import SchemeOrder
from mfgsolve.problem import naive_density_guess
from mfgsolve.sweep import RelaxSchedule, alternating_sweep

from conftest import heat_spec, tiny_spec


@pytest.mark.parametrize("order", list(SchemeOrder))
def test_jacobian_matches_directional_differences(rng, order):
    spec = tiny_spec()
    grid = LevelGrid(2, 1, 4, 2, spec.t_end)
    p = 2 * (grid.n_t + 1) * grid.size
    # a generic smooth state away from kinks
    x0 = np.concatenate([
        0.5 + 0.3 * rng.standard_normal(p // 2),
        1.0 + 0.2 * rng.standard_normal(p // 2),
    ])
    jac = assemble_jacobian(x0, spec, grid, order)
    for _ in range(5):
        v = rng.standard_normal(p)
        eps = 1e-6
        fd = (stacked_residual(x0 + eps * v, spec, grid, order)
              - stacked_residual(x0 - eps * v, spec, grid, order)) / (2 * eps)
        jv = jac @ v
        denom = max(np.linalg.norm(jv), 1.0)
        assert np.linalg.norm(fd - jv) <= 1e-5 * denom


def test_newton_converged_start_takes_no_steps():
    # exact fixed point of the decoupled linear problem
    spec = heat_spec()
    grid = LevelGrid(4, 1, 16, 8, spec.t_end)
    m0 = naive_density_guess(spec, grid)
    u, _ = solve_hjb(m0, spec, SchemeOrder.SECOND, eps_inner=1e-12)
    m = solve_kfp(u, spec, SchemeOrder.SECOND)
    result = newton_solve(spec, grid, SchemeOrder.SECOND, tol=1e-8,
                          m_init=m, u_init=u)
    assert result.iterations <= 1


@pytest.mark.parametrize("order", list(SchemeOrder))
def test_newton_agrees_with_sweeping(order):
    spec = tiny_spec()
    grid = LevelGrid(2, 1, 4, 2, spec.t_end)
    tol = 1e-9
    result = newton_solve(spec, grid, order, tol=tol)
    m0 = naive_density_guess(spec, grid)
    u_s, m_s, rep = alternating_sweep(m0, spec, order, tol,
                                      RelaxSchedule.fixed(1.0), eps_inner=1e-12)
    assert rep.converged
    assert rel_norm(result.u, u_s) <= 10 * tol
    assert rel_norm(result.m, m_s) <= 10 * tol


def test_newton_superlinear_tail():
    spec = tiny_spec()
    grid = LevelGrid(3, 1, 8, 4, spec.t_end)
    result = newton_solve(spec, grid, SchemeOrder.SECOND, tol=1e-12)
    hist = np.array(result.residual_history)
    hist = hist[hist > 1e-14]
    ratios = hist[1:] / hist[:-1]
    if len(ratios) >= 2:
        # contraction accelerates toward the fixed point
        assert ratios[-1] < ratios[0]
        assert ratios[-1] < 0.2


def test_newton_respects_iteration_cap():
    from mfgsolve.errors import NewtonError

    spec = tiny_spec()
    grid = LevelGrid(3, 1, 8, 4, spec.t_end)
    with pytest.raises(NewtonError):
        newton_solve(spec, grid, SchemeOrder.SECOND, tol=1e-13, max_newton=0)
