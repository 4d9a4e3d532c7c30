import numpy as np
import pytest

from mfgsolve.errors import GridError
from mfgsolve.grids import FieldSeries, LevelGrid, build_hierarchy, rel_norm, total_mass
from mfgsolve.multiscale import interpolate_up, multiscale_solve
from mfgsolve.operators import SchemeOrder
from mfgsolve.problem import naive_density_guess
from mfgsolve.sweep import RelaxSchedule, alternating_sweep

from conftest import tiny_spec


def coarse_grid_1d():
    return LevelGrid(3, 1, 8, 4, 0.1)


def test_interpolate_constant():
    coarse = coarse_grid_1d()
    fine = interpolate_up(FieldSeries.constant(coarse, 3.5))
    assert np.allclose(fine.data, 3.5)


def test_interpolate_coincident_copy(rng):
    coarse = coarse_grid_1d()
    x = FieldSeries(coarse, rng.standard_normal((coarse.n_t + 1, coarse.n)))
    fine = interpolate_up(x)
    assert np.array_equal(fine.data[::2, ::2], x.data)


def test_interpolate_odd_odd_four_point_average(rng):
    coarse = coarse_grid_1d()
    x = FieldSeries(coarse, rng.standard_normal((coarse.n_t + 1, coarse.n)))
    fine = interpolate_up(x)
    c = x.data
    for n in range(coarse.n_t):
        for i in range(coarse.n):
            ip = (i + 1) % coarse.n
            expected = 0.25 * (c[n, i] + c[n, ip] + c[n + 1, i] + c[n + 1, ip])
            assert fine.data[2 * n + 1, 2 * i + 1] == pytest.approx(expected, rel=1e-14)


def test_interpolate_corner_values():
    # corners 1, 2, 3, 4 around an odd-odd point average to 2.5
    coarse = LevelGrid(2, 1, 4, 1, 0.1)
    data = np.zeros((2, 4))
    data[0, 0], data[0, 1], data[1, 0], data[1, 1] = 1.0, 2.0, 3.0, 4.0
    fine = interpolate_up(FieldSeries(coarse, data))
    assert fine.data[1, 1] == pytest.approx(2.5)


def test_interpolate_mass_preservation(rng):
    for d in (1, 2):
        coarse = LevelGrid(3, d, 8, 4, 0.1)
        x = FieldSeries(coarse, rng.uniform(0.5, 1.5, (coarse.n_t + 1, coarse.size)))
        for method in ("linear", "cubic"):
            fine = interpolate_up(x, method=method)
            for k in range(coarse.n_t + 1):
                assert total_mass(fine.frame(2 * k)) == pytest.approx(
                    total_mass(x.frame(k)), abs=1e-12)


def test_interpolate_level_mismatch():
    coarse = coarse_grid_1d()
    x = FieldSeries.constant(coarse, 1.0)
    wrong = LevelGrid(5, 1, 32, 16, 0.1)
    with pytest.raises(GridError):
        interpolate_up(x, wrong)


def test_interpolate_2d_matches_tensor_formula(rng):
    coarse = LevelGrid(3, 2, 8, 2, 0.1)
    x = FieldSeries(coarse, rng.standard_normal((coarse.n_t + 1, coarse.size)))
    fine = interpolate_up(x)
    c = x.data.reshape(coarse.n_t + 1, 8, 8)
    f = fine.data.reshape(2 * coarse.n_t + 1, 16, 16)
    # odd-odd spatial point on an even time plane: 4-point spatial average
    for i in range(8):
        for j in range(8):
            ip, jp = (i + 1) % 8, (j + 1) % 8
            expected = 0.25 * (c[1, i, j] + c[1, ip, j] + c[1, i, jp] + c[1, ip, jp])
            assert f[2, 2 * i + 1, 2 * j + 1] == pytest.approx(expected, rel=1e-13)


def test_cubic_beats_linear_on_smooth_field():
    coarse = LevelGrid(4, 1, 16, 8, 0.1)
    x = coarse.axis_points()
    t = coarse.times()
    data = np.array([np.sin(2 * np.pi * x) * np.cos(tk) for tk in t])
    series = FieldSeries(coarse, data)
    fine_grid = coarse.refined()
    xf, tf = fine_grid.axis_points(), fine_grid.times()
    exact = np.array([np.sin(2 * np.pi * xf) * np.cos(tk) for tk in tf])
    err = {}
    for method in ("linear", "cubic"):
        fine = interpolate_up(series, method=method)
        err[method] = np.abs(fine.data - exact).max()
    assert err["cubic"] < 0.2 * err["linear"]


def test_multiscale_degenerate_single_level():
    spec = tiny_spec()
    grids = build_hierarchy(spec, 4, 4)
    u, m, reports = multiscale_solve(spec, grids, SchemeOrder.SECOND, 1e-6,
                                     RelaxSchedule.fixed(1.0))
    assert len(reports) == 1
    assert reports[0].sweep.converged
    assert u.grid == grids[0]


def test_multiscale_chain_converges_every_level():
    spec = tiny_spec()
    grids = build_hierarchy(spec, 4, 6)
    u, m, reports, sols = multiscale_solve(spec, grids, SchemeOrder.SECOND, 1e-6,
                                           RelaxSchedule.fixed(1.0), keep_levels=True)
    assert [r.level for r in reports] == [4, 5, 6]
    assert all(r.sweep.converged for r in reports)
    assert all(r.sweep.final_err <= 1e-6 for r in reports)
    assert len(sols) == 3 and sols[-1][1].grid.n == 64


def test_interpolated_guess_beats_naive():
    # first-iteration err_M at the fine level: interpolated < naive
    spec = tiny_spec()
    grids = build_hierarchy(spec, 4, 5)
    u_c, m_c, _ = multiscale_solve(spec, grids[:1], SchemeOrder.SECOND, 1e-8,
                                   RelaxSchedule.fixed(1.0))
    m_interp = interpolate_up(m_c, grids[1])
    m_naive = naive_density_guess(spec, grids[1])
    errs = {}
    for tag, guess in (("interp", m_interp), ("naive", m_naive)):
        _, _, rep = alternating_sweep(guess, spec, SchemeOrder.SECOND, 1e-10,
                                      RelaxSchedule.fixed(1.0), max_iters=1)
        errs[tag] = rep.iterations[0].err_m
    assert errs["interp"] < errs["naive"]


def test_multiscale_newton_coarse_solver():
    spec = tiny_spec()
    grids = build_hierarchy(spec, 4, 5)
    u, m, reports = multiscale_solve(spec, grids, SchemeOrder.SECOND, 1e-6,
                                     RelaxSchedule.fixed(1.0), coarse_solver="newton",
                                     newton_tol=1e-8)
    assert reports[0].solver == "newton"
    assert reports[1].sweep.converged
