"""Implementations behind the CLI subcommands (imported after thread setup)."""

from __future__ import annotations

import dataclasses
import time
from pathlib import Path

import numpy as np

from .analysis import (
    convergence_order_table,
    default_manufactured_pair,
    estimate_jacobians,
    relax_bound,
    spectral_radius_commute_check,
    sweep_spectral_radius,
    truncation_order_study,
)
from .config import ExperimentConfig, load_config, schedules_for_levels
from .errors import MfgError, SweepAborted
from .grids import FieldSeries, GridFn, LevelGrid, build_hierarchy, sample, total_mass
from .linsolve import PeriodicBandMatrix, solve as lin_solve
from .marchers import solve_hjb, solve_kfp
from .multiscale import interpolate_up, multiscale_solve
from .newton import newton_solve
from .operators import SchemeOrder, coupling_V, transport_B, gradient_pair, \
    hamiltonian_gradient
from .problem import naive_density_guess
from .sweep import RelaxSchedule, alternating_sweep, system_residual

FMT = "%.17g"


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------

def _comment(cfg: ExperimentConfig, grid: LevelGrid | None = None) -> str:
    line = f"# config_sha256={cfg.sha}"
    if grid is not None:
        line += (f" level={grid.level} d={grid.d} n={grid.n} n_t={grid.n_t}"
                 f" T={grid.t_end:.17g}")
    return line + "\n"


def write_fields_csv(path: Path, series: FieldSeries, cfg: ExperimentConfig) -> None:
    grid = series.grid
    with open(path, "w") as fh:
        fh.write(_comment(cfg, grid))
        if grid.d == 1:
            fh.write("n,i,t,x,value\n")
            x = grid.axis_points()
            for n in range(grid.n_t + 1):
                t = n * grid.tau
                row = series.data[n]
                for i in range(grid.n):
                    fh.write(f"{n},{i},{t:.17g},{x[i]:.17g},{row[i]:.17g}\n")
        else:
            fh.write("n,i,j,t,x,y,value\n")
            x = grid.axis_points()
            for n in range(grid.n_t + 1):
                t = n * grid.tau
                row = series.data[n].reshape(grid.n, grid.n)
                for i in range(grid.n):
                    for j in range(grid.n):
                        fh.write(f"{n},{i},{j},{t:.17g},{x[i]:.17g},{x[j]:.17g},"
                                 f"{row[i, j]:.17g}\n")


def read_fields_csv(path: Path) -> FieldSeries:
    with open(path) as fh:
        meta_line = fh.readline()
        meta = dict(tok.split("=") for tok in meta_line[1:].split() if "=" in tok)
        header = fh.readline().strip().split(",")
        d = int(meta["d"])
        grid = LevelGrid(int(meta["level"]), d, int(meta["n"]), int(meta["n_t"]),
                         float(meta["T"]))
        data = np.empty((grid.n_t + 1, grid.size))
        vcol = header.index("value")
        for line in fh:
            parts = line.split(",")
            n = int(parts[0])
            if d == 1:
                data[n, int(parts[1])] = float(parts[vcol])
            else:
                data[n, int(parts[1]) * grid.n + int(parts[2])] = float(parts[vcol])
    return FieldSeries(grid, data)


def write_fields_npz(path: Path, series: FieldSeries, cfg: ExperimentConfig) -> None:
    g = series.grid
    np.savez(path, data=series.data, level=g.level, d=g.d, n=g.n, n_t=g.n_t,
             t_end=g.t_end, config_sha=cfg.sha)


def _write_fields(outdir: Path, tag: str, series: FieldSeries,
                  cfg: ExperimentConfig) -> None:
    fmt = cfg.output.fields_format
    big = series.data.size > cfg.output.npy_threshold
    if fmt in ("npy", "both") or (fmt == "csv" and big):
        write_fields_npz(outdir / f"fields_{tag}_L{series.grid.level}.npz", series, cfg)
    if fmt in ("csv", "both") and not big:
        write_fields_csv(outdir / f"fields_{tag}_L{series.grid.level}.csv", series, cfg)


def write_table(path: Path, cfg: ExperimentConfig, header: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(_comment(cfg))
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(
                ("---" if v is None else (f"{v:.17g}" if isinstance(v, float) else str(v)))
                for v in row) + "\n")


# ---------------------------------------------------------------------------
# shared run helpers
# ---------------------------------------------------------------------------

def _levels(cfg: ExperimentConfig, args) -> tuple[int, int]:
    if args.level_override:
        return args.level_override[0], args.level_override[1]
    return cfg.solver.l0, cfg.solver.l


def _outdir(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.out if args.out else cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _grids(cfg: ExperimentConfig, l0: int, l: int):
    return build_hierarchy(cfg.problem, l0, l, n0=cfg.solver.base_n,
                           nt0=cfg.solver.base_nt)


def run_solve(cfg: ExperimentConfig, args):
    sol = cfg.solver
    l0, l = _levels(cfg, args)
    outdir = _outdir(cfg, args)
    if sol.mode == "single":
        grid = _grids(cfg, l, l)[0]
        cfg.problem.validate_on_grid(grid)
        guess = naive_density_guess(cfg.problem, grid)
        sched = RelaxSchedule(sol.alpha0, sol.alpha_growth, sol.alpha_late)
        u, m, rep = alternating_sweep(guess, cfg.problem, sol.order, sol.eps, sched,
                                      max_iters=sol.max_iters, eps_inner=sol.eps_inner)
        with open(outdir / f"sweep_log_L{grid.level}.csv", "w") as fh:
            fh.write(_comment(cfg, grid))
            rep.write_csv(fh)
        reports = []
        if not rep.converged:
            raise SweepAborted(rep.message, rep)
    else:
        grids = _grids(cfg, l0, l)
        cfg.problem.validate_on_grid(grids[0])
        scheds = schedules_for_levels(sol, len(grids))
        u, m, reports = multiscale_solve(
            cfg.problem, grids, sol.order, sol.eps, scheds,
            coarse_solver=sol.coarse_solver, interp=sol.interp,
            max_iters=sol.max_iters, eps_inner=sol.eps_inner,
            newton_tol=sol.newton_tol)
        for lr in reports:
            if lr.sweep is not None:
                with open(outdir / f"sweep_log_L{lr.level}.csv", "w") as fh:
                    fh.write(_comment(cfg))
                    lr.sweep.write_csv(fh)
        write_table(outdir / "multiscale_levels.csv", cfg,
                    "level,n,n_t,solver,iterations,final_err,interp_seconds,seconds",
                    [(lr.level, lr.n, lr.n_t, lr.solver, lr.iterations,
                      (lr.sweep.final_err if lr.sweep else 0.0),
                      lr.interp_seconds, lr.seconds) for lr in reports])
    if cfg.output.fields != "none":
        _write_fields(outdir, "u", u, cfg)
        _write_fields(outdir, "m", m, cfg)
    res_f, res_g = system_residual(u, m, cfg.problem, sol.order)
    print(f"solved: level {u.grid.level} (n={u.grid.n}, n_t={u.grid.n_t}), "
          f"res_F={res_f:.3e} res_G={res_g:.3e}")
    return 0


def run_compare_newton(cfg: ExperimentConfig, args):
    sizes = [int(s) for s in cfg.extras.get("compare", {}).get(
        "sizes", "32,64,128").split(",")]
    sol = cfg.solver
    outdir = _outdir(cfg, args)
    rows = []
    for n in sizes:
        level = max(2, int(round(np.log2(n))))
        grid = LevelGrid(level, cfg.problem.d, n, n, cfg.problem.t_end)
        guess = naive_density_guess(cfg.problem, grid)
        t0 = time.perf_counter()
        u_as, m_as, rep = alternating_sweep(
            guess, cfg.problem, sol.order, sol.eps,
            RelaxSchedule(sol.alpha0, sol.alpha_growth, sol.alpha_late),
            max_iters=sol.max_iters, eps_inner=sol.eps_inner)
        t_as = time.perf_counter() - t0
        res_as = max(system_residual(u_as, m_as, cfg.problem, sol.order))
        t0 = time.perf_counter()
        result = newton_solve(cfg.problem, grid, sol.order, tol=sol.newton_tol)
        t_newton = time.perf_counter() - t0
        res_newton = max(system_residual(result.u, result.m, cfg.problem, sol.order))
        rows.append((n, t_newton, t_as, t_newton / t_as, res_newton, res_as,
                     result.iterations, rep.n_iterations))
        print(f"n={n}: t_newton={t_newton:.3f}s t_as={t_as:.3f}s "
              f"ratio={t_newton / t_as:.1f}")
    write_table(outdir / "newton_compare.csv", cfg,
                "n,t_newton,t_as,ratio,res_newton,res_as,newton_iters,as_iters", rows)
    return 0


def run_order_study(cfg: ExperimentConfig, args):
    sol = cfg.solver
    l0, l = _levels(cfg, args)
    study = cfg.extras.get("order_study", {})
    ref_level = int(study.get("ref_level", l + 1))
    ref_order_i = int(study.get("ref_order", 2))
    ref_order = SchemeOrder.SECOND if ref_order_i == 2 else SchemeOrder.FIRST
    outdir = _outdir(cfg, args)

    if ref_order is sol.order:
        grids = _grids(cfg, l0, ref_level)
        scheds = schedules_for_levels(sol, len(grids))
        _, _, _, sols = multiscale_solve(
            cfg.problem, grids, sol.order, sol.eps, scheds,
            coarse_solver=sol.coarse_solver, interp=sol.interp,
            max_iters=sol.max_iters, eps_inner=sol.eps_inner, keep_levels=True)
        levels = [s for s in sols if s[0].level <= l]
        reference = (sols[-1][1], sols[-1][2])
    else:
        grids = _grids(cfg, l0, l)
        scheds = schedules_for_levels(sol, len(grids))
        _, _, _, sols = multiscale_solve(
            cfg.problem, grids, sol.order, sol.eps, scheds,
            coarse_solver=sol.coarse_solver, interp=sol.interp,
            max_iters=sol.max_iters, eps_inner=sol.eps_inner, keep_levels=True)
        levels = sols
        ref_grids = _grids(cfg, l0, ref_level)
        ref_scheds = schedules_for_levels(sol, len(ref_grids))
        u_ref, m_ref, _ = multiscale_solve(
            cfg.problem, ref_grids, ref_order, sol.eps, ref_scheds,
            coarse_solver=sol.coarse_solver, interp=sol.interp,
            max_iters=sol.max_iters, eps_inner=sol.eps_inner)
        reference = (u_ref, m_ref)

    rows = convergence_order_table(levels, reference)
    write_table(outdir / "order_table.csv", cfg,
                "level,n,err_u,err_m,order_u,order_m",
                [(r.level, r.n, r.err_u, r.err_m, r.order_u, r.order_m) for r in rows])
    for r in rows:
        ou = "---" if r.order_u is None else f"{r.order_u:.2f}"
        om = "---" if r.order_m is None else f"{r.order_m:.2f}"
        print(f"level {r.level}: err_u={r.err_u:.3e} err_m={r.err_m:.3e} "
              f"order_u={ou} order_m={om}")
    return 0


def run_truncation_study(cfg: ExperimentConfig, args):
    study = cfg.extras.get("study", {})
    levels = [int(s) for s in study.get("levels", "4,5,6,7,8").split(",")]
    amp_u = float(study.get("amp_u", 1.0))
    amp_m = float(study.get("amp_m", 0.5))
    orders_i = [int(s) for s in study.get("orders", "1,2").split(",")]
    orders = [SchemeOrder.SECOND if o == 2 else SchemeOrder.FIRST for o in orders_i]
    mfd = default_manufactured_pair(amp_u, amp_m)
    results = truncation_order_study(mfd, cfg.problem, orders, levels)
    outdir = _outdir(cfg, args)
    rows = []
    for order, res in results.items():
        for lev, h, r in zip(res.levels, res.h_values, res.residuals):
            rows.append((order.value, lev, h, r, res.slope))
        print(f"order {order.value}: slope {res.slope:.3f}")
    write_table(outdir / "truncation.csv", cfg, "order,level,h,residual,slope", rows)
    return 0


def run_spectra(cfg: ExperimentConfig, args):
    sol = cfg.solver
    l0, _ = _levels(cfg, args)
    grid = _grids(cfg, l0, l0)[0]
    stacked = 2 * (grid.n_t + 1) * grid.size
    guess = naive_density_guess(cfg.problem, grid)
    u, m, rep = alternating_sweep(
        guess, cfg.problem, sol.order, min(sol.eps, 1e-8),
        RelaxSchedule.fixed(sol.alpha0), max_iters=max(sol.max_iters, 500),
        eps_inner=1e-11)
    blocks = estimate_jacobians(u, m, cfg.problem, sol.order)
    info = sweep_spectral_radius(blocks)
    bound = relax_bound(info.rho)
    rng = np.random.default_rng(args.seed)
    a = rng.standard_normal((6, 6))
    b = rng.standard_normal((6, 6))
    rho_ab, rho_ba = spectral_radius_commute_check(a, b)
    outdir = _outdir(cfg, args)
    write_table(outdir / "spectra.csv", cfg,
                "rho,lam_max_re,lam_max_im,alpha_bound,rho_ab,rho_ba",
                [(info.rho, info.lam_max.real, info.lam_max.imag, bound,
                  rho_ab, rho_ba)])
    print(f"rho={info.rho:.4f} lam_max={info.lam_max:.4f} alpha_bound={bound:.4f}")
    return 0


def run_mass_audit(cfg: ExperimentConfig, args):
    sol = cfg.solver
    l0, l = _levels(cfg, args)
    if sol.mode == "single":
        grid = _grids(cfg, l, l)[0]
        guess = naive_density_guess(cfg.problem, grid)
        u, m, _ = alternating_sweep(
            guess, cfg.problem, sol.order, sol.eps,
            RelaxSchedule(sol.alpha0, sol.alpha_growth, sol.alpha_late),
            max_iters=sol.max_iters, eps_inner=sol.eps_inner)
    else:
        grids = _grids(cfg, l0, l)
        scheds = schedules_for_levels(sol, len(grids))
        u, m, _ = multiscale_solve(cfg.problem, grids, sol.order, sol.eps, scheds,
                                   coarse_solver=sol.coarse_solver, interp=sol.interp,
                                   max_iters=sol.max_iters, eps_inner=sol.eps_inner)
    grid = m.grid
    terminal = total_mass(m.frame(grid.n_t))
    rows = []
    worst = 0.0
    for n in range(grid.n_t + 1):
        mass = total_mass(m.frame(n))
        dev = abs(mass - terminal)
        worst = max(worst, dev)
        rows.append((n, n * grid.tau, mass, dev))
    outdir = _outdir(cfg, args)
    write_table(outdir / "mass_audit.csv", cfg, "n,t,mass,deviation", rows)
    print(f"max |mass(m^n) - mass(m^NT)| = {worst:.3e} over {grid.n_t + 1} frames")
    return 0


def run_check(cfg: ExperimentConfig, args):
    rng = np.random.default_rng(args.seed)
    failures = []

    def check(name, ok, detail=""):
        print(f"{'PASS' if ok else 'FAIL'}  {name}{('  ' + detail) if detail else ''}")
        if not ok:
            failures.append(name)

    spec = cfg.problem
    grid = LevelGrid(4, spec.d, 16, 8, spec.t_end)

    # adjoint identity and discrete divergence, both orders
    for order in (SchemeOrder.FIRST, SchemeOrder.SECOND):
        m = GridFn(grid, rng.uniform(0.5, 1.5, grid.size))
        u = GridFn(grid, rng.standard_normal(grid.size))
        w = GridFn(grid, rng.standard_normal(grid.size))
        gamma_spec = spec if spec.gamma >= 1 or spec.gamma == 0 else dataclasses.replace(spec, gamma=2.0)
        b = transport_B(m, u, order, gamma_spec)
        pair = gradient_pair(u, order)
        slopes = hamiltonian_gradient(grid, pair, gamma_spec.gamma)
        wpair = gradient_pair(w, order)
        rhs = 0.0
        for a in range(grid.d):
            rhs -= np.sum(m.values * (slopes.p1[a] * wpair.minus[a]
                                      + slopes.p2[a] * wpair.plus[a]))
        lhs = np.sum(b.values * w.values)
        scale = max(1.0, abs(lhs))
        check(f"adjoint identity (order {order.value})", abs(lhs - rhs) <= 1e-10 * scale,
              f"|lhs-rhs|={abs(lhs - rhs):.2e}")
        check(f"sum_i B_i = 0 (order {order.value})", abs(b.values.sum()) <= 1e-10 * max(1.0, np.abs(b.values).max()))

    # transpose involution and bilinear identity
    n = 12
    diags = {k: rng.standard_normal(n) for k in (-2, -1, 0, 1, 2)}
    amat = PeriodicBandMatrix(n, diags)
    at = amat.transpose()
    check("transpose involution", np.allclose(at.transpose().to_dense(), amat.to_dense()))
    x, y = rng.standard_normal(n), rng.standard_normal(n)
    check("bilinear identity (A^T x) . y = x . (A y)",
          abs(np.dot(at.matvec(x), y) - np.dot(x, amat.matvec(y))) < 1e-12 * max(1, abs(np.dot(x, amat.matvec(y)))))

    # rho(AB) = rho(BA)
    ok = True
    for _ in range(20):
        k = rng.integers(2, 8)
        a = rng.standard_normal((k, k))
        b2 = rng.standard_normal((k, k))
        r1, r2 = spectral_radius_commute_check(a, b2)
        if abs(r1 - r2) > 1e-8 * max(1.0, r1):
            ok = False
    check("rho(AB) = rho(BA)", ok)

    # mass conservation through a KFP solve on a small instance
    small = LevelGrid(4, spec.d, 16, 8, spec.t_end)
    u_series = FieldSeries(small, np.stack(
        [sample(spec.u0, small).values for _ in range(small.n_t + 1)]))
    gamma_spec = spec if spec.gamma >= 1 or spec.gamma == 0 else dataclasses.replace(spec, gamma=2.0)
    m_series = solve_kfp(u_series, gamma_spec, SchemeOrder.SECOND)
    masses = [total_mass(m_series.frame(k)) for k in range(small.n_t + 1)]
    drift = max(abs(mm - masses[-1]) for mm in masses)
    check("mass conservation (KFP)", drift <= 1e-10, f"max drift {drift:.2e}")

    # interpolation preserves per-frame mass
    coarse = LevelGrid(3, spec.d, 8, 4, spec.t_end)
    series = FieldSeries(coarse, rng.uniform(0.5, 1.5, (coarse.n_t + 1, coarse.size)))
    fine = interpolate_up(series)
    masses_c = [total_mass(series.frame(k)) for k in range(coarse.n_t + 1)]
    masses_f = [total_mass(fine.frame(2 * k)) for k in range(coarse.n_t + 1)]
    check("interpolation mass preservation",
          max(abs(a - b) for a, b in zip(masses_c, masses_f)) <= 1e-12)

    # linear residual contract
    rhs = rng.standard_normal(n)
    sol_x = lin_solve(amat, amat.matvec(rhs), 1e-12)
    check("banded solve residual contract",
          np.linalg.norm(amat.matvec(sol_x) - amat.matvec(rhs)) <= 1e-10 * np.linalg.norm(amat.matvec(rhs)))

    print(f"{'OK' if not failures else 'FAILED'}: {len(failures)} failures")
    return 0 if not failures else 4


def dispatch(args) -> int:
    cfg = load_config(args.config)
    handlers = {
        "solve": run_solve,
        "compare-newton": run_compare_newton,
        "order-study": run_order_study,
        "truncation-study": run_truncation_study,
        "spectra": run_spectra,
        "mass-audit": run_mass_audit,
        "check": run_check,
    }
    return handlers[args.command](cfg, args)
