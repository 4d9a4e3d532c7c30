"""Linear solvers for the periodic systems of the time marchers.

1D systems are cyclic banded matrices (bandwidth 1 or 2).  They are solved
directly: LAPACK banded elimination on the band with the wrap-around corner
entries folded in through a rank-2b Woodbury correction.  A sparse-LU fallback
covers matrices where the stripped band is singular, and every solve is
verified against the residual contract ||Ax - b|| <= tol ||b||.

2D systems are applied matrix-free from the stencils and solved with
preconditioned GMRES; the preconditioner inverts the constant-coefficient
part (identity + diffusion) exactly via FFT on the periodic grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import LinearSolveError

__all__ = [
    "PeriodicBandMatrix",
    "StencilOperator",
    "solve",
    "build_transpose",
    "DEFAULT_TOL_1D",
    "DEFAULT_TOL_2D",
]

DEFAULT_TOL_1D = 1e-12
DEFAULT_TOL_2D = 1e-10


@dataclass(frozen=True)
class PeriodicBandMatrix:
    """Cyclic banded matrix stored by diagonals.

    diags[k][i] holds A[i, (i+k) mod n].  Offsets k run over [-b, b]; when
    n <= 2b two offsets can address the same entry, in which case their
    contributions accumulate (this happens only on tiny diagnostic grids).
    """

    n: int
    diags: dict

    def __post_init__(self):
        clean = {}
        for k, v in self.diags.items():
            arr = np.ascontiguousarray(v, dtype=np.float64)
            if arr.shape != (self.n,):
                raise LinearSolveError(f"diagonal {k} has shape {arr.shape}, expected ({self.n},)")
            if not np.isfinite(arr).all():
                raise LinearSolveError(f"diagonal {k} contains non-finite entries")
            clean[int(k)] = arr
        object.__setattr__(self, "diags", clean)
        if self.bandwidth > self.n // 2:
            raise LinearSolveError(
                f"bandwidth {self.bandwidth} too large for size {self.n}"
            )

    @property
    def bandwidth(self) -> int:
        return max(abs(k) for k in self.diags)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = np.zeros_like(x, dtype=np.float64)
        for k, v in self.diags.items():
            y += v * np.roll(x, -k)
        return y

    def inf_norm(self) -> float:
        return float(sum(np.abs(v) for v in self.diags.values()).max())

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        rows = np.arange(self.n)
        for k, v in self.diags.items():
            a[rows, (rows + k) % self.n] += v
        return a

    def transpose(self) -> "PeriodicBandMatrix":
        """Exact transpose: diags_T[k] = roll(diags[-k], -k)."""
        return PeriodicBandMatrix(
            self.n, {k: np.roll(self.diags[-k], -k) for k in map(lambda j: -j, self.diags)}
        )


def build_transpose(a: PeriodicBandMatrix) -> PeriodicBandMatrix:
    return a.transpose()


def _solve_banded_woodbury(a: PeriodicBandMatrix, rhs: np.ndarray) -> np.ndarray:
    """Direct cyclic-band solve: banded LU on the stripped band plus a
    rank-2b bordering correction for the wrap-around corners."""
    n, b = a.n, a.bandwidth
    ab = np.zeros((2 * b + 1, n))
    for k, v in a.diags.items():
        lo, hi = max(0, k), n + min(0, k)
        ab[b - k, lo:hi] = v[max(0, -k):n - max(0, k)]
    # corner entries (rows 0..b-1 and n-b..n-1 reach across the wrap)
    corner_rows = list(range(b)) + list(range(n - b, n))
    p_rows = np.zeros((2 * b, n))
    row_pos = {r: i for i, r in enumerate(corner_rows)}
    for k, v in a.diags.items():
        if k > 0:
            for i in range(n - k, n):
                p_rows[row_pos[i], i + k - n] = v[i]
        elif k < 0:
            for i in range(0, -k):
                p_rows[row_pos[i], i + k + n] = v[i]
    sel = np.zeros((n, 2 * b))
    for j, r in enumerate(corner_rows):
        sel[r, j] = 1.0
    stacked = np.column_stack([rhs, sel])
    sol = sla.solve_banded((b, b), ab, stacked)
    x0, y = sol[:, 0], sol[:, 1:]
    cap = np.eye(2 * b) + p_rows @ y
    w = np.linalg.solve(cap, p_rows @ x0)
    return x0 - y @ w


def _solve_sparse(a: PeriodicBandMatrix, rhs: np.ndarray) -> np.ndarray:
    return spla.spsolve(sp.csc_matrix(a.to_dense()), rhs)


BLOWUP_RATIO = 1e12  # ||A|| ||x|| beyond this multiple of ||b|| marks a null-space blowup


def _backward_scale(a: PeriodicBandMatrix, x: np.ndarray, bnorm: float) -> float:
    """Denominator of the backward-stable residual contract,
    max(||b||, ||A||_inf ||x||): rounding in forming A x alone reaches
    eps * ||A|| ||x||, so a pure ||b||-relative target is unattainable for
    stiff diffusion matrices.  Singular systems are caught separately by the
    blowup guard (a huge x makes any backward error look small); the systems
    here all carry the identity block, so a solution vastly larger than the
    data marks a near-null-space component."""
    xnorm = np.linalg.norm(x)
    if xnorm > BLOWUP_RATIO * max(bnorm, 1e-300):
        raise LinearSolveError(
            f"system is numerically singular (|x| ~ {xnorm:.2e} "
            f"for |b| = {bnorm:.2e})")
    return max(bnorm, a.inf_norm() * xnorm)


def _refine(a: PeriodicBandMatrix, solver, x: np.ndarray, rhs: np.ndarray,
            bnorm: float, tol: float, passes: int = 2):
    """Iterative refinement: re-solve on the residual until the contract holds."""
    res = np.linalg.norm(a.matvec(x) - rhs) / _backward_scale(a, x, bnorm)
    for _ in range(passes):
        if res <= tol:
            break
        dx = solver(rhs - a.matvec(x))
        if not np.isfinite(dx).all():
            break
        x = x + dx
        res = np.linalg.norm(a.matvec(x) - rhs) / _backward_scale(a, x, bnorm)
    return x, res


def _solve_band(a: PeriodicBandMatrix, rhs: np.ndarray, tol: float) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=np.float64)
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros_like(rhs)
    x = None
    if a.n > 2 * a.bandwidth:
        try:
            x = _solve_banded_woodbury(a, rhs)
        except (np.linalg.LinAlgError, ValueError):
            x = None
        if x is not None and not np.isfinite(x).all():
            x = None
        if x is not None:
            x, res = _refine(a, lambda b: _solve_banded_woodbury(a, b), x, rhs,
                             bnorm, tol)
            if res <= tol:
                return x
    else:
        try:
            x = np.linalg.solve(a.to_dense(), rhs)
        except np.linalg.LinAlgError:
            x = None
        if x is not None:
            dense = a.to_dense()
            x, res = _refine(a, lambda b: np.linalg.solve(dense, b), x, rhs,
                             bnorm, tol)
            if res <= tol:
                return x
    # fallback: sparse LU on the full cyclic matrix
    try:
        x = _solve_sparse(a, rhs)
    except RuntimeError as exc:  # umfpack/superlu singularity
        raise LinearSolveError(f"singular cyclic band system: {exc}") from exc
    if not np.isfinite(x).all():
        raise LinearSolveError("cyclic band solve produced non-finite values")
    x, res = _refine(a, lambda b: _solve_sparse(a, b), x, rhs, bnorm, tol)
    if res > tol:
        raise LinearSolveError(
            f"residual contract violated: achieved {res:.3e} > tol {tol:.1e}",
            achieved=res,
        )
    return x


@dataclass
class StencilOperator:
    """Matrix-free operator for the 2D solves, with an FFT preconditioner.

    apply(x) evaluates A x on flat vectors; precond approximately inverts A
    (exactly inverting its constant-coefficient part); shape carries the 2D
    field shape for the FFT.
    """

    size: int
    apply: Callable
    precond: Callable | None = None
    gmres_restart: int = 40
    gmres_maxiter: int = 400

    def matvec(self, x):
        return self.apply(x)


def make_fft_precond(shape: tuple[int, ...], coef: float, nu: float, h: float) -> Callable:
    """Inverse of (I + coef * L) on the periodic grid, L = -nu * Laplacian."""
    sym = np.ones(1)
    theta = [2.0 * np.pi * np.fft.fftfreq(m) for m in shape]
    lam = np.zeros(shape)
    for a, th in enumerate(theta):
        sh = [1] * len(shape)
        sh[a] = shape[a]
        lam = lam + (2.0 - 2.0 * np.cos(th)).reshape(sh) * (nu / h**2)
    sym = 1.0 + coef * lam
    rsym = sym[..., : shape[-1] // 2 + 1]

    axes = tuple(range(len(shape)))

    def precond(x):
        field = np.asarray(x, dtype=np.float64).reshape(shape)
        return np.fft.irfftn(np.fft.rfftn(field, axes=axes) / rsym,
                             s=shape, axes=axes).reshape(-1)

    return precond


def _solve_operator(op: StencilOperator, rhs: np.ndarray, tol: float,
                    x0: np.ndarray | None) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=np.float64)
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros_like(rhs)
    lin = spla.LinearOperator((op.size, op.size), matvec=op.apply, dtype=np.float64)
    m = spla.LinearOperator((op.size, op.size), matvec=op.precond,
                            dtype=np.float64) if op.precond else None
    x, info = spla.gmres(lin, rhs, x0=x0, M=m, rtol=tol, atol=0.0,
                         restart=op.gmres_restart, maxiter=op.gmres_maxiter)
    res = np.linalg.norm(op.apply(x) - rhs) / bnorm
    if res > tol:
        x, info = spla.gmres(lin, rhs, x0=x, M=m, rtol=tol, atol=0.0,
                             restart=op.gmres_restart, maxiter=4 * op.gmres_maxiter)
        res = np.linalg.norm(op.apply(x) - rhs) / bnorm
    if res > tol:
        raise LinearSolveError(
            f"iterative solve stalled: achieved {res:.3e} > tol {tol:.1e}",
            achieved=res,
        )
    return x


def solve(a, rhs: np.ndarray, tol: float | None = None,
          x0: np.ndarray | None = None) -> np.ndarray:
    """Solve A x = rhs to the relative residual contract ||Ax-b|| <= tol ||b||."""
    if isinstance(a, PeriodicBandMatrix):
        return _solve_band(a, rhs, DEFAULT_TOL_1D if tol is None else tol)
    if isinstance(a, StencilOperator):
        return _solve_operator(a, rhs, DEFAULT_TOL_2D if tol is None else tol, x0)
    if isinstance(a, np.ndarray):
        t = DEFAULT_TOL_1D if tol is None else tol
        rhs = np.asarray(rhs, dtype=np.float64)
        bnorm = np.linalg.norm(rhs)
        try:
            x = np.linalg.solve(a, rhs)
        except np.linalg.LinAlgError as exc:
            raise LinearSolveError(f"singular dense system: {exc}") from exc
        res = np.linalg.norm(a @ x - rhs) / bnorm if bnorm else 0.0
        if res > t or not np.isfinite(x).all():
            raise LinearSolveError(f"dense solve residual {res:.3e} > tol {t:.1e}", achieved=res)
        return x
    raise LinearSolveError(f"unsupported operator type {type(a)!r}")
