"""Experiment configuration: INI parsing and the named function catalog.

All problem data in the shipped experiments are trigonometric polynomials, so
functions are described by term lists instead of parsed expressions:

    phi = cos:-200:1, cos:10:2          -> -200 cos(2 pi x) + 10 cos(4 pi x)
    u0  = sin:1:2, cos:0.1:5            -> sin(4 pi x) + 0.1 cos(10 pi x)
    mT  = const:1, cos:0.5:1            -> 1 + 0.5 cos(2 pi x)

Terms are kind:amplitude:frequency[:axis] with kind in {const, sin, cos};
frequency multiplies 2 pi; axis (0 or 1) selects the coordinate in 2D.
Couplings: power:q | zero | ksin:factor:freq | kcos:factor:freq (separable
kernels factor * f(x) f(y) with f = sin or cos at the given frequency).
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .operators import SchemeOrder
from .problem import LocalPower, NonlocalKernel, ProblemSpec, ZeroCoupling
from .sweep import RelaxSchedule

__all__ = ["ExperimentConfig", "SolverParams", "OutputParams", "load_config",
           "make_term_function", "make_coupling", "schedules_for_levels"]


def _parse_terms(text: str, where: str):
    terms = []
    for raw in text.split(","):
        part = raw.strip()
        if not part:
            continue
        bits = part.split(":")
        kind = bits[0].strip().lower()
        try:
            if kind == "const":
                if len(bits) != 2:
                    raise ValueError("const takes one number")
                terms.append(("const", float(bits[1]), 0.0, 0))
            elif kind in ("sin", "cos"):
                if len(bits) not in (3, 4):
                    raise ValueError("sin/cos take amp:freq[:axis]")
                axis = int(bits[3]) if len(bits) == 4 else 0
                if axis not in (0, 1):
                    raise ValueError("axis must be 0 or 1")
                terms.append((kind, float(bits[1]), float(bits[2]), axis))
            else:
                raise ValueError(f"unknown term kind {kind!r}")
        except ValueError as exc:
            raise ConfigError(f"{where}: bad term {part!r}: {exc}") from exc
    if not terms:
        raise ConfigError(f"{where}: empty function specification")
    return terms


def make_term_function(text: str, d: int, where: str = "function"):
    """Build a vectorized callable from a term list."""
    terms = _parse_terms(text, where)

    def f(*coords):
        out = 0.0
        for kind, amp, freq, axis in terms:
            if kind == "const":
                out = out + amp * np.ones_like(coords[0])
            else:
                x = coords[axis if d == 2 else 0]
                w = 2.0 * np.pi * freq
                out = out + amp * (np.sin(w * x) if kind == "sin" else np.cos(w * x))
        return out

    return f


def make_coupling(text: str, where: str = "coupling"):
    bits = [b.strip() for b in text.strip().split(":")]
    kind = bits[0].lower()
    if kind == "zero":
        return ZeroCoupling()
    if kind == "power":
        if len(bits) != 2:
            raise ConfigError(f"{where}: power takes one exponent")
        return LocalPower(float(bits[1]))
    if kind in ("ksin", "kcos"):
        if len(bits) != 3:
            raise ConfigError(f"{where}: {kind} takes factor:freq")
        factor, freq = float(bits[1]), float(bits[2])
        w = 2.0 * np.pi * freq
        profile = (lambda x: np.sin(w * x)) if kind == "ksin" else (lambda x: np.cos(w * x))
        return NonlocalKernel(factor=factor, profile=profile)
    raise ConfigError(f"{where}: unknown coupling {text!r}")


@dataclass(frozen=True)
class SolverParams:
    order: SchemeOrder = SchemeOrder.SECOND
    mode: str = "multiscale"  # or "single"
    l0: int = 4
    l: int = 6
    eps: float = 1e-6
    eps_inner: float = 1e-7
    alpha0: float = 1.0
    alpha_growth: float = 1.0
    alpha_late: float = 1.0
    alpha_level_growth: float = 1.0
    alpha_top: float = 1.0
    coarse_solver: str = "sweep"
    interp: str = "linear"
    max_iters: int = 200
    base_n: int | None = None
    base_nt: int | None = None
    newton_tol: float = 1e-5


@dataclass(frozen=True)
class OutputParams:
    directory: str = "out"
    fields: str = "finest"  # none | finest | all
    fields_format: str = "csv"  # csv | npy | both
    npy_threshold: int = 2_000_000


@dataclass
class ExperimentConfig:
    problem: ProblemSpec
    solver: SolverParams
    output: OutputParams
    extras: dict = field(default_factory=dict)
    sha: str = ""
    path: str = ""


def schedules_for_levels(params: SolverParams, n_levels: int) -> list[RelaxSchedule]:
    """Per-level schedules: alpha0 * level_growth^i on intermediate levels,
    alpha_top on the finest level of a multi-level chain."""
    out = []
    for i in range(n_levels):
        if n_levels > 1 and i == n_levels - 1:
            base = params.alpha_top
        else:
            base = min(params.alpha0 * params.alpha_level_growth**i, 1.0)
        out.append(RelaxSchedule(alpha0=base, growth=params.alpha_growth,
                                 alpha_late=params.alpha_late))
    return out


def _get(cp, section, key, conv, default=None, required=False):
    if not cp.has_option(section, key):
        if required:
            raise ConfigError(f"[{section}] missing required key {key!r}")
        return default
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    sha = hashlib.sha256(text.encode()).hexdigest()[:12]
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not cp.has_section("problem"):
        raise ConfigError(f"{path}: missing [problem] section")

    d = _get(cp, "problem", "dim", int, default=1)
    if d not in (1, 2):
        raise ConfigError(f"[problem] dim must be 1 or 2, got {d}")
    nu = _get(cp, "problem", "nu", float, required=True)
    gamma = _get(cp, "problem", "gamma", float, required=True)
    t_end = _get(cp, "problem", "T", float, required=True)
    if nu <= 0:
        raise ConfigError(f"[problem] nu must be positive, got {nu}")
    if gamma < 0:
        raise ConfigError(f"[problem] gamma must be >= 0, got {gamma}")
    phi = make_term_function(_get(cp, "problem", "phi", str, default="const:0"),
                             d, "[problem] phi")
    u0 = make_term_function(_get(cp, "problem", "u0", str, required=True),
                            d, "[problem] u0")
    m_t = make_term_function(_get(cp, "problem", "mT", str, required=True),
                             d, "[problem] mT")
    v = make_coupling(_get(cp, "problem", "V", str, default="zero"), "[problem] V")
    v0 = make_coupling(_get(cp, "problem", "V0", str, default="zero"), "[problem] V0")
    problem = ProblemSpec(d=d, nu=nu, gamma=gamma, t_end=t_end, phi=phi,
                          v=v, v0=v0, u0=u0, m_T=m_t)

    order_i = _get(cp, "solver", "order", int, default=2)
    if order_i not in (1, 2):
        raise ConfigError(f"[solver] order must be 1 or 2, got {order_i}")
    alpha0 = _get(cp, "solver", "alpha0", float, default=1.0)
    if not (0.0 < alpha0 <= 1.0):
        raise ConfigError(f"[solver] alpha0 must lie in (0, 1], got {alpha0}")
    mode = _get(cp, "solver", "mode", str, default="multiscale").strip().lower()
    if mode not in ("multiscale", "single"):
        raise ConfigError(f"[solver] mode must be multiscale or single, got {mode!r}")
    interp = _get(cp, "solver", "interp", str, default="linear").strip().lower()
    if interp not in ("linear", "cubic"):
        raise ConfigError(f"[solver] interp must be linear or cubic, got {interp!r}")
    coarse = _get(cp, "solver", "coarse_solver", str, default="sweep").strip().lower()
    if coarse not in ("sweep", "newton"):
        raise ConfigError(f"[solver] coarse_solver must be sweep or newton, got {coarse!r}")
    solver = SolverParams(
        order=SchemeOrder.SECOND if order_i == 2 else SchemeOrder.FIRST,
        mode=mode,
        l0=_get(cp, "solver", "L0", int, default=4),
        l=_get(cp, "solver", "L", int, default=6),
        eps=_get(cp, "solver", "eps", float, default=1e-6),
        eps_inner=_get(cp, "solver", "eps_inner", float, default=1e-7),
        alpha0=alpha0,
        alpha_growth=_get(cp, "solver", "alpha_growth", float, default=1.0),
        alpha_late=_get(cp, "solver", "alpha_late", float, default=1.0),
        alpha_level_growth=_get(cp, "solver", "alpha_level_growth", float, default=1.0),
        alpha_top=_get(cp, "solver", "alpha_top", float, default=1.0),
        coarse_solver=coarse,
        interp=interp,
        max_iters=_get(cp, "solver", "max_iters", int, default=200),
        base_n=_get(cp, "solver", "base_n", int, default=None),
        base_nt=_get(cp, "solver", "base_nt", int, default=None),
        newton_tol=_get(cp, "solver", "newton_tol", float, default=1e-5),
    )
    if solver.l0 > solver.l:
        raise ConfigError(f"[solver] L0 = {solver.l0} exceeds L = {solver.l}")

    output = OutputParams(
        directory=_get(cp, "output", "dir", str, default="out"),
        fields=_get(cp, "output", "fields", str, default="finest").strip().lower(),
        fields_format=_get(cp, "output", "fields_format", str, default="csv").strip().lower(),
        npy_threshold=_get(cp, "output", "npy_threshold", int, default=2_000_000),
    )
    if output.fields not in ("none", "finest", "all"):
        raise ConfigError(f"[output] fields must be none|finest|all, got {output.fields!r}")
    if output.fields_format not in ("csv", "npy", "both"):
        raise ConfigError(f"[output] fields_format must be csv|npy|both")

    extras = {}
    for section in cp.sections():
        if section in ("problem", "solver", "output"):
            continue
        extras[section] = dict(cp.items(section))
    return ExperimentConfig(problem=problem, solver=solver, output=output,
                            extras=extras, sha=sha, path=str(path))
