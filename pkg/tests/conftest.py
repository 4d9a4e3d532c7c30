import numpy as np
import pytest

from mfgsolve.grids import LevelGrid
from mfgsolve.problem import LocalPower, ProblemSpec, ZeroCoupling


def paper_1d_spec(nu=0.4, gamma=2.0, t_end=0.01, v=None, v0=None,
                  u0=None, m_t=None):
    """The 1D test family: phi = -200 cos(2 pi x) + 10 cos(4 pi x)."""
    return ProblemSpec(
        d=1, nu=nu, gamma=gamma, t_end=t_end,
        phi=lambda x: -200.0 * np.cos(2 * np.pi * x) + 10.0 * np.cos(4 * np.pi * x),
        v=v if v is not None else LocalPower(2.0),
        v0=v0 if v0 is not None else ZeroCoupling(),
        u0=u0 if u0 is not None else (
            lambda x: np.sin(4 * np.pi * x) + 0.1 * np.cos(10 * np.pi * x)),
        m_T=m_t if m_t is not None else (lambda x: 1.0 + 0.5 * np.cos(2 * np.pi * x)),
    )


def tiny_spec(nu=0.5, gamma=2.0, t_end=0.2, q=2.0):
    """Small smooth problem with visible coupling, for tiny-instance oracles."""
    return ProblemSpec(
        d=1, nu=nu, gamma=gamma, t_end=t_end,
        phi=lambda x: np.cos(2 * np.pi * x),
        v=LocalPower(q), v0=ZeroCoupling(),
        u0=lambda x: 0.5 * np.cos(2 * np.pi * x),
        m_T=lambda x: 1.0 + 0.3 * np.cos(2 * np.pi * x),
    )


def heat_spec(nu=0.3, t_end=0.1):
    """gamma = 0, phi = 0, V = 0: the decoupled constant-preserving problem."""
    return ProblemSpec(
        d=1, nu=nu, gamma=0.0, t_end=t_end,
        phi=lambda x: 0.0 * x,
        v=ZeroCoupling(), v0=ZeroCoupling(),
        u0=lambda x: 0.0 * x + 1.0,
        m_T=lambda x: 0.0 * x + 1.0,
    )


def spec_2d(nu=1.0, gamma=2.0, t_end=1.0):
    """The 2D test family of the experiments."""
    return ProblemSpec(
        d=2, nu=nu, gamma=gamma, t_end=t_end,
        phi=lambda x1, x2: np.cos(4 * np.pi * x1) + np.sin(2 * np.pi * x1)
        + np.sin(2 * np.pi * x2),
        v=LocalPower(2.0), v0=ZeroCoupling(),
        u0=lambda x1, x2: np.cos(2 * np.pi * x1) + np.cos(2 * np.pi * x2),
        m_T=lambda x1, x2: 1.0 + 0.5 * np.cos(2 * np.pi * x1)
        + 0.5 * np.cos(2 * np.pi * x2),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid16():
    return LevelGrid(4, 1, 16, 16, 0.01)
