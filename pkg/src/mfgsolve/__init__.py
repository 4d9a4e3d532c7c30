"""Solver library for forward-backward mean field game systems on periodic
grids: alternating sweeping with relaxation, a multiscale initial-guess
hierarchy, first- and second-order discretizations, and a coupled Newton
baseline."""

from .errors import (
    AnalysisError,
    ConfigError,
    GridError,
    InnerIterationDiverged,
    LinearSolveError,
    MfgError,
    MultiscaleError,
    NewtonError,
    SweepAborted,
)
from .grids import (
    FieldSeries,
    GridFn,
    LevelGrid,
    build_hierarchy,
    rel_norm,
    restrict_series,
    sample,
    series_norm,
    total_mass,
)
from .problem import LocalPower, NonlocalKernel, ProblemSpec, ZeroCoupling, naive_density_guess
from .operators import (
    OneSidedPair,
    SchemeOrder,
    beam_warming,
    coupling_V,
    discrete_hamiltonian,
    hamiltonian_gradient,
    laplace_term,
    transport_B,
    upwind_first,
)
from .linsolve import PeriodicBandMatrix, StencilOperator, build_transpose, solve
from .marchers import HjbStats, solve_hjb, solve_kfp
from .sweep import RelaxSchedule, SweepReport, alternating_sweep, system_residual
from .multiscale import LevelReport, interpolate_up, multiscale_solve
from .newton import NewtonResult, newton_solve
from .analysis import (
    JacobianBlocks,
    ManufacturedPair,
    convergence_order_table,
    default_manufactured_pair,
    estimate_jacobians,
    relax_bound,
    sine_manufactured_pair,
    spectral_radius_commute_check,
    sweep_spectral_radius,
    truncation_order_study,
)
from .config import ExperimentConfig, load_config

__version__ = "0.1.0"
