"""Galerkin solvers for the Zakai equation with Hermite bases.

Filters a hidden diffusion observed through a noisy diffusive channel and a
counting process whose intensity depends on the signal.
"""
from .adaptive import AgaConfig, initial_basis, rebase, run_aga, should_rebase
from .errors import (
    ConfigError,
    DegenerateStateError,
    DegreeOverflowError,
    FilterDivergenceError,
    GramError,
    ParticleCollapseError,
    QuadratureError,
    RebaseError,
    ZakaiError,
)
from .galerkin import (
    CoefficientMatrices,
    FilterEstimate,
    FilterResult,
    FilterState,
    Method,
    assemble,
    assemble_quadrature,
    conditional_moments,
    density_eval,
    em_step,
    kalman_matrices,
    run_filter,
    su_step,
)
from .hermite import BasisFamily, BasisSpec, build_coeff_table, moment_weight, project_gaussian
from .model import (
    LinearMDParams,
    LinearModelParams,
    ModelSpec,
    PathBundle,
    make_linear_md_model,
    make_linear_model,
    simulate_bundle,
)
from .multidim import TensorBasisSpec, assemble_md, run_filter_md
from .reference import kalman_bucy, particle_filter

__version__ = "0.1.0"
