"""
Discretized mean-field type control: the forward-backward system on an
ensemble of atoms and scenarios, its Jacobian and linear functional
derivative flows, and the residual checks of the Bellman and master equations.
"""

from .core import EmpiricalMeasure, FieldProcess, NoiseBundle, RandomField, TimeGrid, brownian_paths, gaussian_atoms
from .errors import (
    AssumptionGateError, ConfigError, ConvergenceError, DivergenceError, MfcError, MissingDerivativeError,
)
from .fbsde import METHODS, ControlProblem, OptimalQuadruple, SolverSettings, make_problem, solve_optimal
from .jacobian import matrix_jacobian, solve_jacobian_flow
from .lfd import solve_grad_lfd_flow, solve_lfd_flow, value_lfd
from .model import BUILTIN_MODELS, CostModel, build_model, builtin_models, check_assumptions, compute_c0
from .oracle import compare_with_riccati, riccati_for
from .pde import bellman_residual, ito_check, master_residual

__all__ = [
    'AssumptionGateError', 'BUILTIN_MODELS', 'ConfigError', 'ControlProblem', 'ConvergenceError', 'CostModel',
    'DivergenceError', 'EmpiricalMeasure', 'FieldProcess', 'METHODS', 'MfcError', 'MissingDerivativeError',
    'NoiseBundle', 'OptimalQuadruple', 'RandomField', 'SolverSettings', 'TimeGrid', 'bellman_residual',
    'brownian_paths', 'build_model', 'builtin_models', 'check_assumptions', 'compare_with_riccati', 'compute_c0', 'gaussian_atoms',
    'ito_check', 'make_problem', 'master_residual', 'matrix_jacobian', 'riccati_for', 'solve_grad_lfd_flow',
    'solve_jacobian_flow', 'solve_lfd_flow', 'solve_optimal', 'value_lfd',
]
