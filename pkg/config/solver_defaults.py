#!/usr/bin/env python3
"""
Numeric defaults for the solvers and diagnostics.

Every entry can be overridden per process through an environment variable
built from its key: `solver.tol` → `MFC_SOLVER_TOL`.
"""

import os
from typing import Any, Dict, List

SOLVER_DEFAULTS: Dict[str, Any] = {
    # Coupled FBSDE solvers
    'solver.tol': 1e-6,
    'solver.max_iters': 3000,
    'solver.picard_damping': 0.5,
    'solver.log_every': 25,
    'solver.divergence_factor': 1e8,

    # Pointwise first-order condition
    'feedback.tol': 1e-10,
    'feedback.max_iters': 50,
    'feedback.armijo': 1e-4,

    # Conditional expectation estimator
    'regression.degree': 2,
    'regression.ridge': 1e-8,
    'regression.rank_tol': 1e-10,
    'regression.warn_condition': 1e8,

    # Linear flows (Jacobian, dnu, xi-gradient)
    'flow.damping': 0.5,
    'flow.max_iters': 200,
    'flow.tol': 1e-8,
    'flow.retry_attempts': 3,
    'flow.max_matrix_entries': 50_000_000,

    # Assumption probing
    'probes.count': 1000,
    'probes.radius': 10.0,
    'probes.seed': 20240101,
    'probes.measures': 8,
    'probes.measure_size': 16,
    'probes.slack': 1e-9,

    # lfd
    'lfd.delta_grid': 100,

    # Residual evaluators
    'pde.time_step_multiple': 2,
    'pde.gaussian_samples': 4,

    # Finite-difference checks
    'fd.inner_tol': 1e-11,
}


def get_default(key: str, default: Any = None) -> Any:
    """
    Look up a numeric default with environment override support.

    The override is coerced to the type of the registered value; values that
    fail to parse fall back to the registered default.
    """
    env_key = f"MFC_{key.upper().replace('.', '_')}"
    env_value = os.getenv(env_key)
    registered = SOLVER_DEFAULTS.get(key, default)

    if env_value is None:
        return registered

    if isinstance(registered, bool):
        return env_value.lower() in ('true', '1', 'yes', 'on')
    if isinstance(registered, int):
        try:
            return int(env_value)
        except ValueError:
            return registered
    if isinstance(registered, float):
        try:
            return float(env_value)
        except ValueError:
            return registered
    return env_value


def get_section(prefix: str) -> Dict[str, Any]:
    """All defaults under one prefix, with overrides applied."""
    return {
        key.split('.', 1)[1]: get_default(key)
        for key in SOLVER_DEFAULTS
        if key.startswith(f"{prefix}.")
    }


def validate_solver_defaults() -> List[str]:
    """Return a list of problems with the effective defaults (empty when sane)."""
    issues = []

    tol = get_default('solver.tol')
    if not 0 < tol < 1:
        issues.append(f"solver.tol must lie in (0, 1), got {tol}")

    for key in ('solver.picard_damping', 'flow.damping'):
        value = get_default(key)
        if not 0 < value <= 1:
            issues.append(f"{key} must lie in (0, 1], got {value}")

    if get_default('regression.degree') < 0:
        issues.append("regression.degree must be non-negative")

    if get_default('regression.ridge') < 0:
        issues.append("regression.ridge must be non-negative")

    for key in ('regression.rank_tol', 'regression.warn_condition'):
        if get_default(key) <= 0:
            issues.append(f"{key} must be positive")

    for key in ('solver.max_iters', 'feedback.max_iters', 'flow.max_iters', 'probes.count'):
        if get_default(key) < 1:
            issues.append(f"{key} must be at least 1")

    return issues
