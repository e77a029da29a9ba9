"""
Residual evaluators for the Bellman equation on measures, the master
equation for U = dV/dnu, and the mean-field Ito formula.

Every residual is assembled from named components whose plain sum is the
residual; time derivatives are central differences over a multiple of dt,
one-sided at the ends of the grid.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from config import get_default

from .core import EmpiricalMeasure, RandomField, TimeGrid, atom_field, hm_inner, pushforward
from .errors import ConvergenceError
from .fbsde import (
    ControlProblem, OptimalQuadruple, SolverSettings, frechet_check, solve_optimal,
    terminal_cost, terminal_costate,
)
from .hamiltonian import feedback_u, hamiltonian
from .jacobian import freeze_coefficients, matrix_jacobian, second_derivative_V
from .lfd import solve_grad_lfd_flow, solve_lfd_flow, solve_probe, value_lfd

logger = logging.getLogger(__name__)


@dataclass
class ResidualReport:
    kind: str
    t: float
    components: Dict[str, float]
    residual: float
    normalized: float
    step: float
    x: Optional[List[float]] = None
    metadata: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_components(cls, kind: str, t: float, components: Dict[str, float], step: float,
                        x=None, metadata=None) -> "ResidualReport":
        residual = math.fsum(components.values())
        largest = max(abs(value) for value in components.values())
        normalized = abs(residual) / largest if largest > 0 else 0.0
        return cls(kind, t, dict(components), residual, normalized, step,
                   None if x is None else np.ravel(x).tolist(), dict(metadata or {}))

    def to_dict(self) -> Dict[str, object]:
        return {
            'kind': self.kind,
            't': self.t,
            'x': self.x,
            'components': self.components,
            'residual': self.residual,
            'normalized': self.normalized,
            'step': self.step,
            'metadata': self.metadata,
        }


def _node(grid: TimeGrid, t_probe) -> int:
    if isinstance(t_probe, (int, np.integer)):
        k = int(t_probe)
    else:
        k = grid.index_of(float(t_probe))
    if not 0 <= k < grid.N:
        raise ValueError(f"probe node {k} must lie in [0, {grid.N})")
    return k


def _stencil(grid: TimeGrid, k: int, multiple: int):
    """(lo, hi) nodes for the time difference: central when both fit, else one-sided."""
    lo = k - multiple if k - multiple >= 0 else k
    hi = k + multiple if k + multiple <= grid.N - 1 else k
    if lo == hi:
        raise ValueError(f"grid with N={grid.N} is too coarse for a time difference at node {k}")
    return lo, hi


def _solve_at(problem: ControlProblem, k: int, method: str, settings: SolverSettings) -> OptimalQuadruple:
    sub = problem.tail(k) if k > 0 else problem
    quad = solve_optimal(sub, method, settings)
    if not quad.converged:
        raise ConvergenceError(f"solve from node {k} did not converge", best=quad, history=list(quad.history))
    return quad


def _solve_nodes(problem, nodes, method, settings, threads) -> Dict[int, OptimalQuadruple]:
    unique = sorted(set(nodes))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        quads = list(executor.map(lambda k: _solve_at(problem, k, method, settings), unique))
    return dict(zip(unique, quads))


def _eta_trace(eta: np.ndarray, hessians: np.ndarray) -> float:
    """Ensemble mean of sum_j eta^j . H eta^j over leading (M, K) axes."""
    M, K = hessians.shape[:2]
    return float(np.einsum('aj,mkab,bj->', eta, hessians, eta) / (M * K))


def gaussian_trace(quad: OptimalQuadruple, samples: int = None, seed: int = 0) -> Dict[str, float]:
    """
    sum_j integral of D2_x(dV/dnu) eta^j . eta^j dm estimated through directional
    second derivatives along per-atom Gaussian directions Psi = eta N.
    """
    samples = samples or get_default('pde.gaussian_samples')
    problem = quad.problem
    rng = np.random.default_rng(seed)
    coeffs = freeze_coefficients(quad)
    estimates = []
    for _ in range(samples):
        gaussians = rng.standard_normal((problem.M, problem.n))
        psi = atom_field(gaussians @ problem.eta.T, problem.K)
        estimates.append(hm_inner(second_derivative_V(quad, psi, coeffs), psi))
    estimates = np.asarray(estimates)
    spread = float(estimates.std(ddof=1) / math.sqrt(samples)) if samples > 1 else float('nan')
    return {'estimate': float(estimates.mean()), 'standard_error': spread}


def bellman_residual(problem: ControlProblem, t_probe, method: str = 'picard_feedback',
                     settings: Optional[SolverSettings] = None, step_multiple: int = None,
                     gaussian_samples: int = None, seed: int = 0, threads: int = 1) -> ResidualReport:
    """
    -dV/dt - 1/2 sum_j int D2_x(dV/dnu) eta^j . eta^j dm - int H(x, D_x dV/dnu) dm - F(m)
    at (m, t_probe) with D_x dV/dnu = Z_{txm}(t) and D2_x dV/dnu = D_xZ_{txm}(t).
    """
    settings = settings or SolverSettings.from_defaults()
    multiple = step_multiple or get_default('pde.time_step_multiple')
    grid = problem.grid
    k = _node(grid, t_probe)
    lo, hi = _stencil(grid, k, multiple)
    quads = _solve_nodes(problem, (lo, k, hi), method, settings, threads)
    quad = quads[k]

    x0 = problem.x0.values
    Z0 = quad.Z.values[0]
    dV_dt = (quads[hi].value - quads[lo].value) / ((hi - lo) * grid.dt)
    trace = _eta_trace(problem.eta, matrix_jacobian(quad).DZ.values[0])
    H = hamiltonian(x0, Z0, problem.model)
    F = problem.model.F(pushforward(x0))

    components = {
        'time': -dV_dt,
        'trace': -0.5 * trace,
        'hamiltonian': -float(np.mean(H.H)),
        'running_mean_field': -F,
    }
    gaussian = gaussian_trace(quad, gaussian_samples, seed)
    metadata = {
        'node': k,
        'stencil': [lo, hi],
        'values': {str(j): quads[j].value for j in sorted(quads)},
        'trace_matrix': trace,
        'trace_gaussian': gaussian['estimate'],
        'trace_gaussian_standard_error': gaussian['standard_error'],
    }
    report = ResidualReport.from_components('bellman', grid.node(k), components, (hi - lo) * grid.dt,
                                            metadata=metadata)
    logger.info(f"🧪 Bellman residual at t={grid.node(k):.4f}: {report.residual:.4e} "
                f"(normalized {report.normalized:.3%})")
    return report


def terminal_identity(problem: ControlProblem) -> float:
    """|V(m, T) - (int h dm + F_T(m))| with V(m, T) from the solver's terminal cost."""
    atoms = problem.x0.values[:, 0]
    model = problem.model
    direct = float(np.mean(model.h(atoms))) + model.F_T(EmpiricalMeasure.uniform(atoms))
    return abs(terminal_cost(problem, problem.x0.values) - direct)


def master_residual(problem: ControlProblem, x_probe, t_probe, method: str = 'picard_feedback',
                    settings: Optional[SolverSettings] = None, step_multiple: int = None,
                    threads: int = 1) -> ResidualReport:
    """
    Residual of the master equation for U(x, m, t) = dV/dnu(m, t)(x):

        -dU/dt - 1/2 tr(eta eta^T D2_x U) - 1/2 int tr(eta eta^T D2_xi dU/dnu) dm
        - H(x, D_x U) - int H_p(xi, D_xi U) . D_xi dU/dnu dm - dF/dnu(m)(x)

    with D_x U = Z_x(t), D2_x U = D_xZ_x(t), D_xi dU/dnu = dZ/dnu(x, t) and
    D2_xi dU/dnu = D_xi(dZ/dnu)(x, t). U is taken in the unnormalized convention.
    """
    settings = settings or SolverSettings.from_defaults()
    multiple = step_multiple or get_default('pde.time_step_multiple')
    grid = problem.grid
    model = problem.model
    x = np.atleast_1d(np.asarray(x_probe, dtype=float))
    k = _node(grid, t_probe)
    lo, hi = _stencil(grid, k, multiple)
    quads = _solve_nodes(problem, (lo, k, hi), method, settings, threads)
    quad = quads[k]

    probe = solve_probe(quad, x)
    values = {j: (probe if j == k else None) for j in (lo, hi)}
    U = {j: value_lfd(quads[j], x, probe=values[j]).raw for j in (lo, hi)}
    dU_dt = (U[hi] - U[lo]) / ((hi - lo) * grid.dt)

    coeffs = freeze_coefficients(quad)
    lfd = solve_lfd_flow(quad, x, probe=probe, coeffs=coeffs)
    gradient = solve_grad_lfd_flow(quad, x, lfd=lfd, coeffs=coeffs)

    trace_x = _eta_trace(problem.eta, matrix_jacobian(probe).DZ.values[0])
    trace_measure = _eta_trace(problem.eta, gradient.dZ_dnu.values[0])

    H = hamiltonian(probe.problem.x0.values, probe.Z.values[0], model)
    x0 = problem.x0.values
    Z0 = quad.Z.values[0]
    H_p = feedback_u(x0, Z0, model).u
    transport = hm_inner(H_p, lfd.dZ_dnu.values[0])
    mean_field = float(model.running.d1(pushforward(x0), x[None])[0])

    components = {
        'time': -dU_dt,
        'trace_x': -0.5 * trace_x,
        'trace_measure': -0.5 * trace_measure,
        'hamiltonian': -float(np.mean(H.H)),
        'transport': -transport,
        'running_mean_field': -mean_field,
    }
    metadata = {'node': k, 'stencil': [lo, hi], 'U': {str(j): U[j] for j in U}}
    report = ResidualReport.from_components('master', grid.node(k), components, (hi - lo) * grid.dt,
                                            x=x, metadata=metadata)
    logger.info(f"🧪 Master residual at x={x.tolist()}, t={grid.node(k):.4f}: {report.residual:.4e} "
                f"(normalized {report.normalized:.3%})")
    return report


def master_terminal_identity(problem: ControlProblem, x_probe) -> Dict[str, float]:
    """
    U(x, m, T) = h(x) + dF_T/dnu(m)(x): the gap between the terminal costate of a
    frozen-measure single atom and the x-gradient of that expression, and the
    integral of the normalized U against m.
    """
    model = problem.model
    x = np.atleast_1d(np.asarray(x_probe, dtype=float))[None]
    atoms = problem.x0.values[:, 0]
    mu = EmpiricalMeasure.uniform(atoms)

    def terminal_u(points):
        return model.h(points) + model.terminal.d1(mu, points)

    raw = float(terminal_u(x)[0])
    population = terminal_u(atoms)
    normalized_mean = float(np.mean(population - np.mean(population)))

    frozen = ControlProblem(model, problem.eta, problem.grid, problem.x0, problem.noise,
                            frozen_measures=(mu,) * (problem.N + 1))
    costate = terminal_costate(frozen, x)[0]
    gradient = model.h_x(x)[0] + model.terminal.d1_x(mu, x)[0]
    return {'U_T': raw, 'gradient_gap': float(np.max(np.abs(costate - gradient))),
            'normalized_integral': abs(normalized_mean)}


def costate_consistency_check(problem: ControlProblem, quad: OptimalQuadruple, s_mid, psi: RandomField,
                              eps_list: Sequence[float] = (1e-2, 1e-3)) -> Dict[str, object]:
    """D_XV = Z at an interior node: <Z(s), Psi> against difference quotients of V(Y(s) ⊗ m, s)."""
    k = _node(problem.grid, s_mid)
    sub = problem.tail(k, x0=RandomField(quad.Y.values[k]))
    report = frechet_check(sub, psi, eps_list, quad.method, quad.settings)
    along_path = hm_inner(quad.Z.values[k], psi)
    return {
        'node': k,
        'inner_along_path': along_path,
        'inner_restart': report.inner_product,
        'finite_differences': report.finite_differences,
        'remainders': [abs(q - along_path) for q in report.finite_differences],
    }


@dataclass
class TestFunctional:
    """F(mu, s) = integral of psi(x, s) dmu with the derivatives the Ito formula needs."""

    psi: Callable[[np.ndarray, float], np.ndarray]
    psi_t: Callable[[np.ndarray, float], np.ndarray]
    psi_x: Callable[[np.ndarray, float], np.ndarray]
    psi_xx: Callable[[np.ndarray, float], np.ndarray]

    __test__ = False


@dataclass
class ItoReport:
    lhs: List[float]
    rhs_integrated: List[float]
    integrated_discrepancy: float
    slope_lhs: float
    slope_rhs: float
    slope_relative_error: float

    def to_dict(self) -> Dict[str, object]:
        return dict(self.__dict__)


def ito_check(test_functional: TestFunctional, field_process, drift, diffusion, grid: TimeGrid) -> ItoReport:
    """
    Compare F(X(s) ⊗ m, s) - F(X(t) ⊗ m, t) with the integrated right-hand side
    int [psi_t + psi_x . b + 1/2 tr(eta eta^T psi_xx)] d(X(s) ⊗ m) ds, node by node,
    and the fitted slope of the left side with the mean right-hand side.
    """
    X = np.asarray(getattr(field_process, 'values', field_process), dtype=float)
    L = X.shape[0]
    n = X.shape[-1]
    drift = np.broadcast_to(np.asarray(drift, dtype=float), (L - 1,) + X.shape[1:])
    eta = np.asarray(diffusion, dtype=float)
    if eta.ndim == 0:
        eta = eta * np.eye(n)
    times = grid.nodes[:L]

    lhs = np.array([float(np.mean(test_functional.psi(X[j], times[j]))) for j in range(L)])
    rates = np.empty(L - 1)
    for j in range(L - 1):
        hessian = test_functional.psi_xx(X[j], times[j])
        trace = np.einsum('aj,...ab,bj->...', eta, hessian, eta)
        integrand = (test_functional.psi_t(X[j], times[j])
                     + np.sum(test_functional.psi_x(X[j], times[j]) * drift[j], axis=-1) + 0.5 * trace)
        rates[j] = float(np.mean(integrand))

    integrated = np.concatenate([[0.0], np.cumsum(rates * grid.dt)])
    increments = lhs - lhs[0]
    discrepancy = float(np.max(np.abs(increments - integrated)))

    slope_lhs = float(np.polyfit(times, lhs, 1)[0])
    slope_rhs = float(np.mean(rates))
    scale = max(abs(slope_rhs), 1e-300)
    relative = abs(slope_lhs - slope_rhs) / scale if slope_rhs != 0 else abs(slope_lhs)
    logger.info(f"🧪 Ito check: integrated discrepancy {discrepancy:.3e}, slopes {slope_lhs:.6g} vs {slope_rhs:.6g}")
    return ItoReport(increments.tolist(), integrated.tolist(), discrepancy, slope_lhs, slope_rhs, relative)
