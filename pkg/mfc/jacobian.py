"""
Linearized optimality system along a solved path.

All flows here share one frozen-coefficient linear FBSDE:

    DY_{k+1} = DY_k + Du_k dt
    Du_k     = A_k DY_k + B_k (DZ+_k + s_u_k)
    DZ_N     = H_T DY_N + cross_N(DY_N) + src_N
    DZ+_k    = E_k[DZ_{k+1}]
    DZ_k     = DZ+_k + dt (G_k DY_k + C_k Du_k + cross_k(DY_k) + src_k)

with A = du/dy, B = du/dz of the feedback map, G = l_xx + D2_x dF/dnu,
C = l_xv and H_T = h_xx + D2_x dF_T/dnu, regression operators frozen along
the base path. Unknowns carry any trailing shape after the state index.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import get_default

from .core import EmpiricalMeasure, FieldProcess, RandomField, hm_inner, hm_norm
from .errors import DivergenceError, MfcError, ShapeMismatchError
from .fbsde import ControlProblem, OptimalQuadruple, SolverSettings, solve_optimal
from .hamiltonian import feedback_jacobians
from .model import MeasureFunctional
from .regression import RegressionOperator
from .retrying import with_damping_backoff

logger = logging.getLogger(__name__)


@dataclass
class FlowSettings:
    damping: float
    max_iters: int
    tol: float

    @classmethod
    def from_defaults(cls, **overrides) -> "FlowSettings":
        values = {
            'damping': get_default('flow.damping'),
            'max_iters': get_default('flow.max_iters'),
            'tol': get_default('flow.tol'),
        }
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)


@dataclass
class FrozenCoefficients:
    """Coefficients of the linearized system frozen along one solved path."""

    problem: ControlProblem
    Y: np.ndarray
    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    C: np.ndarray
    H_T: np.ndarray
    measures: Tuple[EmpiricalMeasure, ...]
    operators: Tuple[RegressionOperator, ...]

    @property
    def running(self) -> MeasureFunctional:
        return self.problem.model.running

    @property
    def terminal(self) -> MeasureFunctional:
        return self.problem.model.terminal

    @property
    def interacting(self) -> bool:
        return self.running.interacting or self.terminal.interacting


def freeze_coefficients(quad: OptimalQuadruple) -> FrozenCoefficients:
    problem = quad.problem
    model = problem.model
    N = problem.N
    Y = quad.Y.values
    u = quad.u.values

    A, B = feedback_jacobians(Y[:N], quad.Z_plus.values, model, u=u)
    measures = tuple(problem.measure(k, Y[k]) for k in range(N + 1))
    G = np.stack([model.l_xx(Y[k], u[k]) + model.running.d1_xx(measures[k], Y[k]) for k in range(N)])
    C = model.l_xv(Y[:N], u)
    H_T = model.h_xx(Y[N]) + model.terminal.d1_xx(measures[N], Y[N])
    return FrozenCoefficients(problem, Y, A, B, G, C, H_T, measures, quad.operators)


def apply_matrix(matrix: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """matrix (..., n, n) times vectors (..., n, *extra)."""
    extra = vectors.shape[matrix.ndim - 1:]
    flat = vectors.reshape(vectors.shape[:matrix.ndim - 1] + (-1,))
    out = np.einsum('...ab,...be->...ae', matrix, flat)
    return out.reshape(out.shape[:-1] + extra)


def _cross(functional: MeasureFunctional, measure, base: np.ndarray, pool: np.ndarray,
           directions: np.ndarray) -> np.ndarray:
    """Independent-copy coupling over the pooled ensemble, shaped like base."""
    n = base.shape[2]
    points = base.reshape(-1, n)
    flat_pool = pool.reshape(-1, n)
    flat_dirs = directions.reshape((-1,) + directions.shape[2:])
    out = functional.cross_term(measure, points, flat_pool, flat_dirs)
    return out.reshape(base.shape[:2] + out.shape[1:])


@dataclass
class LinearFlowResult:
    DY: np.ndarray
    DZ: np.ndarray
    DZ_plus: np.ndarray
    Du: np.ndarray
    Dr: np.ndarray
    iterations: int
    history: List[float]


def solve_linear_flow(coeffs: FrozenCoefficients, initial: np.ndarray, *,
                      driver_source: Optional[np.ndarray] = None,
                      terminal_source: Optional[np.ndarray] = None,
                      control_source: Optional[np.ndarray] = None,
                      couple: bool = True,
                      initial_guess: Optional[np.ndarray] = None,
                      settings: Optional[FlowSettings] = None,
                      label: str = 'linear flow') -> LinearFlowResult:
    """
    Damped Picard iteration on DZ+ for the frozen linear system.

    couple switches on the independent-copy terms, pooled over the path itself.
    """
    settings = settings or FlowSettings.from_defaults()
    problem = coeffs.problem
    N, dt = problem.N, problem.dt
    shape = initial.shape
    if shape[:3] != coeffs.Y.shape[1:]:
        raise ShapeMismatchError(f"flow initial data {shape} does not match the path {coeffs.Y.shape[1:]}")

    zeros_nodes = np.zeros((N,) + shape)
    driver_source = zeros_nodes if driver_source is None else driver_source
    control_source = zeros_nodes if control_source is None else control_source
    terminal_source = np.zeros(shape) if terminal_source is None else terminal_source
    couple = couple and coeffs.interacting

    def forward(DZ_plus):
        DY = np.empty((N + 1,) + shape)
        Du = np.empty((N,) + shape)
        DY[0] = initial
        for k in range(N):
            Du[k] = apply_matrix(coeffs.A[k], DY[k]) + apply_matrix(coeffs.B[k], DZ_plus[k] + control_source[k])
            DY[k + 1] = DY[k] + dt * Du[k]
        return DY, Du

    def backward(DY, Du):
        DZ = np.empty((N + 1,) + shape)
        DZ_plus = np.empty((N,) + shape)
        DZ[N] = apply_matrix(coeffs.H_T, DY[N]) + terminal_source
        if couple:
            DZ[N] += _cross(coeffs.terminal, coeffs.measures[N], coeffs.Y[N], coeffs.Y[N], DY[N])
        for k in range(N - 1, -1, -1):
            DZ_plus[k] = coeffs.operators[k].apply(DZ[k + 1])
            driver = apply_matrix(coeffs.G[k], DY[k]) + apply_matrix(coeffs.C[k], Du[k]) + driver_source[k]
            if couple:
                driver = driver + _cross(coeffs.running, coeffs.measures[k], coeffs.Y[k], coeffs.Y[k], DY[k])
            DZ[k] = DZ_plus[k] + dt * driver
        return DZ, DZ_plus

    def run(theta: float) -> LinearFlowResult:
        DZ_plus = np.zeros((N,) + shape) if initial_guess is None else np.array(initial_guess, dtype=float)
        history: List[float] = []
        for iteration in range(1, settings.max_iters + 1):
            DY, Du = forward(DZ_plus)
            _, DZ_plus_new = backward(DY, Du)
            change = FieldProcess(DZ_plus_new - DZ_plus).sup_norm()
            scale = 1.0 + FieldProcess(DZ_plus_new).sup_norm()
            history.append(change)
            if not np.isfinite(change) or change > get_default('solver.divergence_factor') * max(history[0], 1.0):
                raise DivergenceError(f"{label} diverged at iteration {iteration}", history=history)
            DZ_plus = (1.0 - theta) * DZ_plus + theta * DZ_plus_new
            if change <= settings.tol * scale:
                break
        else:
            logger.warning(f"⚠️ {label} reached {settings.max_iters} iterations (last change {history[-1]:.3e})")

        DY, Du = forward(DZ_plus)
        DZ, DZ_plus = backward(DY, Du)
        Dr = np.empty((N,) + shape + (problem.n,))
        for k in range(N):
            increments = problem.noise.increments[k]
            product = DZ[k + 1][..., None] * increments.reshape((1, problem.K) + (1,) * (len(shape) - 2) + (problem.n,))
            Dr[k] = coeffs.operators[k].apply(product) / dt
        logger.debug(f"🔄 {label} settled after {len(history)} iterations")
        return LinearFlowResult(DY, DZ, DZ_plus, Du, Dr, len(history), history)

    return with_damping_backoff(run, settings.damping, label=label)


@dataclass
class JacobianFlowSolution:
    DY: FieldProcess
    DZ: FieldProcess
    DZ_plus: FieldProcess
    Du: FieldProcess
    Dr: FieldProcess
    direction: Optional[RandomField]
    matrix_mode: bool
    iterations: int
    history: List[float]

    def summary(self) -> Dict[str, object]:
        return {
            'matrix_mode': self.matrix_mode,
            'iterations': self.iterations,
            'DY_sup': self.DY.sup_norm(),
            'DZ_sup': self.DZ.sup_norm(),
            'Du_sup': self.Du.sup_norm(),
        }


def _wrap(result: LinearFlowResult, direction, matrix_mode) -> JacobianFlowSolution:
    return JacobianFlowSolution(
        DY=FieldProcess(result.DY), DZ=FieldProcess(result.DZ), DZ_plus=FieldProcess(result.DZ_plus),
        Du=FieldProcess(result.Du), Dr=FieldProcess(result.Dr), direction=direction,
        matrix_mode=matrix_mode, iterations=result.iterations, history=result.history,
    )


def _check_direction(quad: OptimalQuadruple, psi: RandomField):
    if psi.shape != quad.problem.x0.shape:
        raise ShapeMismatchError(f"direction shape {psi.shape} does not match {quad.problem.x0.shape}")
    if psi.adapted_to != 0 or not psi.is_scenario_constant():
        raise ValueError("Jacobian directions must be independent of the noise (constant across scenarios)")


def solve_jacobian_flow(quad: OptimalQuadruple, psi: RandomField,
                        coeffs: Optional[FrozenCoefficients] = None,
                        settings: Optional[FlowSettings] = None,
                        initial_guess: Optional[np.ndarray] = None) -> JacobianFlowSolution:
    """Directional flow (DY, DZ, Du) with DY_0 = psi."""
    _check_direction(quad, psi)
    coeffs = coeffs or freeze_coefficients(quad)
    result = solve_linear_flow(coeffs, psi.values, couple=True, settings=settings,
                               initial_guess=initial_guess, label='Jacobian flow')
    return _wrap(result, psi, matrix_mode=False)


def second_derivative_V(quad: OptimalQuadruple, psi: RandomField,
                        coeffs: Optional[FrozenCoefficients] = None) -> RandomField:
    """D2_X V(X ⊗ m, t0)(psi) = DZ^psi(t0)."""
    return solve_jacobian_flow(quad, psi, coeffs).DZ.at(0)


def matrix_jacobian(quad: OptimalQuadruple, coeffs: Optional[FrozenCoefficients] = None,
                    settings: Optional[FlowSettings] = None) -> JacobianFlowSolution:
    """
    n x n flows (D_xY, D_xZ) with D_xY(t0) = Identity. The independent-copy
    terms are absent: they act on the mean-zero part of a direction only
    through its ensemble average, which the spatial gradient does not see.
    """
    problem = quad.problem
    n = problem.n
    entries = (problem.N + 1) * problem.M * problem.K * n * n * 6
    if entries > get_default('flow.max_matrix_entries'):
        raise MfcError(f"matrix Jacobian needs about {entries:.3g} floats, above the configured cap")
    if not problem.x0.is_scenario_constant():
        raise ValueError("matrix_jacobian needs an initial field that does not depend on the noise")

    coeffs = coeffs or freeze_coefficients(quad)
    identity = np.broadcast_to(np.eye(n), problem.x0.shape + (n,)).copy()
    result = solve_linear_flow(coeffs, identity, couple=False, settings=settings, label='matrix Jacobian')
    return _wrap(result, None, matrix_mode=True)


def factorization_check(directional: JacobianFlowSolution, matrix: JacobianFlowSolution) -> float:
    """sup-node H_m distance between DZ^psi and D_xZ psi."""
    psi = directional.direction.values
    product = np.einsum('lmkab,mkb->lmka', matrix.DZ.values, psi)
    return FieldProcess(directional.DZ.values - product).sup_norm()


def symmetry_check(quad: OptimalQuadruple, psi: RandomField, phi: RandomField,
                   coeffs: Optional[FrozenCoefficients] = None) -> float:
    """|<D2V(psi), phi> - <D2V(phi), psi>|."""
    coeffs = coeffs or freeze_coefficients(quad)
    d_psi = second_derivative_V(quad, psi, coeffs)
    d_phi = second_derivative_V(quad, phi, coeffs)
    return abs(hm_inner(d_psi, phi) - hm_inner(d_phi, psi))


def convexity_floor(quad: OptimalQuadruple, psi: RandomField,
                    coeffs: Optional[FrozenCoefficients] = None) -> float:
    """<D2V(psi), psi> / |psi|^2, a diagnostic only."""
    norm = hm_norm(psi)
    if norm == 0:
        return 0.0
    return hm_inner(second_derivative_V(quad, psi, coeffs), psi) / norm ** 2


def jacobian_bounds(solution: JacobianFlowSolution) -> Dict[str, float]:
    """Fitted constants of sup |DY|, |DZ|, |Du| <= C |psi|."""
    norm = hm_norm(solution.direction) if solution.direction is not None else 1.0
    norm = norm or 1.0
    return {
        'C_DY': solution.DY.sup_norm() / norm,
        'C_DZ': solution.DZ.sup_norm() / norm,
        'C_Du': solution.Du.sup_norm() / norm,
    }


def first_order_flow_residual(quad: OptimalQuadruple, solution: JacobianFlowSolution) -> float:
    """sup-node H_m norm of l_vx DY + l_vv Du + DZ+."""
    model = quad.problem.model
    N = quad.problem.N
    Y, u = quad.Y.values[:N], quad.u.values
    residual = (apply_matrix(model.l_vx(Y, u), solution.DY.values[:N])
                + apply_matrix(model.l_vv(Y, u), solution.Du.values) + solution.DZ_plus.values)
    return FieldProcess(residual).sup_norm()


def uniqueness_check(quad: OptimalQuadruple, psi: RandomField, seed: int = 0) -> float:
    """Two Picard runs from different initial guesses; sup-node distance of DZ."""
    coeffs = freeze_coefficients(quad)
    tight = FlowSettings.from_defaults(tol=1e-12, max_iters=400)
    first = solve_jacobian_flow(quad, psi, coeffs, tight)
    guess = np.random.default_rng(seed).standard_normal(first.DZ_plus.values.shape)
    second = solve_jacobian_flow(quad, psi, coeffs, tight, initial_guess=guess)
    return FieldProcess(first.DZ.values - second.DZ.values).sup_norm()


@dataclass
class FdJacobianReport:
    eps: List[float]
    discrepancy_Y: List[float]
    discrepancy_Z: List[float]
    discrepancy: List[float]
    ratios: List[float]

    def to_dict(self) -> Dict[str, List[float]]:
        return dict(self.__dict__)


def fd_check_jacobian(problem: ControlProblem, psi: RandomField, eps_list=(1e-2, 5e-3),
                      method: str = 'picard_feedback',
                      settings: Optional[SolverSettings] = None) -> FdJacobianReport:
    """
    Difference processes (Y^eps - Y)/eps and (Z^eps - Z)/eps from full re-solves
    at x0 + eps psi, compared with the Jacobian flow in sup-node H_m distance.
    """
    settings = (settings or SolverSettings.from_defaults()).tightened(get_default('fd.inner_tol'))
    base = solve_optimal(problem, method, settings)
    flow = solve_jacobian_flow(base, psi, settings=FlowSettings.from_defaults(tol=1e-12, max_iters=400))

    gaps_y, gaps_z, gaps = [], [], []
    for eps in eps_list:
        if not np.any(psi.values):
            gaps_y.append(0.0)
            gaps_z.append(0.0)
            gaps.append(0.0)
            continue
        shifted = solve_optimal(problem.with_initial(problem.x0.plus(psi, eps)), method, settings)
        delta_y = (shifted.Y.values - base.Y.values) / eps
        delta_z = (shifted.Z.values - base.Z.values) / eps
        gap_y = FieldProcess(delta_y - flow.DY.values).sup_norm()
        gap_z = FieldProcess(delta_z - flow.DZ.values).sup_norm()
        gaps_y.append(gap_y)
        gaps_z.append(gap_z)
        gaps.append(gap_y + gap_z)

    ratios = [gaps[i + 1] / gaps[i] if gaps[i] > 0 else 0.0 for i in range(len(gaps) - 1)]
    logger.info(f"🧪 Jacobian finite-difference discrepancies {gaps} (ratios {ratios})")
    return FdJacobianReport(list(eps_list), gaps_y, gaps_z, gaps, ratios)
