"""
Linear functional derivatives in the measure argument.

Adding mass eps at a probe point x to the initial law perturbs the base
population only through the measure terms. The first-order response
(dY/dnu, dZ/dnu, du/dnu)(x) solves the frozen linear system of the Jacobian
flow with zero initial data, independent-copy coupling against itself, and a
source driven by the probe trajectory Y_x run in the frozen base flow.

Sources use the unnormalized convention (mass added, none removed); the
normalized derivative integrating to zero against m is obtained by
subtracting the same flow driven by the population itself.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import FieldProcess, identity_field
from .errors import AssumptionGateError, MissingDerivativeError, ShapeMismatchError
from .fbsde import ControlProblem, OptimalQuadruple, solve_optimal, value_function
from .jacobian import (
    FlowSettings, FrozenCoefficients, JacobianFlowSolution, apply_matrix, freeze_coefficients,
    matrix_jacobian, solve_linear_flow,
)
from .model import delta1_search

logger = logging.getLogger(__name__)


def _flat(values: np.ndarray) -> np.ndarray:
    return values.reshape(-1, values.shape[-1])


def _as_point(problem: ControlProblem, x) -> np.ndarray:
    point = np.atleast_1d(np.asarray(x, dtype=float))
    if point.shape != (problem.n,):
        raise ShapeMismatchError(f"probe point must have shape ({problem.n},), got {point.shape}")
    return point


def require_delta1(problem: ControlProblem) -> float:
    """The largest admissible delta1, or AssumptionGateError when none exists."""
    delta1 = delta1_search(problem.model, problem.grid)
    if delta1 is None:
        logger.error(f"❌ No delta1 in (0, 1) satisfies the measure-derivative condition for {problem.model.name}")
        raise AssumptionGateError("the delta1 condition fails: measure-derivative flows are not certified")
    return delta1


def _require_identity(quad: OptimalQuadruple):
    x0 = quad.problem.x0
    if x0.time_index != 0 or not x0.is_scenario_constant():
        raise ValueError("measure-derivative flows need a base solved from the identity field on its atoms")


def base_measures(quad: OptimalQuadruple):
    problem = quad.problem
    return tuple(problem.measure(k, quad.Y.values[k]) for k in range(problem.N + 1))


def solve_probe(quad: OptimalQuadruple, x) -> OptimalQuadruple:
    """Single-atom problem from x with the base flow of measures frozen and the same noise."""
    problem = quad.problem
    point = _as_point(problem, x)
    probe_problem = ControlProblem(
        problem.model, problem.eta, problem.grid, identity_field(point[None], problem.K),
        problem.noise, frozen_measures=base_measures(quad),
    )
    return solve_optimal(probe_problem, quad.method, quad.settings)


@dataclass
class LfdSolution:
    """dnu-flows at one probe point, on the base atoms; gradient mode holds n x n values."""

    x: np.ndarray
    dY_dnu: FieldProcess
    dZ_dnu: FieldProcess
    du_dnu: FieldProcess
    dr_dnu: FieldProcess
    probe: OptimalQuadruple
    gradient_mode: bool
    normalized: bool
    iterations: int
    source_scale: float = 1.0

    def bound_ratio(self) -> float:
        """sup over nodes of max(E|dY|^2, E|dZ|^2) divided by 1 + |x|^2."""
        worst = max(self.dY_dnu.sup_norm(), self.dZ_dnu.sup_norm()) ** 2
        return worst / (1.0 + float(np.sum(self.x ** 2)))

    def first_order_residual(self, quad: OptimalQuadruple) -> float:
        """sup-node norm of l_vx dY + l_vv du + E_k[dZ_{k+1}] for the plain dnu-flow."""
        model = quad.problem.model
        N = quad.problem.N
        Y, u = quad.Y.values[:N], quad.u.values
        dz_plus = np.stack([quad.operators[k].apply(self.dZ_dnu.values[k + 1]) for k in range(N)])
        residual = (apply_matrix(model.l_vx(Y, u), self.dY_dnu.values[:N])
                    + apply_matrix(model.l_vv(Y, u), self.du_dnu.values) + dz_plus)
        return FieldProcess(residual).sup_norm()

    def to_record(self) -> Dict[str, object]:
        return {
            'x': self.x.tolist(),
            'gradient_mode': self.gradient_mode,
            'normalized': self.normalized,
            'iterations': self.iterations,
            'dZ_dnu_t0_mean': np.mean(self.dZ_dnu.values[0], axis=(0, 1)).tolist(),
            'dY_dnu_sup': self.dY_dnu.sup_norm(),
            'dZ_dnu_sup': self.dZ_dnu.sup_norm(),
            'bound_ratio': self.bound_ratio(),
        }


def _measure_sources(coeffs: FrozenCoefficients, target: np.ndarray, partner: np.ndarray, scale: float):
    """Running and terminal sources E~[D_x d2F(mu)(target, partner~)] for every node."""
    N = coeffs.problem.N
    shape = target.shape[1:]
    running = np.stack([
        coeffs.running.probe_source(coeffs.measures[k], _flat(target[k]), _flat(partner[k])).reshape(shape)
        for k in range(N)
    ])
    terminal = coeffs.terminal.probe_source(coeffs.measures[N], _flat(target[N]), _flat(partner[N])).reshape(shape)
    return scale * running, scale * terminal


def solve_lfd_flow(quad: OptimalQuadruple, x, probe: Optional[OptimalQuadruple] = None,
                   coeffs: Optional[FrozenCoefficients] = None, normalized: bool = False,
                   source_scale: float = 1.0, settings: Optional[FlowSettings] = None) -> LfdSolution:
    """
    dnu-flow of the base solution at probe point x.

    The delta1 condition gates the solve. source_scale multiplies both
    second-derivative sources, so outputs scale linearly with it.
    """
    _require_identity(quad)
    problem = quad.problem
    require_delta1(problem)
    point = _as_point(problem, x)
    probe = probe or solve_probe(quad, point)
    coeffs = coeffs or freeze_coefficients(quad)

    running, terminal = _measure_sources(coeffs, coeffs.Y, probe.Y.values, source_scale)
    if normalized:
        own_running, own_terminal = _measure_sources(coeffs, coeffs.Y, coeffs.Y, source_scale)
        running, terminal = running - own_running, terminal - own_terminal

    zeros = np.zeros(problem.x0.shape)
    result = solve_linear_flow(coeffs, zeros, driver_source=running, terminal_source=terminal,
                               couple=True, settings=settings, label=f"dnu flow at x={point.tolist()}")
    logger.debug(f"🧪 dnu flow at x={point.tolist()}: sup |dZ/dnu| = {FieldProcess(result.DZ).sup_norm():.4e}")
    return LfdSolution(
        x=point, dY_dnu=FieldProcess(result.DY), dZ_dnu=FieldProcess(result.DZ),
        du_dnu=FieldProcess(result.Du), dr_dnu=FieldProcess(result.Dr), probe=probe,
        gradient_mode=False, normalized=normalized, iterations=result.iterations, source_scale=source_scale,
    )


def solve_lfd_probes(quad: OptimalQuadruple, points: Sequence, threads: int = 1,
                     normalized: bool = False) -> List[LfdSolution]:
    """Independent probe points solved in parallel on one frozen base."""
    coeffs = freeze_coefficients(quad)

    def run(point):
        return solve_lfd_flow(quad, point, coeffs=coeffs, normalized=normalized)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        return list(executor.map(run, points))


def _gradient_sources(quad: OptimalQuadruple, coeffs: FrozenCoefficients, lfd: LfdSolution,
                      jacobian: JacobianFlowSolution):
    """
    Sources of the xi-gradient system: the dnu-flow coefficients differentiated
    along the base atom, contracted with D_xY and D_xu.
    """
    problem = quad.problem
    model = problem.model
    N = problem.N
    Y, u = quad.Y.values, quad.u.values
    dY, du = lfd.dY_dnu.values, lfd.du_dnu.values
    JY, Ju = jacobian.DY.values, jacobian.Du.values
    probe_Y = lfd.probe.Y.values
    shape = problem.x0.shape + (problem.n,)

    driver = np.empty((N,) + shape)
    control = np.empty((N,) + shape)
    for k in range(N):
        mu = coeffs.measures[k]
        l_xxv = model.l_xxv(Y[k], u[k])
        l_xvv = model.l_xvv(Y[k], u[k])
        T_G = model.l_xxx(Y[k], u[k]) + model.running.d1_xxx(mu, Y[k])

        cross_x = model.running.cross_term_x(mu, _flat(Y[k]), _flat(Y[k]), _flat(dY[k])).reshape(shape)
        probe_x = model.running.probe_source_x(mu, _flat(Y[k]), _flat(probe_Y[k])).reshape(shape)

        driver[k] = (np.einsum('...abc,...b,...ce->...ae', T_G, dY[k], JY[k])
                     + np.einsum('...abc,...b,...ce->...ae', l_xxv, dY[k], Ju[k])
                     + np.einsum('...acb,...b,...ce->...ae', l_xxv, du[k], JY[k])
                     + np.einsum('...abc,...b,...ce->...ae', l_xvv, du[k], Ju[k])
                     + np.einsum('...ab,...be->...ae', cross_x + lfd.source_scale * probe_x, JY[k]))

        control[k] = (np.einsum('...bca,...b,...ce->...ae', l_xxv, dY[k], JY[k])
                      + np.einsum('...bac,...b,...ce->...ae', l_xvv, dY[k], Ju[k])
                      + np.einsum('...cab,...b,...ce->...ae', l_xvv, du[k], JY[k])
                      + np.einsum('...abc,...b,...ce->...ae', model.l_vvv(Y[k], u[k]), du[k], Ju[k]))

    mu_T = coeffs.measures[N]
    T_H = model.h_xxx(Y[N]) + model.terminal.d1_xxx(mu_T, Y[N])
    cross_T = model.terminal.cross_term_x(mu_T, _flat(Y[N]), _flat(Y[N]), _flat(dY[N])).reshape(shape)
    probe_T = model.terminal.probe_source_x(mu_T, _flat(Y[N]), _flat(probe_Y[N])).reshape(shape)
    terminal = (np.einsum('...abc,...b,...ce->...ae', T_H, dY[N], JY[N])
                + np.einsum('...ab,...be->...ae', cross_T + lfd.source_scale * probe_T, JY[N]))
    return driver, control, terminal


def solve_grad_lfd_flow(quad: OptimalQuadruple, x, lfd: Optional[LfdSolution] = None,
                        jacobian: Optional[JacobianFlowSolution] = None,
                        coeffs: Optional[FrozenCoefficients] = None,
                        settings: Optional[FlowSettings] = None) -> LfdSolution:
    """
    xi-gradients D_xi(dY/dnu), D_xi(dZ/dnu) on the base atoms (n x n values).

    Needs the third-derivative callbacks; the unnormalized dnu-flow at x is
    solved first when not supplied.
    """
    _require_identity(quad)
    problem = quad.problem
    model = problem.model
    if not model.has_third_derivatives():
        raise MissingDerivativeError(f"model '{model.name}' lacks third derivatives for the xi-gradient flow")

    coeffs = coeffs or freeze_coefficients(quad)
    lfd = lfd or solve_lfd_flow(quad, x, coeffs=coeffs, settings=settings)
    if lfd.normalized:
        raise ValueError("the xi-gradient flow differentiates the unnormalized dnu-flow")
    jacobian = jacobian or matrix_jacobian(quad, coeffs)

    driver, control, terminal = _gradient_sources(quad, coeffs, lfd, jacobian)
    zeros = np.zeros(problem.x0.shape + (problem.n,))
    result = solve_linear_flow(coeffs, zeros, driver_source=driver, terminal_source=terminal,
                               control_source=control, couple=False, settings=settings,
                               label=f"xi-gradient flow at x={lfd.x.tolist()}")
    return LfdSolution(
        x=lfd.x, dY_dnu=FieldProcess(result.DY), dZ_dnu=FieldProcess(result.DZ),
        du_dnu=FieldProcess(result.Du), dr_dnu=FieldProcess(result.Dr), probe=lfd.probe,
        gradient_mode=True, normalized=False, iterations=result.iterations, source_scale=lfd.source_scale,
    )


def passive_lfd_flow(quad: OptimalQuadruple, lfd: LfdSolution, xi) -> LfdSolution:
    """
    dnu-flow at probe x evaluated for a massless atom placed at xi.

    The atom follows its own optimal path in the frozen base flow and feels the
    population response lfd through the independent-copy terms without
    contributing to it.
    """
    problem = quad.problem
    passive = solve_probe(quad, xi)
    coeffs = freeze_coefficients(passive)
    probe_Y = lfd.probe.Y.values
    base_Y, base_dY = quad.Y.values, lfd.dY_dnu.values
    N = problem.N
    shape = passive.problem.x0.shape

    running = np.empty((N,) + shape)
    for k in range(N):
        mu = coeffs.measures[k]
        points = _flat(passive.Y.values[k])
        running[k] = (coeffs.running.cross_term(mu, points, _flat(base_Y[k]), base_dY[k].reshape(-1, problem.n))
                      + lfd.source_scale * coeffs.running.probe_source(mu, points, _flat(probe_Y[k]))).reshape(shape)
    points = _flat(passive.Y.values[N])
    mu_T = coeffs.measures[N]
    terminal = (coeffs.terminal.cross_term(mu_T, points, _flat(base_Y[N]), base_dY[N].reshape(-1, problem.n))
                + lfd.source_scale * coeffs.terminal.probe_source(mu_T, points, _flat(probe_Y[N]))).reshape(shape)

    result = solve_linear_flow(coeffs, np.zeros(shape), driver_source=running, terminal_source=terminal,
                               couple=False, label=f"passive dnu flow at xi={np.ravel(xi).tolist()}")
    return LfdSolution(
        x=lfd.x, dY_dnu=FieldProcess(result.DY), dZ_dnu=FieldProcess(result.DZ),
        du_dnu=FieldProcess(result.Du), dr_dnu=FieldProcess(result.Dr), probe=lfd.probe,
        gradient_mode=False, normalized=False, iterations=result.iterations, source_scale=lfd.source_scale,
    )


def xi_difference_check(quad: OptimalQuadruple, lfd: LfdSolution, gradient: LfdSolution,
                        atom: int = 0, steps: Sequence[float] = (1e-2, 5e-3)) -> Dict[str, List[float]]:
    """
    Forward differences of the passive dnu costate at t0 around a base atom,
    against the xi-gradient flow applied to each coordinate direction.
    """
    problem = quad.problem
    xi = quad.problem.x0.values[atom, 0]
    centre = passive_lfd_flow(quad, lfd, xi).dZ_dnu.values[0, 0]
    target = gradient.dZ_dnu.values[0, atom]

    errors = []
    for h in steps:
        columns = []
        for e in range(problem.n):
            shifted = xi.copy()
            shifted[e] += h
            columns.append((passive_lfd_flow(quad, lfd, shifted).dZ_dnu.values[0, 0] - centre) / h)
        difference = np.stack(columns, axis=-1)
        errors.append(float(np.sqrt(np.mean(np.sum((difference - target) ** 2, axis=(-2, -1))))))

    ratios = [errors[i + 1] / errors[i] if errors[i] > 0 else 0.0 for i in range(len(errors) - 1)]
    logger.info(f"🧪 xi finite differences at atom {atom}: errors {errors}, ratios {ratios}")
    return {'steps': list(steps), 'errors': errors, 'ratios': ratios}


@dataclass
class LfdValue:
    """dV/dnu(m, t0)(x): raw, normalized to integrate to zero against m, and its x-gradient."""

    x: np.ndarray
    raw: float
    normalized: float
    grad: np.ndarray

    def to_record(self) -> Dict[str, object]:
        return {'x': self.x.tolist(), 'raw': self.raw, 'normalized': self.normalized, 'grad': self.grad.tolist()}


def _pathwise_cost(problem: ControlProblem, Y: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-atom expected cost with the first measure derivatives added: shape (M,)."""
    model = problem.model
    N, dt = problem.N, problem.dt
    total = np.zeros(Y.shape[1:3])
    for k in range(N):
        mu = problem.measure(k, Y[k])
        total += dt * (model.l(Y[k], u[k]) + model.running.d1(mu, Y[k]))
    mu_T = problem.measure(N, Y[N])
    total += model.h(Y[N]) + model.terminal.d1(mu_T, Y[N])
    return total.mean(axis=1)


def value_lfd(quad: OptimalQuadruple, x, probe: Optional[OptimalQuadruple] = None) -> LfdValue:
    """
    dV/dnu(m, t0)(x) as the expected probe-path cost with the dF/dnu terms,
    and D_x dV/dnu(x) = Z_x(t0).
    """
    _require_identity(quad)
    problem = quad.problem
    point = _as_point(problem, x)
    probe = probe or solve_probe(quad, point)

    raw = float(_pathwise_cost(probe.problem, probe.Y.values, probe.u.values)[0])
    population = float(np.mean(_pathwise_cost(problem, quad.Y.values, quad.u.values)))
    grad = np.mean(probe.Z.values[0, 0], axis=0)
    return LfdValue(point, raw, raw - population, grad)


def measure_perturbation_check(quad: OptimalQuadruple, x, replicas: Sequence[int] = (1, 2),
                               method: Optional[str] = None) -> Dict[str, object]:
    """
    Mixtures (1 - eps) m + eps delta_x realised by appending k copies of x to
    the atoms (eps = k / (M + k)); difference quotients of V are extrapolated
    linearly to eps = 0 and compared with the normalized value_lfd.
    """
    _require_identity(quad)
    problem = quad.problem
    point = _as_point(problem, x)
    method = method or quad.method
    atoms = problem.x0.values[:, 0]

    eps_list, quotients = [], []
    for k in replicas:
        mixed_atoms = np.concatenate([atoms, np.repeat(point[None], k, axis=0)])
        mixed = problem.with_initial(identity_field(mixed_atoms, problem.K))
        eps = k / (problem.M + k)
        eps_list.append(eps)
        quotients.append((value_function(mixed, method, quad.settings) - quad.value) / eps)

    if len(quotients) > 1:
        e1, e2 = eps_list[0], eps_list[1]
        q1, q2 = quotients[0], quotients[1]
        extrapolated = q1 - e1 * (q2 - q1) / (e2 - e1)
    else:
        extrapolated = quotients[0]
    target = value_lfd(quad, point).normalized
    discrepancy = abs(extrapolated - target)
    logger.info(f"🧪 Measure perturbation at x={point.tolist()}: extrapolated {extrapolated:.6g}, "
                f"dV/dnu {target:.6g}")
    return {'eps': eps_list, 'quotients': quotients, 'extrapolated': extrapolated,
            'target': target, 'discrepancy': discrepancy}


def fitted_bound_constant(solutions: Sequence[LfdSolution]) -> float:
    """C with E|flow|^2 <= C (1 + |x|^2) over the given probe points."""
    return max(solution.bound_ratio() for solution in solutions)
