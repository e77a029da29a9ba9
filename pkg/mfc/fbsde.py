"""
Forward state simulation, the adjoint BSDE by regression Monte Carlo, the
objective with its exact Gateaux gradient, and the two coupled solvers for
the optimality system.

Discrete scheme on s_0 < ... < s_N with controls on nodes 0..N-1:

    Y_{k+1} = Y_k + u_k dt + eta dw_k
    Z_N     = h_x(Y_N) + D_x dF_T/dnu(mu_N)(Y_N)
    Z+_k    = E_k[Z_{k+1}]
    Z_k     = Z+_k + dt (l_x(Y_k, u_k) + D_x dF/dnu(mu_k)(Y_k))

The gradient of the left-endpoint objective in u_k is l_v(Y_k, u_k) + Z+_k.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import get_default

from .core import (
    EmpiricalMeasure, FieldProcess, NoiseBundle, RandomField, TimeGrid,
    brownian_paths, hm_inner, hm_norm, identity_field, l2_inner, pushforward,
)
from .errors import AdaptednessError, ConvergenceError, DivergenceError, ShapeMismatchError
from .hamiltonian import feedback_u
from .model import CostModel, compute_c0
from .regression import RegressionOperator, build_operator
from .retrying import with_damping_backoff

logger = logging.getLogger(__name__)

METHODS = ('gradient_descent', 'picard_feedback')


@dataclass(frozen=True)
class SolverSettings:
    tol: float
    max_iters: int
    damping: float
    degree: int
    ridge: float
    log_every: int
    divergence_factor: float
    step: Optional[float] = None

    @classmethod
    def from_defaults(cls, **overrides) -> "SolverSettings":
        values = {
            'tol': get_default('solver.tol'),
            'max_iters': get_default('solver.max_iters'),
            'damping': get_default('solver.picard_damping'),
            'degree': get_default('regression.degree'),
            'ridge': get_default('regression.ridge'),
            'log_every': get_default('solver.log_every'),
            'divergence_factor': get_default('solver.divergence_factor'),
        }
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)

    def tightened(self, tol: float) -> "SolverSettings":
        return replace(self, tol=min(self.tol, tol))


@dataclass(frozen=True)
class ControlProblem:
    """
    Model, constant diffusion eta, grid, initial field and the shared noise.

    frozen_measures, when given, replaces the pooled empirical measure at every
    node; probe problems use it to evaluate a single path against a base flow.
    """

    model: CostModel
    eta: np.ndarray
    grid: TimeGrid
    x0: RandomField
    noise: NoiseBundle
    frozen_measures: Optional[Tuple[EmpiricalMeasure, ...]] = None

    def __post_init__(self):
        n = self.model.n
        eta = np.asarray(self.eta, dtype=float)
        if eta.ndim == 0:
            eta = eta * np.eye(n)
        if eta.shape != (n, n) or not np.all(np.isfinite(eta)):
            raise ShapeMismatchError(f"eta must be a finite {n}x{n} matrix, got shape {eta.shape}")
        object.__setattr__(self, 'eta', eta)

        if self.x0.values.ndim != 3 or self.x0.n != n:
            raise ShapeMismatchError(f"x0 must be an (M, K, {n}) field, got {self.x0.shape}")
        if self.x0.adapted_to != 0:
            raise AdaptednessError("the initial field must not depend on the noise")
        if (self.noise.N, self.noise.K, self.noise.n) != (self.grid.N, self.x0.K, n):
            raise ShapeMismatchError(
                f"noise (N={self.noise.N}, K={self.noise.K}, n={self.noise.n}) does not match "
                f"grid N={self.grid.N} and x0 {self.x0.shape}"
            )
        if self.frozen_measures is not None and len(self.frozen_measures) != self.grid.N + 1:
            raise ShapeMismatchError("frozen_measures needs one measure per grid node")

    @property
    def M(self) -> int:
        return self.x0.M

    @property
    def K(self) -> int:
        return self.x0.K

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def control_shape(self) -> Tuple[int, ...]:
        return (self.N,) + self.x0.shape

    def measure(self, k: int, Y_k: np.ndarray) -> EmpiricalMeasure:
        if self.frozen_measures is not None:
            return self.frozen_measures[k]
        return pushforward(Y_k)

    def noise_term(self, k: int) -> np.ndarray:
        """eta dw_k for every scenario: (K, n)."""
        return self.noise.increments[k] @ self.eta.T

    def with_initial(self, x0: RandomField) -> "ControlProblem":
        return replace(self, x0=x0)

    def tail(self, k: int, x0: Optional[RandomField] = None) -> "ControlProblem":
        """The problem restarted at node k with the noise tail."""
        frozen = self.frozen_measures[k:] if self.frozen_measures is not None else None
        return ControlProblem(self.model, self.eta, self.grid.tail(k), x0 if x0 is not None else self.x0,
                              self.noise.tail(k), frozen)


def make_problem(model: CostModel, eta, grid: TimeGrid, atoms: np.ndarray, K: int,
                 seed: int = 0, antithetic: bool = False) -> ControlProblem:
    """Problem started from the identity field on the given atoms."""
    atoms = np.asarray(atoms, dtype=float).reshape(-1, model.n)
    noise = brownian_paths(grid, seed, K, model.n, antithetic=antithetic)
    return ControlProblem(model, np.asarray(eta, dtype=float), grid, identity_field(atoms, K), noise)


@dataclass
class AdjointSolution:
    Z: FieldProcess
    Z_plus: FieldProcess
    r: FieldProcess
    operators: Tuple[RegressionOperator, ...]
    diagnostics: Dict[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class OptimalQuadruple:
    problem: ControlProblem
    Y: FieldProcess
    Z: FieldProcess
    Z_plus: FieldProcess
    u: FieldProcess
    r: FieldProcess
    value: float
    converged: bool
    iterations: int
    method: str
    history: Tuple[float, ...]
    operators: Tuple[RegressionOperator, ...]
    settings: SolverSettings

    def first_order_residual(self) -> float:
        model = self.problem.model
        N = self.problem.N
        grad = model.l_v(self.Y.values[:N], self.u.values) + self.Z_plus.values
        return FieldProcess(grad).sup_norm()

    def node_norms(self) -> Dict[str, List[float]]:
        return {
            'Y': self.Y.node_norms().tolist(),
            'Z': self.Z.node_norms().tolist(),
            'u': self.u.node_norms().tolist(),
        }

    def summary(self) -> Dict[str, object]:
        return {
            'method': self.method,
            'converged': self.converged,
            'iterations': self.iterations,
            'value': self.value,
            'first_order_residual': self.history[-1] if self.history else None,
            'convergence_log': list(self.history),
            'norms': self.node_norms(),
        }


def _control_values(problem: ControlProblem, control) -> np.ndarray:
    values = np.asarray(getattr(control, 'values', control), dtype=float)
    try:
        return np.broadcast_to(values, problem.control_shape)
    except ValueError as exc:
        raise ShapeMismatchError(
            f"control shape {values.shape} does not match {problem.control_shape}"
        ) from exc


def simulate_forward(problem: ControlProblem, control) -> FieldProcess:
    """Euler recursion Y_{k+1} = Y_k + u_k dt + eta dw_k from Y_0 = x0."""
    u = _control_values(problem, control)
    dt = problem.dt
    Y = np.empty((problem.N + 1,) + problem.x0.shape)
    Y[0] = problem.x0.values
    for k in range(problem.N):
        Y[k + 1] = Y[k] + u[k] * dt + problem.noise_term(k)[None]
    return FieldProcess(Y)


def simulate_feedback(problem: ControlProblem,
                      policy: Callable[[int, np.ndarray], np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Forward simulation with u_k = policy(k, Y_k)."""
    dt = problem.dt
    Y = np.empty((problem.N + 1,) + problem.x0.shape)
    u = np.empty(problem.control_shape)
    Y[0] = problem.x0.values
    for k in range(problem.N):
        u[k] = policy(k, Y[k])
        Y[k + 1] = Y[k] + u[k] * dt + problem.noise_term(k)[None]
    return Y, u


def terminal_costate(problem: ControlProblem, Y_N: np.ndarray) -> np.ndarray:
    model = problem.model
    return model.h_x(Y_N) + model.terminal.d1_x(problem.measure(problem.N, Y_N), Y_N)


def running_driver(problem: ControlProblem, k: int, Y_k: np.ndarray, u_k: np.ndarray) -> np.ndarray:
    model = problem.model
    return model.l_x(Y_k, u_k) + model.running.d1_x(problem.measure(k, Y_k), Y_k)


def solve_adjoint_bsde(problem: ControlProblem, Y, control,
                      settings: Optional[SolverSettings] = None) -> AdjointSolution:
    """Backward regression recursion for (Z, Z+, r) along a given path."""
    settings = settings or SolverSettings.from_defaults()
    Y = np.asarray(getattr(Y, 'values', Y), dtype=float)
    u = _control_values(problem, control)
    N, dt = problem.N, problem.dt
    if Y.shape != (N + 1,) + problem.x0.shape:
        raise ShapeMismatchError(f"state shape {Y.shape} does not match {(N + 1,) + problem.x0.shape}")

    Z = np.empty_like(Y)
    Z_plus = np.empty(problem.control_shape)
    r = np.empty(problem.control_shape + (problem.n,))
    operators: List[RegressionOperator] = [None] * N
    residuals = np.zeros(N)

    Z[N] = terminal_costate(problem, Y[N])
    for k in range(N - 1, -1, -1):
        operator = build_operator(Y[k], settings.degree, settings.ridge)
        operators[k] = operator
        Z_plus[k] = operator.apply(Z[k + 1])
        residuals[k] = float(np.sqrt(np.sum((Z[k + 1] - Z_plus[k]) ** 2) / (problem.M * problem.K)))
        increments = problem.noise.increments[k]
        r[k] = operator.apply(Z[k + 1][..., :, None] * increments[None, :, None, :]) / dt
        Z[k] = Z_plus[k] + dt * running_driver(problem, k, Y[k], u[k])

    diagnostics = {
        'regression_residual_norms': residuals.tolist(),
        'basis_size': max(op.diagnostics.get('basis_size', 1) for op in operators),
    }
    return AdjointSolution(FieldProcess(Z), FieldProcess(Z_plus), FieldProcess(r), tuple(operators), diagnostics)


def terminal_cost(problem: ControlProblem, Y_N: np.ndarray) -> float:
    """Mean terminal cost plus F_T of the terminal law."""
    model = problem.model
    return float(np.mean(model.h(Y_N))) + model.F_T(problem.measure(problem.N, Y_N))


def objective_from_path(problem: ControlProblem, Y: np.ndarray, u: np.ndarray) -> float:
    """Left-endpoint quadrature of the running cost plus terminal cost."""
    model = problem.model
    N, dt = problem.N, problem.dt
    running = 0.0
    for k in range(N):
        running += dt * (float(np.mean(model.l(Y[k], u[k]))) + model.F(problem.measure(k, Y[k])))
    return running + terminal_cost(problem, Y[N])


def objective(problem: ControlProblem, control) -> float:
    u = _control_values(problem, control)
    return objective_from_path(problem, simulate_forward(problem, u).values, u)


def _evaluate(problem: ControlProblem, u: np.ndarray, settings: SolverSettings):
    Y = simulate_forward(problem, u).values
    adjoint = solve_adjoint_bsde(problem, Y, u, settings)
    grad = problem.model.l_v(Y[:problem.N], u) + adjoint.Z_plus.values
    return Y, adjoint, grad


def gradient(problem: ControlProblem, control, settings: Optional[SolverSettings] = None) -> FieldProcess:
    """D_vJ(u) = l_v(Y, u) + Z+ along Y = simulate_forward(u)."""
    settings = settings or SolverSettings.from_defaults()
    u = _control_values(problem, control)
    return FieldProcess(_evaluate(problem, u, settings)[2])


def default_step(problem: ControlProblem, c0: float) -> float:
    """rho = c0 / (c_l + c_T + c_h + c + 1)^2 clamped to (0, 1]."""
    k = problem.model.constants
    denominator = (k.c_l + k.c_T + k.c_h + k.c + 1.0) ** 2
    rho = c0 / denominator if c0 > 0 else 0.5 / denominator
    return float(min(max(rho, 1e-12), 1.0))


def solve_optimal(problem: ControlProblem, method: str = 'picard_feedback',
                  settings: Optional[SolverSettings] = None,
                  initial_control=None) -> OptimalQuadruple:
    """
    Solve the optimality system by gradient descent on u or by the damped
    feedback iteration u <- (1 - theta) u + theta u(Y, Z+).

    Hitting the iteration cap returns the best iterate with converged=False;
    a blow-up is retried with halved step or damping before raising.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method '{method}', choose from {METHODS}")
    settings = settings or SolverSettings.from_defaults()
    c0 = compute_c0(problem.model, problem.grid)
    if c0 <= 0:
        logger.warning(f"⚠️ c0={c0:.4g} <= 0: strict convexity is not certified, proceeding with reduced steps")

    u0 = np.zeros(problem.control_shape) if initial_control is None else \
        np.array(_control_values(problem, initial_control))

    if method == 'gradient_descent':
        base = settings.step or default_step(problem, c0)
    else:
        base = settings.damping if c0 > 0 else settings.damping / 2

    logger.info(f"🔄 Solving {problem.model.name} with {method} "
                f"(M={problem.M}, K={problem.K}, N={problem.N}, n={problem.n}, relax={base:.4g})")

    def run(relax: float) -> OptimalQuadruple:
        return _iterate(problem, method, settings, u0, relax)

    return with_damping_backoff(run, base, label=f"{method} solver")


def _iterate(problem: ControlProblem, method: str, settings: SolverSettings,
             u0: np.ndarray, relax: float) -> OptimalQuadruple:
    N = problem.N
    u = u0.copy()
    history: List[float] = []
    best = None
    converged = False

    for iteration in range(settings.max_iters + 1):
        Y, adjoint, grad = _evaluate(problem, u, settings)
        residual = FieldProcess(grad).sup_norm() if np.all(np.isfinite(grad)) else float('inf')
        history.append(residual)

        if best is None or residual < best[0]:
            best = (residual, u.copy(), Y, adjoint, iteration)

        if residual <= settings.tol:
            converged = True
            break
        if not np.isfinite(residual) or residual > settings.divergence_factor * max(history[0], 1.0):
            logger.error(f"❌ {method} diverged at iteration {iteration} (residual {residual:.3e})")
            raise DivergenceError(f"{method} diverged at iteration {iteration}", best=best, history=history)
        if iteration == settings.max_iters:
            break
        if iteration % settings.log_every == 0:
            logger.debug(f"🔄 {method} iteration {iteration}: first-order residual {residual:.3e}")

        if method == 'gradient_descent':
            u = u - relax * grad
        else:
            target = feedback_u(Y[:N], adjoint.Z_plus.values, problem.model).u
            u = (1.0 - relax) * u + relax * target

    if converged:
        Y_final, adjoint_final, iterations = Y, adjoint, iteration
    else:
        _, u, Y_final, adjoint_final, iterations = best
        logger.warning(f"⚠️ {method} hit the iteration cap ({settings.max_iters}); "
                       f"best residual {best[0]:.3e} at iteration {iterations}")

    value = objective_from_path(problem, Y_final, u)
    if converged:
        logger.info(f"✅ {method} converged in {iterations} iterations (residual {history[-1]:.3e}, V={value:.6f})")

    return OptimalQuadruple(
        problem=problem,
        Y=FieldProcess(Y_final),
        Z=adjoint_final.Z,
        Z_plus=adjoint_final.Z_plus,
        u=FieldProcess(u),
        r=adjoint_final.r,
        value=value,
        converged=converged,
        iterations=iterations,
        method=method,
        history=tuple(history),
        operators=adjoint_final.operators,
        settings=settings,
    )


def value_function(problem: ControlProblem, method: str = 'picard_feedback',
                   settings: Optional[SolverSettings] = None) -> float:
    """V(x0 ⊗ m, t0) as the objective at the optimal control."""
    quad = solve_optimal(problem, method, settings)
    if not quad.converged:
        raise ConvergenceError("value_function needs a converged solve", best=quad, history=list(quad.history))
    return quad.value


def _node_index(grid: TimeGrid, s) -> int:
    if isinstance(s, (int, np.integer)):
        k = int(s)
    else:
        k = grid.index_of(float(s))
    if not 0 <= k < grid.N:
        raise ValueError(f"restart node {k} must lie in [0, {grid.N})")
    return k


def flow_restart_check(problem: ControlProblem, quad: OptimalQuadruple, s_mid) -> float:
    """
    Re-solve from (s_mid, Y(s_mid)) with the same noise tail and compare:
    max over later nodes of |Y' - Y| + |Z' - Z| in H_m.
    """
    k = _node_index(problem.grid, s_mid)
    sub = problem.tail(k, x0=RandomField(quad.Y.values[k]))
    restart = solve_optimal(sub, quad.method, quad.settings)
    gaps = [
        hm_norm(restart.Y.values[j] - quad.Y.values[k + j]) + hm_norm(restart.Z.values[j] - quad.Z.values[k + j])
        for j in range(sub.N + 1)
    ]
    discrepancy = float(max(gaps))
    logger.info(f"🧪 Flow restart at node {k}: discrepancy {discrepancy:.3e}")
    return discrepancy


def running_cost_until(problem: ControlProblem, quad: OptimalQuadruple, k: int) -> float:
    model = problem.model
    Y, u = quad.Y.values, quad.u.values
    return sum(problem.dt * (float(np.mean(model.l(Y[j], u[j]))) + model.F(problem.measure(j, Y[j])))
               for j in range(k))


def optimality_principle_check(problem: ControlProblem, quad: OptimalQuadruple, s_mid) -> Dict[str, float]:
    """V(t0) against the running cost on [t0, s) plus V(Y(s) ⊗ m, s)."""
    k = _node_index(problem.grid, s_mid)
    running = running_cost_until(problem, quad, k)
    sub = problem.tail(k, x0=RandomField(quad.Y.values[k]))
    continuation = solve_optimal(sub, quad.method, quad.settings).value
    return {
        'value': quad.value,
        'running': running,
        'continuation': continuation,
        'discrepancy': abs(quad.value - (running + continuation)),
    }


@dataclass
class TimeProfile:
    times: List[float]
    values: List[float]
    holder_constant: float


def value_time_profile(problem: ControlProblem, nodes: Sequence[int], method: str = 'picard_feedback',
                       settings: Optional[SolverSettings] = None) -> TimeProfile:
    """V(x0 ⊗ m, s_k) for each start node, keeping the same initial field."""
    times, values = [], []
    for k in nodes:
        sub = problem.tail(int(k)) if k > 0 else problem
        times.append(problem.grid.node(int(k)))
        values.append(solve_optimal(sub, method, settings).value)

    weight = 1.0 + hm_norm(problem.x0) ** 2
    constant = 0.0
    for i in range(len(times)):
        for j in range(i + 1, len(times)):
            constant = max(constant, abs(values[i] - values[j]) / (weight * abs(times[i] - times[j])))
    return TimeProfile(times, values, constant)


def growth_constants(quad: OptimalQuadruple) -> Dict[str, float]:
    """Fitted C with sup_s |Y(s)|, |Z(s)|, |u(s)| <= C (1 + |x0|)."""
    scale = 1.0 + hm_norm(quad.problem.x0)
    return {
        'C_Y': quad.Y.sup_norm() / scale,
        'C_Z': quad.Z.sup_norm() / scale,
        'C_u': quad.u.sup_norm() / scale,
    }


def law_invariance_check(problem: ControlProblem, method: str = 'picard_feedback',
                         settings: Optional[SolverSettings] = None, seed: int = 0) -> float:
    """|V(x0) - V(x0 permuted over atoms)|; both fields share one pushforward."""
    permutation = np.random.default_rng(seed).permutation(problem.M)
    permuted = problem.with_initial(RandomField(problem.x0.values[permutation]))
    return abs(value_function(problem, method, settings) - value_function(permuted, method, settings))


@dataclass
class FrechetReport:
    eps: List[float]
    finite_differences: List[float]
    inner_product: float
    remainders: List[float]
    ratio: Optional[float]


def frechet_check(problem: ControlProblem, psi: RandomField, eps_list: Sequence[float] = (1e-2, 1e-3),
                  method: str = 'picard_feedback', settings: Optional[SolverSettings] = None) -> FrechetReport:
    """Directional difference quotients of V against <Z(t0), psi>."""
    settings = (settings or SolverSettings.from_defaults()).tightened(get_default('fd.inner_tol'))
    base = solve_optimal(problem, method, settings)
    inner = hm_inner(base.Z.values[0], psi)

    quotients, remainders = [], []
    for eps in eps_list:
        shifted = problem.with_initial(problem.x0.plus(psi, eps))
        quotient = (solve_optimal(shifted, method, settings).value - base.value) / eps
        quotients.append(quotient)
        remainders.append(abs(quotient - inner))

    ratio = remainders[-1] / remainders[0] if len(remainders) > 1 and remainders[0] > 0 else None
    logger.info(f"🧪 Frechet check: <Z, psi>={inner:.6g}, remainders={remainders}")
    return FrechetReport(list(eps_list), quotients, inner, remainders, ratio)


def random_control(problem: ControlProblem, seed: int, scale: float = 1.0,
                   scenario_constant: bool = True) -> np.ndarray:
    """Seeded test control; scenario-constant controls are functions of the atom only."""
    rng = np.random.default_rng(seed)
    if scenario_constant:
        per_atom = rng.standard_normal((problem.N, problem.M, 1, problem.n)) * scale
        return np.repeat(per_atom, problem.K, axis=2)
    return rng.standard_normal(problem.control_shape) * scale


def monotonicity_quotient(problem: ControlProblem, v1, v2, settings: Optional[SolverSettings] = None) -> float:
    """<D_vJ(v1) - D_vJ(v2), v1 - v2> / |v1 - v2|^2 in L2(t, T; H_m)."""
    v1 = np.asarray(_control_values(problem, v1))
    v2 = np.asarray(_control_values(problem, v2))
    g1 = gradient(problem, v1, settings).values
    g2 = gradient(problem, v2, settings).values
    diff = v1 - v2
    return l2_inner(g1 - g2, diff, problem.dt) / l2_inner(diff, diff, problem.dt)
