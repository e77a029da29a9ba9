"""
Independent reference solutions: the mean-field Riccati pair for the
quadratic builtins and brute-force finite-difference gradients.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from .core import EmpiricalMeasure, TimeGrid, pushforward
from .errors import MfcError
from .model import CostModel

logger = logging.getLogger(__name__)

_BLOWUP = 1e12


@dataclass(frozen=True)
class LQParams:
    """
    Quadratic data: l = r/2|v|^2 + q/2|x|^2, h = q_T/2|x|^2, second-moment
    weights lam_bar(_T) and mean-interaction weights s_bar(_T).
    """

    q: float
    q_T: float
    r: float
    eta: np.ndarray
    lam_bar: float = 0.0
    lam_bar_T: float = 0.0
    s_bar: float = 0.0
    s_bar_T: float = 0.0

    @property
    def trace_eta(self) -> float:
        return float(np.trace(self.eta @ self.eta.T))


def lq_params_from(model: CostModel, eta) -> LQParams:
    """Read the quadratic coefficients of a builtin model."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    params = model.params
    if model.name == 'zero_cost':
        return LQParams(q=0.0, q_T=0.0, r=params.get('r', 1.0), eta=eta)
    if model.name == 'lq_scalar':
        return LQParams(q=params['q'], q_T=params['q_T'], r=params['r'], eta=eta,
                        lam_bar=params['lam_bar'], lam_bar_T=params['lam_bar_T'])
    if model.name == 'mean_interaction' and params.get('kappa', 0.0) == 0.0:
        return LQParams(q=params['q'], q_T=params['q_T'], r=params['r'], eta=eta,
                        s_bar=params['s_bar'], s_bar_T=params['s_bar_T'])
    raise ValueError(f"model '{model.name}' with params {params} has no Riccati oracle")


@dataclass(frozen=True)
class RiccatiSolution:
    """
    P drives deviations from the mean, Pi drives the mean itself; offset is
    the noise contribution 1/2 tr(eta eta^T) integral of P from s to T.
    """

    params: LQParams
    grid: TimeGrid
    P: np.ndarray
    Pi: np.ndarray
    offset: np.ndarray

    def costate(self, k: int, Y: np.ndarray) -> np.ndarray:
        """Optimal costate on an (M, K, n) slice: P (Y - mean) + Pi mean."""
        mean = Y.reshape(-1, Y.shape[-1]).mean(axis=0)
        return self.P[k] * (Y - mean) + self.Pi[k] * mean

    def feedback(self, k: int, Y: np.ndarray) -> np.ndarray:
        return -self.costate(k, Y) / self.params.r

    def cross_coefficient(self, k: int) -> float:
        """Coefficient of the dnu-derivative of the costate: Pi - P."""
        return float(self.Pi[k] - self.P[k])

    def value(self, k: int, measure: EmpiricalMeasure) -> float:
        mean = measure.mean()
        return float(0.5 * self.P[k] * measure.variance() + 0.5 * self.Pi[k] * np.sum(mean ** 2) + self.offset[k])


def _rhs(params: LQParams):
    q_dev = params.q + params.lam_bar
    q_mean = params.q + params.lam_bar + params.s_bar

    def f(state):
        P, Pi, _ = state
        return np.array([P ** 2 / params.r - q_dev, Pi ** 2 / params.r - q_mean, -0.5 * params.trace_eta * P])

    return f


def _terminal(params: LQParams) -> np.ndarray:
    P_T = params.q_T + params.lam_bar_T
    return np.array([P_T, P_T + params.s_bar_T, 0.0])


def riccati_solve(params: LQParams, grid: TimeGrid, refinement: int = 10, method: str = 'rk4') -> RiccatiSolution:
    """
    Integrate the Riccati pair backward from T.

    'rk4' uses classical Runge-Kutta at `refinement` substeps per grid step;
    'solve_ivp' uses scipy's DOP853 at tight tolerances as a cross-check.
    """
    f = _rhs(params)
    state = _terminal(params)
    nodes = grid.nodes
    values = np.empty((grid.N + 1, 3))
    values[-1] = state

    if method == 'rk4':
        h = -grid.dt / refinement
        for k in range(grid.N - 1, -1, -1):
            for _ in range(refinement):
                k1 = f(state)
                k2 = f(state + 0.5 * h * k1)
                k3 = f(state + 0.5 * h * k2)
                k4 = f(state + h * k3)
                state = state + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(state)) or np.max(np.abs(state)) > _BLOWUP:
                logger.error(f"❌ Riccati solution blows up near s={nodes[k]:.4f}")
                raise MfcError(f"Riccati solution blows up near s={nodes[k]:.6g}")
            values[k] = state
    elif method == 'solve_ivp':
        result = solve_ivp(lambda s, y: f(y), (grid.T, grid.t0), state, method='DOP853',
                           t_eval=nodes[::-1], rtol=1e-12, atol=1e-14)
        if not result.success or not np.all(np.isfinite(result.y)) or np.max(np.abs(result.y)) > _BLOWUP:
            raise MfcError(f"Riccati integration failed: {result.message}")
        values = result.y.T[::-1]
    else:
        raise ValueError(f"unknown Riccati method '{method}'")

    logger.debug(f"🧪 Riccati P(t0)={values[0, 0]:.6f}, Pi(t0)={values[0, 1]:.6f} ({method})")
    return RiccatiSolution(params=params, grid=grid, P=values[:, 0].copy(),
                           Pi=values[:, 1].copy(), offset=values[:, 2].copy())


def riccati_for(problem) -> RiccatiSolution:
    return riccati_solve(lq_params_from(problem.model, problem.eta), problem.grid)


def compare_with_riccati(quad, riccati: RiccatiSolution) -> Dict[str, object]:
    """
    Relative H_m errors of the solver's control and costate against the
    oracle feedback evaluated on the solver's own path, plus the value.
    """
    Y = quad.Y.values
    u = quad.u.values
    Z = quad.Z.values
    N = u.shape[0]

    target_u = np.stack([riccati.feedback(k, Y[k]) for k in range(N)])
    target_z = np.stack([riccati.costate(k, Y[k]) for k in range(N + 1)])

    def _relative(a, b):
        diff = np.sqrt(np.sum((a - b) ** 2, axis=tuple(range(1, a.ndim))))
        scale = np.sqrt(np.sum(b ** 2, axis=tuple(range(1, b.ndim))))
        return diff / np.maximum(scale, 1e-300)

    control_nodes = _relative(u, target_u)
    costate_nodes = _relative(Z, target_z)
    control_error = float(np.sqrt(np.sum((u - target_u) ** 2) / max(np.sum(target_u ** 2), 1e-300)))
    oracle_value = riccati.value(0, pushforward(Y[0]))
    value_error = abs(quad.value - oracle_value) / max(abs(oracle_value), 1e-300)

    return {
        'control_error': control_error,
        'control_error_per_node': control_nodes.tolist(),
        'costate_error_max': float(np.max(costate_nodes)),
        'costate_error_per_node': costate_nodes.tolist(),
        'value_solver': float(quad.value),
        'value_oracle': float(oracle_value),
        'value_error': float(value_error),
        'P_t0': float(riccati.P[0]),
        'Pi_t0': float(riccati.Pi[0]),
    }


def oracle_objective(problem, riccati: RiccatiSolution) -> float:
    """Objective of the oracle feedback simulated on the problem's ensemble."""
    from .fbsde import objective_from_path, simulate_feedback

    Y, u = simulate_feedback(problem, riccati.feedback)
    return objective_from_path(problem, Y, u)


def fd_gradient_oracle(problem, control: np.ndarray, psi: np.ndarray, eps: float) -> float:
    """(J(u + eps psi) - J(u - eps psi)) / (2 eps) under the problem's fixed noise."""
    from .fbsde import objective

    control = np.asarray(getattr(control, 'values', control), dtype=float)
    psi = np.asarray(getattr(psi, 'values', psi), dtype=float)
    if not np.any(psi):
        return 0.0
    plus = objective(problem, control + eps * psi)
    minus = objective(problem, control - eps * psi)
    return (plus - minus) / (2.0 * eps)


def richardson_gradient(problem, control: np.ndarray, psi: np.ndarray,
                        eps_pair: Tuple[float, float] = (1e-2, 1e-3)) -> float:
    """Eliminate the eps^2 term of two central differences."""
    e1, e2 = eps_pair
    d1 = fd_gradient_oracle(problem, control, psi, e1)
    d2 = fd_gradient_oracle(problem, control, psi, e2)
    return (e1 ** 2 * d2 - e2 ** 2 * d1) / (e1 ** 2 - e2 ** 2)
