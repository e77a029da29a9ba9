"""
Pointwise Hamiltonian H(x, p) = inf_v l(x, v) + v . p and its minimizer.

The minimizer solves l_v(x, v) + p = 0; l is strongly convex in v so a damped
Newton iteration started at v = 0 converges globally.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from config import get_default

from .errors import AssumptionGateError, FeedbackConvergenceError, ShapeMismatchError
from .model import CostModel

logger = logging.getLogger(__name__)


@dataclass
class FeedbackResult:
    u: np.ndarray
    newton_iters: int
    residual: float


@dataclass
class HamiltonianValue:
    H: np.ndarray
    H_x: np.ndarray
    H_p: np.ndarray


def _solve(matrices: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(matrices, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise AssumptionGateError(f"l_vv is singular: {exc}") from exc


def feedback_u(x: np.ndarray, p: np.ndarray, model: CostModel,
               tol: float = None, max_iters: int = None, v0: np.ndarray = None) -> FeedbackResult:
    """
    Solve l_v(x, v) + p = 0 for every point of a batch (..., n).

    Newton steps are backtracked on the strictly convex merit l(x, v) + v . p;
    a step is also accepted whenever it reduces the residual.
    """
    tol = get_default('feedback.tol') if tol is None else tol
    max_iters = get_default('feedback.max_iters') if max_iters is None else max_iters
    armijo = get_default('feedback.armijo')

    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if x.shape != p.shape:
        raise ShapeMismatchError(f"feedback_u needs matching x and p, got {x.shape} and {p.shape}")

    v = np.zeros_like(p) if v0 is None else np.array(v0, dtype=float)
    scale = 1.0 + np.linalg.norm(p, axis=-1)

    def merit(vv):
        return model.l(x, vv) + np.sum(vv * p, axis=-1)

    for iteration in range(max_iters + 1):
        grad = model.l_v(x, v) + p
        residual = np.linalg.norm(grad, axis=-1)
        if np.all(residual <= tol * scale):
            return FeedbackResult(v, iteration, float(np.max(residual, initial=0.0)))
        if iteration == max_iters:
            break

        step = -_solve(model.l_vv(x, v), grad)
        slope = np.sum(grad * step, axis=-1)
        current = merit(v)
        t = np.ones(residual.shape)
        pending = residual > tol * scale
        for _ in range(30):
            trial = v + t[..., None] * step
            accepted = (merit(trial) <= current + armijo * t * slope) | (
                np.linalg.norm(model.l_v(x, trial) + p, axis=-1) <= (1.0 - armijo * t) * residual
            )
            pending = pending & ~accepted
            if not np.any(pending):
                break
            t = np.where(pending, t / 2, t)
        v = v + t[..., None] * step

    worst = float(np.max(residual))
    failing = int(np.sum(residual > tol * scale))
    logger.error(f"❌ Feedback Newton failed at {failing} points (worst residual {worst:.3e})")
    raise FeedbackConvergenceError(
        f"first-order condition unresolved at {failing} points after {max_iters} iterations",
        best=v, history=[worst],
    )


def hamiltonian(x: np.ndarray, p: np.ndarray, model: CostModel, u: np.ndarray = None) -> HamiltonianValue:
    """H, H_x = l_x(x, u(x, p)) and H_p = u(x, p) by the envelope theorem."""
    if u is None:
        u = feedback_u(x, p, model).u
    H = model.l(x, u) + np.sum(u * p, axis=-1)
    return HamiltonianValue(H=H, H_x=model.l_x(x, u), H_p=u)


def feedback_jacobians(x: np.ndarray, p: np.ndarray, model: CostModel,
                       u: np.ndarray = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Derivatives of the feedback map at (x, p):
    du/dx = -l_vv^{-1} l_vx and du/dp = -l_vv^{-1}, evaluated at the minimizer u.
    """
    if u is None:
        u = feedback_u(x, p, model).u
    l_vv = model.l_vv(x, u)
    try:
        inverse = np.linalg.inv(l_vv)
    except np.linalg.LinAlgError as exc:
        raise AssumptionGateError(f"l_vv is singular: {exc}") from exc
    du_dp = -inverse
    du_dx = du_dp @ model.l_vx(x, u)
    return du_dx, du_dp
