"""
Least-squares Monte Carlo estimate of E[ . | F_s] along a time slice.

For each atom the K scenario values of the state are mapped to a polynomial
basis and the target is projected onto its span, in the spirit of
Longstaff-Schwartz regression. The fit is done per atom because the initial
field is part of the conditioning information.
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Any, Dict

import numpy as np

from config import get_default

from .errors import RegressionRankError, ShapeMismatchError

logger = logging.getLogger(__name__)


def polynomial_basis(z: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of total degree <= degree in the last axis of z."""
    n = z.shape[-1]
    columns = [np.ones(z.shape[:-1])]
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n), d):
            columns.append(np.prod(z[..., list(combo)], axis=-1))
    return np.stack(columns, axis=-1)


@dataclass
class RegressionOperator:
    """Frozen projection onto the basis built from one (M, K, n) state slice."""

    basis: np.ndarray
    gram: np.ndarray
    constant_only: bool
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.basis.shape[0]

    @property
    def K(self) -> int:
        return self.basis.shape[1]

    def apply(self, target: np.ndarray) -> np.ndarray:
        """Conditional expectation of an (M, K, ...) target, same shape out."""
        if target.shape[:2] != (self.M, self.K):
            raise ShapeMismatchError(
                f"regression target leading shape {target.shape[:2]} != {(self.M, self.K)}"
            )
        if self.constant_only:
            return np.broadcast_to(target.mean(axis=1, keepdims=True), target.shape).copy()

        flat = target.reshape(self.M, self.K, -1)
        rhs = np.einsum('mkb,mkd->mbd', self.basis, flat) / self.K
        coefficients = np.linalg.solve(self.gram, rhs)
        fitted = np.einsum('mkb,mbd->mkd', self.basis, coefficients)
        return fitted.reshape(target.shape)

    def residual_norm(self, target: np.ndarray) -> float:
        residual = target - self.apply(target)
        return float(np.sqrt(np.sum(residual ** 2) / (self.M * self.K)))


def build_operator(state: np.ndarray, degree: int = None, ridge: float = None) -> RegressionOperator:
    """
    Build the projection for one node from the (M, K, n) state.

    Coordinates are standardized per atom; a coordinate that does not vary
    across scenarios is set to zero so deterministic slices reduce to the
    scenario mean. Ridge regularization leaves the intercept unpenalized and
    does not hide rank loss: the unpenalized normal equations must have full
    rank on the columns that are not identically zero.
    """
    degree = get_default('regression.degree') if degree is None else degree
    ridge = get_default('regression.ridge') if ridge is None else ridge
    rank_tol = get_default('regression.rank_tol')

    if state.ndim != 3:
        raise ShapeMismatchError(f"regression state must be (M, K, n), got {state.shape}")
    M, K, n = state.shape

    mean = state.mean(axis=1, keepdims=True)
    std = state.std(axis=1, keepdims=True)
    varying = std > 1e-12 * (1.0 + np.abs(mean))
    z = np.where(varying, (state - mean) / np.where(varying, std, 1.0), 0.0)

    if degree == 0 or K == 1 or not np.any(varying):
        basis = np.ones((M, K, 1))
        return RegressionOperator(basis, np.ones((M, 1, 1)), constant_only=True,
                                  diagnostics={'basis_size': 1, 'samples': K, 'min_eigenvalue': 1.0})

    basis = polynomial_basis(z, degree)
    size = basis.shape[-1]
    penalty = np.full(size, ridge)
    penalty[0] = 0.0

    raw = np.einsum('mkb,mkc->mbc', basis, basis) / K
    if not np.all(np.isfinite(raw)):
        raise RegressionRankError("regression Gram matrix is non-finite", {'basis_size': size, 'samples': K})

    # columns built from a non-varying coordinate are exactly zero and carry no information
    active = np.count_nonzero(np.einsum('mkb,mkb->mb', basis, basis), axis=1)
    raw_eigenvalues = np.linalg.eigvalsh(raw)
    top = raw_eigenvalues[:, -1]
    rank = np.count_nonzero(raw_eigenvalues > rank_tol * top[:, None], axis=1)
    smallest = np.take_along_axis(raw_eigenvalues, (size - active)[:, None], axis=1)[:, 0]

    gram = raw + np.diag(penalty)[None]
    eigenvalues = np.linalg.eigvalsh(gram)
    diagnostics = {
        'basis_size': size,
        'samples': K,
        'min_rank': int(rank.min()),
        'deficient_atoms': int(np.count_nonzero(rank < active)),
        'min_eigenvalue': float(np.min(eigenvalues)),
        'max_condition': float(np.max(top / np.maximum(smallest, 1e-300))),
    }

    if K < int(active.max()):
        logger.error(f"❌ Regression has fewer scenarios than basis functions: {diagnostics}")
        raise RegressionRankError(
            f"{K} scenarios cannot identify {int(active.max())} basis functions of degree {degree}", diagnostics
        )
    if diagnostics['deficient_atoms'] or diagnostics['min_eigenvalue'] <= 0.0:
        logger.error(f"❌ Regression normal equations are rank deficient: {diagnostics}")
        raise RegressionRankError("regression Gram matrix is rank deficient", diagnostics)
    if diagnostics['max_condition'] > get_default('regression.warn_condition'):
        logger.warning(f"⚠️ Regression is poorly conditioned: {diagnostics}")

    return RegressionOperator(basis, gram, constant_only=False, diagnostics=diagnostics)


def conditional_expectation(state: np.ndarray, target: np.ndarray,
                            degree: int = None, ridge: float = None) -> np.ndarray:
    """One-shot E[target | state] for callers that do not reuse the operator."""
    return build_operator(state, degree, ridge).apply(target)
