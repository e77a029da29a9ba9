"""
Discretized Hilbert-space objects.

A random field is stored as an (M, K, n) array: M spatial atoms sampling the
initial measure m, K Brownian scenarios, n state dimensions. Ensemble
averages over (atom, scenario) pairs play the role of the H_m integral.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

import numpy as np
from scipy.stats import norm

from .errors import AdaptednessError, DimensionError, ShapeMismatchError

logger = logging.getLogger(__name__)

ArrayOrField = Union[np.ndarray, "RandomField"]


def _readonly(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t0 = s_0 < s_1 < ... < s_N = T."""

    t0: float
    T: float
    N: int

    def __post_init__(self):
        if not self.t0 < self.T:
            raise ValueError(f"TimeGrid needs t0 < T, got t0={self.t0}, T={self.T}")
        if self.N < 1:
            raise ValueError(f"TimeGrid needs N >= 1, got {self.N}")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.N

    @property
    def horizon(self) -> float:
        return self.T - self.t0

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.N + 1)

    def node(self, k: int) -> float:
        return self.t0 + k * self.dt

    def index_of(self, s: float) -> int:
        """Grid index of time s; s must sit on a node."""
        k = int(round((s - self.t0) / self.dt))
        if not 0 <= k <= self.N or abs(self.node(k) - s) > 1e-9 * max(1.0, abs(s)):
            raise ValueError(f"time {s} is not a node of {self}")
        return k

    def tail(self, k: int) -> "TimeGrid":
        """The grid restricted to [s_k, T]."""
        if not 0 <= k < self.N:
            raise ValueError(f"tail index {k} outside [0, {self.N})")
        return TimeGrid(self.node(k), self.T, self.N - k)

    def refined(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.N * factor)


@dataclass(frozen=True)
class NoiseBundle:
    """Brownian increments shared by every atom: shape (N, K, n)."""

    seed: int
    K: int
    n: int
    N: int
    increments: np.ndarray
    antithetic: bool = False

    def __post_init__(self):
        if self.increments.shape != (self.N, self.K, self.n):
            raise ShapeMismatchError(
                f"increments shape {self.increments.shape} != {(self.N, self.K, self.n)}"
            )

    def tail(self, k: int) -> "NoiseBundle":
        """Increments from step k on, aligned with TimeGrid.tail(k)."""
        return replace(self, N=self.N - k, increments=self.increments[k:])

    def to_record(self) -> dict:
        return {'seed': self.seed, 'K': self.K, 'n': self.n, 'N': self.N, 'antithetic': self.antithetic}


def brownian_paths(grid: TimeGrid, seed: int, K: int, n: int, antithetic: bool = False) -> NoiseBundle:
    """Seeded Gaussian increments with covariance dt * Identity per step."""
    if K < 1:
        raise ValueError(f"brownian_paths needs K >= 1, got {K}")
    if n < 1:
        raise ValueError(f"brownian_paths needs n >= 1, got {n}")

    rng = np.random.default_rng(seed)
    if antithetic:
        half = (K + 1) // 2
        draws = rng.standard_normal((grid.N, half, n))
        draws = np.concatenate([draws, -draws], axis=1)[:, :K]
    else:
        draws = rng.standard_normal((grid.N, K, n))

    increments = _readonly(draws * np.sqrt(grid.dt))
    logger.debug(f"🎲 Generated {grid.N}x{K}x{n} increments (seed={seed}, antithetic={antithetic})")
    return NoiseBundle(seed=seed, K=K, n=n, N=grid.N, increments=increments, antithetic=antithetic)


@dataclass(frozen=True)
class RandomField:
    """
    Element of H_m at one grid node.

    values has shape (M, K, n) for vector fields or (M, K, n, n) for matrix
    fields. adapted_to is the last increment step the field may depend on.
    """

    values: np.ndarray
    time_index: int = 0
    adapted_to: int = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim < 3:
            raise ShapeMismatchError(f"RandomField needs (M, K, n[, ...]) values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("RandomField values must be finite")
        if self.adapted_to > self.time_index:
            raise AdaptednessError(
                f"field at node {self.time_index} cannot depend on step {self.adapted_to}"
            )
        object.__setattr__(self, 'values', _readonly(values))

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def K(self) -> int:
        return self.values.shape[1]

    @property
    def n(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self):
        return self.values.shape

    def is_scenario_constant(self, atol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.values - self.values[:, :1]) <= atol))

    def scaled(self, factor: float) -> "RandomField":
        return replace(self, values=self.values * factor)

    def plus(self, other: "RandomField", factor: float = 1.0) -> "RandomField":
        if other.shape != self.shape:
            raise ShapeMismatchError(f"cannot add fields of shapes {self.shape} and {other.shape}")
        return RandomField(
            self.values + factor * other.values,
            time_index=self.time_index,
            adapted_to=max(self.adapted_to, other.adapted_to),
        )


def _values(x: ArrayOrField) -> np.ndarray:
    return x.values if isinstance(x, RandomField) else np.asarray(x, dtype=float)


def hm_inner(X: ArrayOrField, Y: ArrayOrField) -> float:
    """(1/(M K)) sum over atoms and scenarios of X . Y."""
    a, b = _values(X), _values(Y)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"hm_inner shape mismatch: {a.shape} vs {b.shape}")
    # np.sum reduces pairwise, so the result does not depend on how callers chunk work
    return float(np.sum(a * b) / (a.shape[0] * a.shape[1]))


def hm_norm(X: ArrayOrField) -> float:
    return float(np.sqrt(max(hm_inner(X, X), 0.0)))


@dataclass(frozen=True)
class FieldProcess:
    """Fields on consecutive grid nodes: values of shape (L, M, K, ...)."""

    values: np.ndarray
    start_index: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim < 4:
            raise ShapeMismatchError(f"FieldProcess needs (L, M, K, n[, ...]) values, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("FieldProcess values must be finite")
        object.__setattr__(self, 'values', values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def at(self, k: int) -> RandomField:
        node = self.start_index + k
        return RandomField(self.values[k], time_index=node, adapted_to=node)

    def node_norms(self) -> np.ndarray:
        """H_m norm at every node."""
        L, M, K = self.values.shape[:3]
        squares = np.sum(self.values.reshape(L, M * K, -1) ** 2, axis=(1, 2)) / (M * K)
        return np.sqrt(squares)

    def sup_norm(self) -> float:
        return float(np.max(self.node_norms()))

    def l2_norm(self, dt: float) -> float:
        """Left-endpoint L2(t, T; H_m) norm over the stored nodes."""
        return float(np.sqrt(dt * np.sum(self.node_norms() ** 2)))


def l2_inner(a: np.ndarray, b: np.ndarray, dt: float) -> float:
    """L2(t, T; H_m) inner product of two (L, M, K, ...) arrays."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"l2_inner shape mismatch: {a.shape} vs {b.shape}")
    return float(dt * np.sum(a * b) / (a.shape[1] * a.shape[2]))


def sup_node_distance(a: np.ndarray, b: np.ndarray) -> float:
    """max over nodes of the H_m distance between two (L, M, K, ...) arrays."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"distance shape mismatch: {a.shape} vs {b.shape}")
    return FieldProcess(a - b).sup_norm()


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Finitely supported probability measure on R^n."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if points.ndim != 2:
            raise ShapeMismatchError(f"support points must be (P, n), got {points.shape}")
        if weights.shape != (points.shape[0],):
            raise ShapeMismatchError(f"weights shape {weights.shape} does not match {points.shape[0]} points")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(float(np.sum(weights)) - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {np.sum(weights)!r}")
        object.__setattr__(self, 'points', points)
        object.__setattr__(self, 'weights', weights)

    @classmethod
    def uniform(cls, points: np.ndarray) -> "EmpiricalMeasure":
        points = np.asarray(points, dtype=float)
        size = points.shape[0]
        return cls(points, np.full(size, 1.0 / size))

    @property
    def n(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def integrate(self, phi: Callable[[np.ndarray], np.ndarray]):
        """Integral of phi; phi maps (P, n) points to (P, ...) values."""
        return np.tensordot(self.weights, np.asarray(phi(self.points), dtype=float), axes=(0, 0))

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def second_moment(self) -> float:
        return float(self.weights @ np.sum(self.points ** 2, axis=1))

    def variance(self) -> float:
        """E|x - mean|^2."""
        return max(self.second_moment() - float(np.sum(self.mean() ** 2)), 0.0)

    def merged(self) -> "EmpiricalMeasure":
        """Merge repeated support points, adding their weights."""
        unique, inverse = np.unique(self.points, axis=0, return_inverse=True)
        weights = np.bincount(inverse.reshape(-1), weights=self.weights, minlength=unique.shape[0])
        return EmpiricalMeasure(unique, weights / np.sum(weights))

    def mixture(self, other: "EmpiricalMeasure", eps: float) -> "EmpiricalMeasure":
        """(1 - eps) self + eps other."""
        if not 0.0 <= eps <= 1.0:
            raise ValueError(f"mixture weight must lie in [0, 1], got {eps}")
        points = np.concatenate([self.points, other.points])
        weights = np.concatenate([(1.0 - eps) * self.weights, eps * other.weights])
        return EmpiricalMeasure(points, weights / np.sum(weights))


def pushforward(X: ArrayOrField) -> EmpiricalMeasure:
    """X ⊗ m: every (atom, scenario) value with weight 1/(M K)."""
    values = _values(X)
    if values.ndim != 3:
        raise ShapeMismatchError(f"pushforward needs an (M, K, n) field, got {values.shape}")
    return EmpiricalMeasure.uniform(values.reshape(-1, values.shape[2]))


def w2_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact W2 between two measures on the line via the quantile coupling."""
    if mu.n != 1 or nu.n != 1:
        raise DimensionError(f"w2_1d only supports n = 1, got {mu.n} and {nu.n}")

    def _sorted(measure):
        order = np.argsort(measure.points[:, 0], kind='stable')
        cumulative = np.cumsum(measure.weights[order])
        cumulative[-1] = 1.0
        return measure.points[order, 0], cumulative

    xa, ca = _sorted(mu)
    xb, cb = _sorted(nu)

    levels = np.unique(np.clip(np.concatenate([ca, cb]), 0.0, 1.0))
    widths = np.diff(np.concatenate([[0.0], levels]))
    keep = widths > 0
    mids = (levels - widths / 2)[keep]
    widths = widths[keep]

    ia = np.minimum(np.searchsorted(ca, mids, side='left'), xa.size - 1)
    ib = np.minimum(np.searchsorted(cb, mids, side='left'), xb.size - 1)
    cost = float(np.sum(widths * (xa[ia] - xb[ib]) ** 2))
    return float(np.sqrt(max(cost, 0.0)))


def gaussian_atoms(M: int, n: int, mean: float = 0.0, std: float = 1.0,
                   seed: int = 0, method: str = 'iid') -> np.ndarray:
    """
    Atoms sampling N(mean, std^2 I).

    'iid' draws independent samples; 'quantile' places the atoms at the
    midpoint quantiles of each coordinate (Latin hypercube when n > 1).
    """
    if M < 1:
        raise ValueError(f"need at least one atom, got M={M}")
    rng = np.random.default_rng(seed)
    if method == 'iid':
        return mean + std * rng.standard_normal((M, n))
    if method == 'quantile':
        levels = norm.ppf((np.arange(M) + 0.5) / M)
        columns = [levels if j == 0 else rng.permutation(levels) for j in range(n)]
        return mean + std * np.stack(columns, axis=1)
    raise ValueError(f"unknown atom method '{method}'")


def identity_field(atoms: np.ndarray, K: int) -> RandomField:
    """I_x: the field equal to its atom in every scenario."""
    atoms = np.asarray(atoms, dtype=float)
    if atoms.ndim != 2:
        raise ShapeMismatchError(f"atoms must be (M, n), got {atoms.shape}")
    values = np.repeat(atoms[:, None, :], K, axis=1)
    return RandomField(values, time_index=0, adapted_to=0)


def constant_field(value, M: int, K: int, n: Optional[int] = None) -> RandomField:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    n = n or value.shape[0]
    return RandomField(np.broadcast_to(value, (M, K, n)).copy())


def atom_field(per_atom: np.ndarray, K: int) -> RandomField:
    """A field that depends on the atom only, given as (M, n[, ...]) values."""
    per_atom = np.asarray(per_atom, dtype=float)
    values = np.repeat(per_atom[:, None], K, axis=1)
    return RandomField(values)
