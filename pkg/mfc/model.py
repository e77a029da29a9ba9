"""
Cost models: running and terminal costs, mean-field functionals, structural
constants and the probe-based assumption checker.

All callbacks are vectorized. Points are arrays whose last axis is the state
dimension n; derivative outputs append one axis of length n per derivative.
Mixed second derivatives follow l_xv[..., a, b] = d/dx_a d/dv_b l.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from config import get_default

from .core import EmpiricalMeasure, TimeGrid
from .errors import MfcError, MissingDerivativeError

logger = logging.getLogger(__name__)

# pairwise kernel blocks are limited to roughly this many floats
_PAIR_BLOCK = 4_000_000

# the two alternative convexity conditions on a functional; one of them must hold
CONVEXITY_SUFFIXES = ('separate convexity', ' joint convexity')


def _diag(vec: np.ndarray) -> np.ndarray:
    """(..., n) -> (..., n, n) diagonal matrices."""
    n = vec.shape[-1]
    out = np.zeros(vec.shape + (n,))
    idx = np.arange(n)
    out[..., idx, idx] = vec
    return out


def _diag3(vec: np.ndarray) -> np.ndarray:
    """(..., n) -> (..., n, n, n) with vec on the superdiagonal a = b = c."""
    n = vec.shape[-1]
    out = np.zeros(vec.shape + (n, n))
    idx = np.arange(n)
    out[..., idx, idx, idx] = vec
    return out


def _eye_like(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    return np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n)).copy()


class MeasureFunctional:
    """
    A functional F on probability measures described by its linear functional
    derivatives. The base class is the zero functional.

    d1 is dF/dnu(mu)(x); d2 is d2F/dnu2(mu)(x, xt). Suffixes name spatial
    derivatives: d1_x = D_x d1, d2_xxt[a, b] = d/dx_a d/dxt_b d2,
    d2_xxxt[a, b, c] = d/dx_a d/dx_b d/dxt_c d2.
    """

    name = 'zero'
    interacting = False

    def value(self, mu: EmpiricalMeasure) -> float:
        return 0.0

    def d1(self, mu, x):
        return np.zeros(x.shape[:-1])

    def d1_x(self, mu, x):
        return np.zeros(x.shape)

    def d1_xx(self, mu, x):
        return np.zeros(x.shape + (x.shape[-1],))

    def d1_xxx(self, mu, x):
        n = x.shape[-1]
        return np.zeros(x.shape + (n, n))

    def d2(self, mu, x, xt):
        return np.zeros(np.broadcast_shapes(x.shape, xt.shape)[:-1])

    def d2_x(self, mu, x, xt):
        return np.zeros(np.broadcast_shapes(x.shape, xt.shape))

    def d2_xxt(self, mu, x, xt):
        shape = np.broadcast_shapes(x.shape, xt.shape)
        return np.zeros(shape + (shape[-1],))

    def d2_xx(self, mu, x, xt):
        shape = np.broadcast_shapes(x.shape, xt.shape)
        return np.zeros(shape + (shape[-1],))

    def d2_xxxt(self, mu, x, xt):
        shape = np.broadcast_shapes(x.shape, xt.shape)
        return np.zeros(shape + (shape[-1], shape[-1]))

    def constants(self) -> Tuple[float, float]:
        """(c, c') bounds for the structural assumptions."""
        return 0.0, 0.0

    # Ensemble couplings. Subclasses with separable kernels override these;
    # the generic versions sum the pairwise kernel in blocks.

    def cross_term(self, mu, points, pool, directions):
        """
        mean_q d2_xxt(points_p, pool_q) @ directions_q.

        points (P, n), pool (Q, n), directions (Q, n, ...) -> (P, n, ...).
        """
        P, n = points.shape
        Q = pool.shape[0]
        extra = directions.shape[2:]
        if not self.interacting:
            return np.zeros((P, n) + extra)
        flat = directions.reshape(Q, n, -1)
        out = np.empty((P, n, flat.shape[-1]))
        block = max(1, _PAIR_BLOCK // max(1, Q * n * n))
        for start in range(0, P, block):
            kernel = self.d2_xxt(mu, points[start:start + block, None, :], pool[None, :, :])
            out[start:start + block] = np.einsum('pqab,qbe->pae', kernel, flat) / Q
        return out.reshape((P, n) + extra)

    def probe_source(self, mu, points, probe):
        """mean_q d2_x(points_p, probe_q): (P, n)."""
        P, n = points.shape
        if not self.interacting:
            return np.zeros((P, n))
        out = np.empty((P, n))
        block = max(1, _PAIR_BLOCK // max(1, probe.shape[0] * n))
        for start in range(0, P, block):
            out[start:start + block] = self.d2_x(mu, points[start:start + block, None, :], probe[None]).mean(axis=1)
        return out

    def cross_term_x(self, mu, points, pool, directions):
        """mean_q sum_c d2_xxxt(points_p, pool_q)[a, b, c] directions_q[c]: (P, n, n)."""
        P, n = points.shape
        if not self.interacting:
            return np.zeros((P, n, n))
        out = np.empty((P, n, n))
        block = max(1, _PAIR_BLOCK // max(1, pool.shape[0] * n ** 3))
        for start in range(0, P, block):
            kernel = self.d2_xxxt(mu, points[start:start + block, None, :], pool[None, :, :])
            out[start:start + block] = np.einsum('pqabc,qc->pab', kernel, directions) / pool.shape[0]
        return out

    def probe_source_x(self, mu, points, probe):
        """mean_q d2_xx(points_p, probe_q): (P, n, n)."""
        P, n = points.shape
        if not self.interacting:
            return np.zeros((P, n, n))
        out = np.empty((P, n, n))
        block = max(1, _PAIR_BLOCK // max(1, probe.shape[0] * n * n))
        for start in range(0, P, block):
            out[start:start + block] = self.d2_xx(mu, points[start:start + block, None, :], probe[None]).mean(axis=1)
        return out


class QuadraticMoment(MeasureFunctional):
    """F(mu) = (w/2) integral of |x|^2."""

    name = 'quadratic_moment'

    def __init__(self, weight: float):
        self.weight = float(weight)

    def value(self, mu):
        return 0.5 * self.weight * mu.second_moment()

    def d1(self, mu, x):
        return 0.5 * self.weight * np.sum(x ** 2, axis=-1)

    def d1_x(self, mu, x):
        return self.weight * x

    def d1_xx(self, mu, x):
        return self.weight * _eye_like(x)

    def constants(self):
        return 2.0 * abs(self.weight), max(-self.weight, 0.0)


class GaussianPotential(MeasureFunctional):
    """F(mu) = w * integral of (|x|^2 + exp(-|x|^2))."""

    name = 'gaussian_potential'

    def __init__(self, weight: float = 1.0):
        self.weight = float(weight)

    def _g(self, x):
        return np.exp(-np.sum(x ** 2, axis=-1))

    def value(self, mu):
        return float(self.weight * mu.integrate(lambda p: np.sum(p ** 2, axis=-1) + self._g(p)))

    def d1(self, mu, x):
        return self.weight * (np.sum(x ** 2, axis=-1) + self._g(x))

    def d1_x(self, mu, x):
        return self.weight * 2.0 * x * (1.0 - self._g(x))[..., None]

    def d1_xx(self, mu, x):
        g = self._g(x)[..., None, None]
        eye = _eye_like(x)
        outer = x[..., :, None] * x[..., None, :]
        return self.weight * (2.0 * eye + g * (4.0 * outer - 2.0 * eye))

    def d1_xxx(self, mu, x):
        g = self._g(x)[..., None, None, None]
        n = x.shape[-1]
        eye = np.eye(n)
        outer = x[..., :, None] * x[..., None, :]
        # d/dx_c [g (4 x_a x_b - 2 delta_ab)]
        first = -2.0 * x[..., None, None, :] * (4.0 * outer - 2.0 * eye)[..., None]
        second = 4.0 * (eye[:, None, :] * x[..., None, :, None] + x[..., :, None, None] * eye[None, :, :])
        return self.weight * g * (first + second)

    def constants(self):
        # the Hessian eigenvalues lie in [0, 2.9 w]
        return 6.0 * abs(self.weight), 0.0


class MeanInteraction(MeasureFunctional):
    """
    F(mu) = (s/2) |integral of psi|^2 with psi(x) = x + kappa sin(x) componentwise.

    kappa = 0 is the quadratic mean interaction (s/2)|mean(mu)|^2.
    """

    name = 'mean_interaction'
    interacting = True

    def __init__(self, strength: float, kappa: float = 0.0, moment_bound: float = 5.0):
        self.strength = float(strength)
        self.kappa = float(kappa)
        self.moment_bound = float(moment_bound)

    def psi(self, x):
        return x + self.kappa * np.sin(x)

    def psi1(self, x):
        return 1.0 + self.kappa * np.cos(x)

    def psi2(self, x):
        return -self.kappa * np.sin(x)

    def psi3(self, x):
        return -self.kappa * np.cos(x)

    def moment(self, mu):
        return mu.integrate(self.psi)

    def value(self, mu):
        return 0.5 * self.strength * float(np.sum(self.moment(mu) ** 2))

    def d1(self, mu, x):
        return self.strength * np.sum(self.moment(mu) * self.psi(x), axis=-1)

    def d1_x(self, mu, x):
        return self.strength * self.moment(mu) * self.psi1(x)

    def d1_xx(self, mu, x):
        return _diag(self.strength * self.moment(mu) * self.psi2(x))

    def d1_xxx(self, mu, x):
        return _diag3(self.strength * self.moment(mu) * self.psi3(x))

    def d2(self, mu, x, xt):
        return self.strength * np.sum(self.psi(x) * self.psi(xt), axis=-1)

    def d2_x(self, mu, x, xt):
        return self.strength * self.psi1(x) * self.psi(xt)

    def d2_xxt(self, mu, x, xt):
        return _diag(self.strength * self.psi1(x) * self.psi1(xt))

    def d2_xx(self, mu, x, xt):
        return _diag(self.strength * self.psi2(x) * self.psi(xt))

    def d2_xxxt(self, mu, x, xt):
        return _diag3(self.strength * self.psi2(x) * self.psi1(xt))

    def cross_term(self, mu, points, pool, directions):
        Q, n = pool.shape
        flat = directions.reshape(Q, n, -1)
        pooled = np.mean(self.psi1(pool)[:, :, None] * flat, axis=0)
        out = self.strength * self.psi1(points)[:, :, None] * pooled[None]
        return out.reshape((points.shape[0], n) + directions.shape[2:])

    def probe_source(self, mu, points, probe):
        return self.strength * self.psi1(points) * np.mean(self.psi(probe), axis=0)[None]

    def cross_term_x(self, mu, points, pool, directions):
        pooled = np.mean(self.psi1(pool) * directions, axis=0)
        return _diag(self.strength * self.psi2(points) * pooled[None])

    def probe_source_x(self, mu, points, probe):
        return _diag(self.strength * self.psi2(points) * np.mean(self.psi(probe), axis=0)[None])

    def constants(self):
        s = abs(self.strength)
        curvature = s * abs(self.kappa) * self.moment_bound
        c = 2.0 * max(s * (1.0 + abs(self.kappa)) ** 2, curvature)
        return c, curvature


@dataclass(frozen=True)
class ModelConstants:
    """Structural constants of the cost model; primed values are convexity defects."""

    lam: float
    c_l: float
    c_h: float
    c: float
    c_T: float
    c_prime: float = 0.0
    c_l_prime: float = 0.0
    c_h_prime: float = 0.0
    c_T_prime: float = 0.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not math.isfinite(value):
                raise ValueError(f"model constant {name} must be finite, got {value}")
            # primed constants may be negative; compute_c0 clamps their sums
            if not name.endswith('_prime') and value < 0:
                raise ValueError(f"model constant {name} must be nonnegative, got {value}")
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")

    def to_dict(self) -> Dict[str, float]:
        return dict(self.__dict__)


class CostModel:
    """
    Running cost l(x, v), terminal cost h(x), running and terminal mean-field
    functionals. Subclasses provide the callbacks; third derivatives are
    optional and only needed by the xi-gradient flow and the master check.
    """

    name = 'custom'

    def __init__(self, n: int, constants: ModelConstants,
                 running: Optional[MeasureFunctional] = None,
                 terminal: Optional[MeasureFunctional] = None,
                 params: Optional[Dict[str, float]] = None):
        if n < 1:
            raise ValueError(f"state dimension must be positive, got {n}")
        self.n = n
        self.constants = constants
        self.running = running or MeasureFunctional()
        self.terminal = terminal or MeasureFunctional()
        self.params = dict(params or {})

    def l(self, x, v):
        raise NotImplementedError

    def l_x(self, x, v):
        raise NotImplementedError

    def l_v(self, x, v):
        raise NotImplementedError

    def l_xx(self, x, v):
        raise NotImplementedError

    def l_xv(self, x, v):
        raise NotImplementedError

    def l_vx(self, x, v):
        return np.swapaxes(self.l_xv(x, v), -1, -2)

    def l_vv(self, x, v):
        raise NotImplementedError

    def l_xxx(self, x, v):
        raise MissingDerivativeError(f"model '{self.name}' does not provide l_xxx")

    def l_xxv(self, x, v):
        raise MissingDerivativeError(f"model '{self.name}' does not provide l_xxv")

    def l_xvv(self, x, v):
        raise MissingDerivativeError(f"model '{self.name}' does not provide l_xvv")

    def l_vvv(self, x, v):
        raise MissingDerivativeError(f"model '{self.name}' does not provide l_vvv")

    def h(self, x):
        raise NotImplementedError

    def h_x(self, x):
        raise NotImplementedError

    def h_xx(self, x):
        raise NotImplementedError

    def h_xxx(self, x):
        raise MissingDerivativeError(f"model '{self.name}' does not provide h_xxx")

    def F(self, mu):
        return self.running.value(mu)

    def F_T(self, mu):
        return self.terminal.value(mu)

    def has_third_derivatives(self) -> bool:
        x = np.zeros((1, self.n))
        try:
            for callback in (self.l_xxx, self.l_xxv, self.l_xvv, self.l_vvv):
                callback(x, x)
            self.h_xxx(x)
        except MissingDerivativeError:
            return False
        return True

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, n={self.n}, params={self.params})"


class QuadraticCostModel(CostModel):
    """l = r/2 |v|^2 + q/2 |x|^2 and h = q_T/2 |x|^2, with arbitrary functionals."""

    def __init__(self, n: int, r: float, q: float, q_T: float,
                 running: Optional[MeasureFunctional] = None,
                 terminal: Optional[MeasureFunctional] = None,
                 name: str = 'quadratic', params: Optional[Dict[str, float]] = None):
        if r <= 0:
            raise ValueError(f"control weight r must be positive, got {r}")
        running = running or MeasureFunctional()
        terminal = terminal or MeasureFunctional()
        c, c_prime = running.constants()
        c_T, c_T_prime = terminal.constants()
        constants = ModelConstants(
            lam=r, c_l=max(r, abs(q)), c_h=abs(q_T), c=c, c_T=c_T,
            c_prime=c_prime, c_l_prime=max(-q, 0.0), c_h_prime=max(-q_T, 0.0), c_T_prime=c_T_prime,
        )
        super().__init__(n, constants, running, terminal, params)
        self.name = name
        self.r, self.q, self.q_T = float(r), float(q), float(q_T)

    def l(self, x, v):
        return 0.5 * self.r * np.sum(v ** 2, axis=-1) + 0.5 * self.q * np.sum(x ** 2, axis=-1)

    def l_x(self, x, v):
        return self.q * np.broadcast_to(x, np.broadcast_shapes(x.shape, v.shape))

    def l_v(self, x, v):
        return self.r * np.broadcast_to(v, np.broadcast_shapes(x.shape, v.shape))

    def l_xx(self, x, v):
        return self.q * _eye_like(np.broadcast_to(x, np.broadcast_shapes(x.shape, v.shape)))

    def l_xv(self, x, v):
        shape = np.broadcast_shapes(x.shape, v.shape)
        return np.zeros(shape + (shape[-1],))

    def l_vv(self, x, v):
        return self.r * _eye_like(np.broadcast_to(v, np.broadcast_shapes(x.shape, v.shape)))

    def _zeros3(self, x, v):
        shape = np.broadcast_shapes(x.shape, v.shape)
        return np.zeros(shape + (shape[-1], shape[-1]))

    l_xxx = _zeros3
    l_xxv = _zeros3
    l_xvv = _zeros3
    l_vvv = _zeros3

    def h(self, x):
        return 0.5 * self.q_T * np.sum(x ** 2, axis=-1)

    def h_x(self, x):
        return self.q_T * x

    def h_xx(self, x):
        return self.q_T * _eye_like(x)

    def h_xxx(self, x):
        return np.zeros(x.shape + (x.shape[-1], x.shape[-1]))


def zero_cost(n: int = 1, r: float = 1.0) -> QuadraticCostModel:
    """Only the control is charged; u = 0 is optimal and V = 0."""
    return QuadraticCostModel(n, r=r, q=0.0, q_T=0.0, name='zero_cost', params={'r': r})


def lq_scalar(n: int = 1, q: float = 1.0, q_T: float = 1.0, r: float = 1.0,
              lam_bar: float = 0.5, lam_bar_T: float = 0.0) -> QuadraticCostModel:
    """Linear-quadratic model with second-moment mean-field costs."""
    return QuadraticCostModel(
        n, r=r, q=q, q_T=q_T,
        running=QuadraticMoment(lam_bar), terminal=QuadraticMoment(lam_bar_T),
        name='lq_scalar',
        params={'q': q, 'q_T': q_T, 'r': r, 'lam_bar': lam_bar, 'lam_bar_T': lam_bar_T},
    )


def mean_interaction(n: int = 1, q: float = 1.0, q_T: float = 1.0, r: float = 1.0,
                     s_bar: float = 0.5, s_bar_T: float = 0.0, kappa: float = 0.0) -> QuadraticCostModel:
    """Quadratic costs with the interaction (s/2)|integral of psi|^2."""
    return QuadraticCostModel(
        n, r=r, q=q, q_T=q_T,
        running=MeanInteraction(s_bar, kappa), terminal=MeanInteraction(s_bar_T, kappa),
        name='mean_interaction',
        params={'q': q, 'q_T': q_T, 'r': r, 's_bar': s_bar, 's_bar_T': s_bar_T, 'kappa': kappa},
    )


def quadratic_plus_gaussian(n: int = 1, q: float = 0.0, q_T: float = 1.0, r: float = 1.0,
                            weight: float = 1.0) -> QuadraticCostModel:
    """Non-quadratic running functional integral of (|x|^2 + exp(-|x|^2))."""
    return QuadraticCostModel(
        n, r=r, q=q, q_T=q_T, running=GaussianPotential(weight),
        name='quadratic_plus_gaussian',
        params={'q': q, 'q_T': q_T, 'r': r, 'weight': weight},
    )


BUILTIN_MODELS: Dict[str, Callable[..., CostModel]] = {
    'zero_cost': zero_cost,
    'lq_scalar': lq_scalar,
    'mean_interaction': mean_interaction,
    'quadratic_plus_gaussian': quadratic_plus_gaussian,
}


def builtin_models(n: int = 1) -> Dict[str, CostModel]:
    """Default-parameter instance of every registered model."""
    return {name: factory(n=n) for name, factory in BUILTIN_MODELS.items()}


def build_model(name: str, n: int = 1, params: Optional[Dict[str, float]] = None) -> CostModel:
    if name not in BUILTIN_MODELS:
        raise ValueError(f"unknown model '{name}', choose from {sorted(BUILTIN_MODELS)}")
    return BUILTIN_MODELS[name](n=n, **(params or {}))


def compute_c0(model: CostModel, grid: TimeGrid) -> float:
    """c0 = lambda - (c'_T + c'_h)_+ T - (c'_l + c')_+ T^2 / 2 over the grid horizon."""
    k = model.constants
    T = grid.horizon
    return k.lam - max(k.c_T_prime + k.c_h_prime, 0.0) * T - max(k.c_l_prime + k.c_prime, 0.0) * T ** 2 / 2


def delta1_search(model: CostModel, grid: TimeGrid, points: int = None) -> Optional[float]:
    """
    Largest delta1 on an interior grid of (0, 1) with
    (1 - delta1) lambda - (c'_h + c'_T + c_T) T - (c + c' + c'_l) T^2 / 2 > 0,
    or None when no grid value qualifies.
    """
    points = points or get_default('lfd.delta_grid')
    k = model.constants
    T = grid.horizon
    slack = (k.c_h_prime + k.c_T_prime + k.c_T) * T + (k.c + k.c_prime + k.c_l_prime) * T ** 2 / 2
    candidates = np.arange(1, points + 1) / (points + 1)
    valid = candidates[(1.0 - candidates) * k.lam - slack > 0]
    return float(valid.max()) if valid.size else None


@dataclass
class ProbeSet:
    """Probe points, controls and small measures for the assumption checker."""

    x: np.ndarray
    v: np.ndarray
    measures: List[EmpiricalMeasure]
    xi: List[np.ndarray]
    seed: int


def default_probes(n: int, count: int = None, radius: float = None, seed: int = None,
                   measures: int = None, measure_size: int = None) -> ProbeSet:
    """Gaussian cloud plus an axis grid out to the given radius, all seeded."""
    count = count or get_default('probes.count')
    radius = radius or get_default('probes.radius')
    seed = get_default('probes.seed') if seed is None else seed
    measures = measures or get_default('probes.measures')
    measure_size = measure_size or get_default('probes.measure_size')

    rng = np.random.default_rng(seed)
    grid_count = max(count // 5, 1)
    line = np.linspace(-radius, radius, grid_count)
    axis = np.zeros((grid_count, n))
    axis[:, rng.integers(n)] = line

    cloud = np.clip(rng.standard_normal((count - grid_count, n)) * radius / 3, -radius, radius)
    x = np.concatenate([cloud, axis])
    v = np.clip(rng.standard_normal(x.shape) * radius / 3, -radius, radius)

    measure_list = [EmpiricalMeasure.uniform(rng.standard_normal((measure_size, n))) for _ in range(measures)]
    xi = [rng.standard_normal((measure_size, n)) for _ in range(measures)]
    return ProbeSet(x=x, v=v, measures=measure_list, xi=xi, seed=seed)


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    worst_margin: float
    location: Optional[List[float]] = None

    def to_dict(self):
        return {'name': self.name, 'passed': self.passed,
                'worst_margin': self.worst_margin, 'location': self.location}


@dataclass
class AssumptionReport:
    model: str
    checks: List[AssumptionCheck]
    c0: Optional[float]
    delta1: Optional[float]
    convexity_certificate: Optional[str]
    passed: bool
    probe_seed: int
    constants: Dict[str, float] = field(default_factory=dict)

    def failed(self) -> List[str]:
        return [check.name for check in self.checks if not check.passed]

    def to_dict(self):
        return {
            'model': self.model,
            'passed': self.passed,
            'c0': self.c0,
            'delta1': self.delta1,
            'convexity_certificate': self.convexity_certificate,
            'probe_seed': self.probe_seed,
            'constants': self.constants,
            'checks': [check.to_dict() for check in self.checks],
        }


def _spectral(matrices):
    return np.linalg.norm(matrices, ord=2, axis=(-2, -1))


def _evaluate(name, callback, *args):
    try:
        values = np.asarray(callback(*args), dtype=float)
    except MissingDerivativeError:
        raise
    except Exception as exc:
        raise MfcError(f"callback {name} failed on the probe set: {exc}") from exc
    if not np.all(np.isfinite(values)):
        raise MfcError(f"callback {name} returned non-finite values on the probe set")
    return values


def _pointwise(name, margins, locations, slack) -> AssumptionCheck:
    margins = np.asarray(margins, dtype=float).reshape(-1)
    worst = int(np.argmin(margins))
    location = np.asarray(locations).reshape(margins.size, -1)[worst].tolist() if locations is not None else None
    return AssumptionCheck(name, bool(margins[worst] >= -slack), float(margins[worst]), location)


def check_assumptions(model: CostModel, probes: Optional[ProbeSet] = None,
                      grid: Optional[TimeGrid] = None, slack: float = None) -> AssumptionReport:
    """Probe the structural assumptions on a finite, seeded probe set."""
    probes = probes or default_probes(model.n)
    slack = get_default('probes.slack') if slack is None else slack
    k = model.constants
    x, v = probes.x, probes.v
    xv = np.concatenate([x, v], axis=-1)
    size = 1.0 + np.sum(x ** 2, axis=-1) + np.sum(v ** 2, axis=-1)
    checks: List[AssumptionCheck] = []

    logger.info(f"🧪 Checking assumptions for {model.name} on {x.shape[0]} probes (seed={probes.seed})")

    l = _evaluate('l', model.l, x, v)
    l_x = _evaluate('l_x', model.l_x, x, v)
    l_v = _evaluate('l_v', model.l_v, x, v)
    checks.append(_pointwise('running growth', k.c_l * size - np.abs(l), xv, slack))
    first = np.maximum(np.linalg.norm(l_x, axis=-1), np.linalg.norm(l_v, axis=-1))
    checks.append(_pointwise('running gradient growth', k.c_l * np.sqrt(size) - first, xv, slack))

    l_xx = _evaluate('l_xx', model.l_xx, x, v)
    l_xv = _evaluate('l_xv', model.l_xv, x, v)
    l_vv = _evaluate('l_vv', model.l_vv, x, v)
    hessian = np.maximum.reduce([_spectral(l_xx), _spectral(l_xv), _spectral(l_vv)])
    checks.append(_pointwise('running Hessian bound', k.c_l - hessian, xv, slack))

    h = _evaluate('h', model.h, x)
    h_x = _evaluate('h_x', model.h_x, x)
    h_xx = _evaluate('h_xx', model.h_xx, x)
    size_x = 1.0 + np.sum(x ** 2, axis=-1)
    checks.append(_pointwise('terminal growth', k.c_h * size_x - np.abs(h), x, slack))
    checks.append(_pointwise('terminal gradient growth',
                             k.c_h * np.sqrt(size_x) - np.linalg.norm(h_x, axis=-1), x, slack))
    checks.append(_pointwise('terminal Hessian bound', k.c_h - _spectral(h_xx), x, slack))

    n = model.n
    eye = np.eye(n)
    block = np.concatenate([
        np.concatenate([l_xx + k.c_l_prime * eye, l_xv], axis=-1),
        np.concatenate([np.swapaxes(l_xv, -1, -2), l_vv - k.lam * eye], axis=-1),
    ], axis=-2)
    block = 0.5 * (block + np.swapaxes(block, -1, -2))
    checks.append(_pointwise('running cost convexity', np.linalg.eigvalsh(block)[..., 0], xv, slack))
    checks.append(_pointwise('terminal convexity',
                             np.linalg.eigvalsh(0.5 * (h_xx + np.swapaxes(h_xx, -1, -2)))[..., 0] + k.c_h_prime,
                             x, slack))

    separate_ok, joint_ok = True, True
    for label, functional, c, c_prime in (('F', model.running, k.c, k.c_prime),
                                          ('F_T', model.terminal, k.c_T, k.c_T_prime)):
        checks.extend(_functional_checks(label, functional, c, c_prime, probes, slack))
        separate = [chk for chk in checks[-2:] if chk.name.endswith('separate convexity')]
        joint = [chk for chk in checks[-2:] if chk.name.endswith(' joint convexity')]
        separate_ok &= all(chk.passed for chk in separate)
        joint_ok &= all(chk.passed for chk in joint)

    certificate = 'separate' if separate_ok else ('joint' if joint_ok else None)
    required = [chk for chk in checks if not chk.name.endswith(CONVEXITY_SUFFIXES)]
    passed = all(chk.passed for chk in required) and certificate is not None

    c0 = compute_c0(model, grid) if grid is not None else None
    delta1 = delta1_search(model, grid) if grid is not None else None
    report = AssumptionReport(
        model=model.name, checks=checks, c0=c0, delta1=delta1,
        convexity_certificate=certificate, passed=passed, probe_seed=probes.seed,
        constants=k.to_dict(),
    )
    if passed:
        logger.info(f"✅ Assumptions hold for {model.name} (certificate {certificate}, c0={c0})")
    else:
        logger.warning(f"⚠️ Assumption checks failed for {model.name}: {report.failed()}")
    return report


def _functional_checks(label, functional, c, c_prime, probes, slack) -> List[AssumptionCheck]:
    x = probes.x
    rng = np.random.default_rng(probes.seed + 1)
    partner = x[rng.permutation(x.shape[0])]
    checks = []

    growth, first, second, cross, curvature = [], [], [], [], []
    separate_lifted, joint_lifted = [], []
    for mu, xi in zip(probes.measures, probes.xi):
        value = _evaluate(f'{label}.value', functional.value, mu)
        growth.append(c * (1.0 + mu.second_moment()) - abs(value))

        grad = _evaluate(f'{label}.d1_x', functional.d1_x, mu, x)
        first.append(c / math.sqrt(2) * (1.0 + np.linalg.norm(x, axis=-1)) - np.linalg.norm(grad, axis=-1))

        hess = _evaluate(f'{label}.d1_xx', functional.d1_xx, mu, x)
        second.append(c / 2 - _spectral(hess))
        curvature.append(np.linalg.eigvalsh(0.5 * (hess + np.swapaxes(hess, -1, -2)))[..., 0] + c_prime)

        kernel = _evaluate(f'{label}.d2_xxt', functional.d2_xxt, mu, x, partner)
        cross.append(c / 2 - _spectral(kernel))

        # ensemble forms over the support of mu
        pts, w = mu.points, mu.weights
        pair = _evaluate(f'{label}.d2_xxt', functional.d2_xxt, mu, pts[:, None, :], pts[None, :, :])
        lifted = float(np.einsum('p,q,pa,pqab,qb->', w, w, xi, pair, xi))
        local_hess = _evaluate(f'{label}.d1_xx', functional.d1_xx, mu, pts)
        local = float(np.einsum('p,pa,pab,pb->', w, xi, local_hess, xi))
        norm2 = float(w @ np.sum(xi ** 2, axis=-1))
        separate_lifted.append(lifted)
        joint_lifted.append(local + lifted + c_prime * norm2)

    locations = np.tile(x, (len(probes.measures), 1))
    checks.append(AssumptionCheck(f'{label} growth', bool(min(growth) >= -slack), float(min(growth))))
    checks.append(_pointwise(f'{label} gradient growth', np.concatenate(first), locations, slack))
    checks.append(_pointwise(f'{label} Hessian bound', np.concatenate(second), locations, slack))
    checks.append(_pointwise(f'{label} interaction bound', np.concatenate(cross), locations, slack))
    separate_margin = min(float(np.min(np.concatenate(curvature))), min(separate_lifted))
    checks.append(AssumptionCheck(f'{label} separate convexity', bool(separate_margin >= -slack), separate_margin))
    checks.append(AssumptionCheck(f'{label} joint convexity',
                                  bool(min(joint_lifted) >= -slack), float(min(joint_lifted))))
    return checks
