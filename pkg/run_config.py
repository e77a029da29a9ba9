#!/usr/bin/env python3
"""
Run configuration for solver experiments.

A run is described by a single JSON file validated section by section.
Values come from, in increasing priority: the schema defaults, the
environment (MFC_SEED, MFC_THREADS, MFC_OUTPUT_DIR fill fields the file
leaves unset), the file itself, and command-line overrides.
"""

import json
import logging
import os
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config import config
from mfc.core import TimeGrid, gaussian_atoms
from mfc.errors import ConfigError
from mfc.export import config_hash
from mfc.fbsde import METHODS, ControlProblem, SolverSettings, make_problem
from mfc.model import BUILTIN_MODELS, CostModel, build_model

logger = logging.getLogger(__name__)

CHECKS = ('grad-check', 'jacobian-check', 'bellman-check', 'master-check', 'lq-validate')


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class ModelSection(_Section):
    name: str = 'lq_scalar'
    params: Dict[str, float] = Field(default_factory=dict)

    @field_validator('name')
    @classmethod
    def _known(cls, value: str) -> str:
        if value not in BUILTIN_MODELS:
            raise ValueError(f"unknown model '{value}', choose from {sorted(BUILTIN_MODELS)}")
        return value


class GridSection(_Section):
    t0: float = 0.0
    T: float = 1.0
    N: int = Field(50, ge=1)

    @model_validator(mode='after')
    def _ordered(self):
        if not self.t0 < self.T:
            raise ValueError(f"grid needs t0 < T, got t0={self.t0}, T={self.T}")
        return self


class EnsembleSection(_Section):
    M: int = Field(200, ge=1)
    K: int = Field(100, ge=1)
    n: int = Field(1, ge=1)
    seed: Optional[int] = None
    atom_mean: float = 0.0
    atom_std: float = Field(1.0, ge=0.0)
    atom_method: Literal['iid', 'quantile'] = 'iid'
    antithetic: bool = False


class SolverSection(_Section):
    method: str = 'picard_feedback'
    tol: float = Field(1e-6, gt=0.0, lt=1.0)
    max_iters: int = Field(3000, ge=1)
    step: Optional[float] = Field(None, gt=0.0, le=1.0)
    damping: float = Field(0.5, gt=0.0, le=1.0)
    degree: int = Field(2, ge=0)
    ridge: float = Field(1e-8, ge=0.0)

    @field_validator('method')
    @classmethod
    def _method(cls, value: str) -> str:
        if value not in METHODS:
            raise ValueError(f"unknown method '{value}', choose from {list(METHODS)}")
        return value


class DiagnosticsSection(_Section):
    checks: List[str] = Field(default_factory=list)
    probe_x: List[Union[float, List[float]]] = Field(default_factory=lambda: [0.0, 1.0])
    probe_times: List[float] = Field(default_factory=lambda: [0.5])
    psi_seed: int = 1
    eps: List[float] = Field(default_factory=lambda: [1e-2, 1e-3])
    gradient_eps: float = Field(1e-3, gt=0.0)
    gradient_pairs: int = Field(10, ge=1)
    convexity_pairs: int = Field(20, ge=1)
    symmetry_pairs: int = Field(5, ge=1)
    gaussian_samples: int = Field(4, ge=1)

    @field_validator('checks')
    @classmethod
    def _checks(cls, value: List[str]) -> List[str]:
        unknown = [check for check in value if check not in CHECKS]
        if unknown:
            raise ValueError(f"unknown checks {unknown}, choose from {list(CHECKS)}")
        return value

    @field_validator('eps')
    @classmethod
    def _eps(cls, value: List[float]) -> List[float]:
        if not value or any(e <= 0 for e in value):
            raise ValueError("eps must be a non-empty list of positive steps")
        return value


class RunConfig(_Section):
    model: ModelSection = Field(default_factory=ModelSection)
    grid: GridSection = Field(default_factory=GridSection)
    ensemble: EnsembleSection = Field(default_factory=EnsembleSection)
    eta: Union[float, List[List[float]]] = 0.3
    solver: SolverSection = Field(default_factory=SolverSection)
    diagnostics: DiagnosticsSection = Field(default_factory=DiagnosticsSection)
    output_dir: Optional[str] = None
    force: bool = False
    threads: Optional[int] = Field(None, ge=1)

    @model_validator(mode='after')
    def _shapes(self):
        n = self.ensemble.n
        if isinstance(self.eta, list):
            eta = np.asarray(self.eta, dtype=float)
            if eta.shape != (n, n):
                raise ValueError(f"eta must be a {n}x{n} matrix, got shape {eta.shape}")
        for point in self.diagnostics.probe_x:
            size = len(point) if isinstance(point, list) else 1
            if size != n:
                raise ValueError(f"probe point {point} does not have dimension {n}")
        grid = TimeGrid(self.grid.t0, self.grid.T, self.grid.N)
        for t in self.diagnostics.probe_times:
            k = grid.index_of(t)
            if k >= grid.N:
                raise ValueError(f"probe time {t} is the horizon; use a node before T={grid.T}")
        return self

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        """
        Read, merge and validate. Overrides use dotted keys such as
        'ensemble.M'; None values are ignored. Every failure is a ConfigError.
        """
        data: Dict[str, Any] = {}
        if path:
            try:
                with open(path, 'r', encoding='utf-8') as handle:
                    data = json.load(handle)
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {path}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError(f"config file {path} must hold a JSON object")

        _apply_environment(data)
        for key, value in (overrides or {}).items():
            if value is not None:
                _set_dotted(data, key, value)

        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            issues = [f"{'.'.join(str(p) for p in error['loc'])}: {error['msg']}" for error in exc.errors()]
            logger.error(f"❌ Invalid run configuration: {issues}")
            raise ConfigError("run configuration failed validation", issues) from exc

    def resolved(self) -> 'RunConfig':
        """Copy with seed, output directory and thread count filled in."""
        ensemble = self.ensemble.model_copy(update={'seed': self.ensemble.seed
                                                    if self.ensemble.seed is not None else config.default_seed})
        return self.model_copy(update={
            'ensemble': ensemble,
            'output_dir': self.output_dir or config.output_dir,
            'threads': self.threads or config.threads or 1,
        })

    def payload(self) -> Dict[str, Any]:
        return self.model_dump(mode='json')

    def digest(self) -> str:
        """Hash of everything that affects results; output location and threads excluded."""
        payload = self.payload()
        payload.pop('output_dir', None)
        payload.pop('threads', None)
        return config_hash(payload)

    def eta_matrix(self) -> np.ndarray:
        n = self.ensemble.n
        if isinstance(self.eta, list):
            return np.asarray(self.eta, dtype=float)
        return float(self.eta) * np.eye(n)

    def probe_points(self) -> List[np.ndarray]:
        return [np.atleast_1d(np.asarray(point, dtype=float)) for point in self.diagnostics.probe_x]

    def build_model(self) -> CostModel:
        try:
            return build_model(self.model.name, self.ensemble.n, self.model.params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"cannot build model '{self.model.name}': {exc}", [str(exc)]) from exc

    def build_grid(self) -> TimeGrid:
        return TimeGrid(self.grid.t0, self.grid.T, self.grid.N)

    def build_atoms(self) -> np.ndarray:
        e = self.ensemble
        return gaussian_atoms(e.M, e.n, e.atom_mean, e.atom_std, seed=self._seed(), method=e.atom_method)

    def build_problem(self, model: Optional[CostModel] = None) -> ControlProblem:
        e = self.ensemble
        # atoms and noise draw from separate streams of the same seed
        return make_problem(model or self.build_model(), self.eta_matrix(), self.build_grid(),
                            self.build_atoms(), e.K, seed=self._seed() + 1, antithetic=e.antithetic)

    def solver_settings(self) -> SolverSettings:
        s = self.solver
        return SolverSettings.from_defaults(tol=s.tol, max_iters=s.max_iters, damping=s.damping,
                                            degree=s.degree, ridge=s.ridge, step=s.step)

    def _seed(self) -> int:
        return self.ensemble.seed if self.ensemble.seed is not None else config.default_seed

    def log_config_summary(self):
        logger.info("🔧 Run Configuration:")
        logger.info(f"   Model: {self.model.name} {self.model.params}")
        logger.info(f"   Grid: [{self.grid.t0}, {self.grid.T}] with N={self.grid.N}")
        logger.info(f"   Ensemble: M={self.ensemble.M}, K={self.ensemble.K}, n={self.ensemble.n}, "
                    f"seed={self.ensemble.seed}, atoms={self.ensemble.atom_method}")
        logger.info(f"   Solver: {self.solver.method} (tol={self.solver.tol}, max_iters={self.solver.max_iters})")
        logger.info(f"   Checks: {self.diagnostics.checks or 'none'}")
        logger.info(f"   Output: {self.output_dir} (threads={self.threads}, force={self.force})")
        logger.info(f"   Config hash: {self.digest()}")


def _set_dotted(data: Dict[str, Any], key: str, value: Any):
    parts = key.split('.')
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override '{key}': '{part}' is not a section")
    node[parts[-1]] = value


def _apply_environment(data: Dict[str, Any]):
    """Environment values fill fields the file leaves unset."""
    seed = os.getenv('MFC_SEED')
    if seed and data.get('ensemble', {}).get('seed') is None:
        try:
            _set_dotted(data, 'ensemble.seed', int(seed))
        except ValueError as exc:
            raise ConfigError(f"MFC_SEED must be an integer, got {seed!r}") from exc
    if os.getenv('MFC_THREADS') and data.get('threads') is None:
        if config.threads is None:
            raise ConfigError(f"MFC_THREADS must be a positive integer, got {os.getenv('MFC_THREADS')!r}")
        data['threads'] = config.threads
    if os.getenv('MFC_OUTPUT_DIR') and data.get('output_dir') is None:
        data['output_dir'] = os.getenv('MFC_OUTPUT_DIR')
