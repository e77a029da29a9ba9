"""
Run service facade.

One entry point per CLI subcommand. Each builds the problem from a
RunConfig, applies the convexity gate, solves, runs the requested checks and
writes the artifacts, returning a RunOutcome whose exit code the entry
script hands to sys.exit. Numerical work is delegated to the mfc package.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from mfc import export
from mfc.core import atom_field, hm_norm, l2_inner
from mfc.errors import AssumptionGateError, ConfigError, ConvergenceError, RegressionRankError
from mfc.fbsde import (
    METHODS, ControlProblem, OptimalQuadruple, SolverSettings, frechet_check, gradient,
    monotonicity_quotient, random_control, solve_optimal,
)
from mfc.jacobian import (
    factorization_check, fd_check_jacobian, freeze_coefficients, matrix_jacobian,
    solve_jacobian_flow, symmetry_check, uniqueness_check,
)
from mfc.lfd import fitted_bound_constant, solve_lfd_probes, value_lfd
from mfc.model import CostModel, check_assumptions, compute_c0, default_probes
from mfc.oracle import compare_with_riccati, fd_gradient_oracle, oracle_objective, riccati_for
from mfc.pde import bellman_residual, master_residual, master_terminal_identity, terminal_identity
from run_config import RunConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_CONVERGENCE = 3
EXIT_GATE = 4

RELATIVE_GRADIENT_TOL = 1e-3
CONVEXITY_SLACK = 0.9
JACOBIAN_EXACT_TOL = 1e-6
HALVING_BAND = (0.4, 0.6)
SYMMETRY_TOL = 1e-2
ORACLE_TOL = 0.02
BELLMAN_TOL = 0.05
MASTER_TOL = 0.10
IDENTITY_TOL = 1e-10


@dataclass
class RunOutcome:
    exit_code: int
    summary: Dict[str, object]
    artifacts: List[str] = field(default_factory=list)


@dataclass
class RunContext:
    cfg: RunConfig
    model: CostModel
    problem: ControlProblem
    settings: SolverSettings
    digest: str
    out_dir: str
    quad: Optional[OptimalQuadruple] = None

    @property
    def threads(self) -> int:
        return self.cfg.threads or 1

    @property
    def method(self) -> str:
        return self.cfg.solver.method

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def psi(self, offset: int = 0):
        """Seeded noise-independent direction on the atoms."""
        rng = np.random.default_rng(self.cfg.diagnostics.psi_seed + offset)
        return atom_field(rng.standard_normal((self.problem.M, self.problem.n)), self.problem.K)


def _context(cfg: RunConfig) -> RunContext:
    cfg = cfg.resolved()
    cfg.log_config_summary()
    model = cfg.build_model()
    problem = cfg.build_problem(model)
    return RunContext(cfg, model, problem, cfg.solver_settings(), cfg.digest(), cfg.output_dir)


def _gate(ctx: RunContext) -> Optional[RunOutcome]:
    c0 = compute_c0(ctx.model, ctx.problem.grid)
    if c0 > 0:
        logger.info(f"✅ Convexity margin c0={c0:.6g}")
        return None
    if ctx.cfg.force:
        logger.warning(f"⚠️ c0={c0:.6g} <= 0, continuing because --force was given")
        return None
    message = f"c0={c0:.6g} <= 0: strict convexity is not certified (use --force to override)"
    logger.error(f"❌ {message}")
    return RunOutcome(EXIT_GATE, {'c0': c0, 'error': message, 'config_hash': ctx.digest})


def _write_solve(ctx: RunContext) -> List[str]:
    quad = ctx.quad
    return [
        export.write_quadruple(ctx.path('quadruple.csv'), quad, ctx.digest),
        export.write_convergence(ctx.path('convergence.csv'), quad.history, ctx.digest),
        export.write_norms(ctx.path('norms.csv'), quad, ctx.digest),
    ]


def _finish(ctx: RunContext, command: str, exit_code: int, summary: Dict[str, object],
            artifacts: List[str]) -> RunOutcome:
    summary = {'command': command, 'exit_code': exit_code, **summary}
    artifacts = list(artifacts)
    artifacts.append(export.write_json(ctx.path('config.resolved.json'), ctx.cfg.payload(), ctx.digest))
    artifacts.append(export.write_json(ctx.path('summary.json'), summary, ctx.digest, timestamp=True))
    status = '✅' if exit_code == EXIT_OK else '❌'
    logger.info(f"{status} {command} finished with exit code {exit_code} ({len(artifacts)} artifacts in {ctx.out_dir})")
    return RunOutcome(exit_code, summary, artifacts)


def _parallel(ctx: RunContext, function: Callable, items) -> list:
    with ThreadPoolExecutor(max_workers=ctx.threads) as executor:
        return list(executor.map(function, items))


def check_lq_validate(ctx: RunContext) -> Dict[str, object]:
    """Both solver methods against the Riccati oracle."""
    try:
        riccati = riccati_for(ctx.problem)
    except ValueError as exc:
        raise ConfigError(f"lq-validate needs a quadratic builtin: {exc}") from exc

    results = {}
    for method in METHODS:
        quad = ctx.quad if method == ctx.method else solve_optimal(ctx.problem, method, ctx.settings)
        comparison = compare_with_riccati(quad, riccati)
        comparison['converged'] = quad.converged
        comparison['passed'] = bool(quad.converged and comparison['control_error'] <= ORACLE_TOL
                                    and comparison['value_error'] <= ORACLE_TOL)
        results[method] = comparison
        logger.info(f"🧪 {method}: control error {comparison['control_error']:.3%}, "
                    f"value error {comparison['value_error']:.3%}")

    oracle_value = oracle_objective(ctx.problem, riccati)
    consistency = abs(oracle_value - results[ctx.method]['value_oracle']) / max(abs(oracle_value), 1e-300)
    return {
        'methods': results,
        'oracle_objective': oracle_value,
        'oracle_consistency': consistency,
        'passed': all(entry['passed'] for entry in results.values()),
    }


def check_gradient(ctx: RunContext) -> Dict[str, object]:
    """<D_vJ(u), Psi> against central differences, then the monotonicity quotient."""
    problem = ctx.problem
    seed = ctx.cfg.diagnostics.psi_seed
    eps = ctx.cfg.diagnostics.gradient_eps

    def pair(i):
        u = random_control(problem, seed + 2 * i, scale=0.5, scenario_constant=False)
        psi = random_control(problem, seed + 2 * i + 1)
        inner = l2_inner(gradient(problem, u, ctx.settings).values, psi, problem.dt)
        fd = fd_gradient_oracle(problem, u, psi, eps)
        return abs(inner - fd) / max(abs(fd), 1e-12)

    errors = _parallel(ctx, pair, range(ctx.cfg.diagnostics.gradient_pairs))

    def quotient(i):
        base = 1000 + seed + 2 * i
        v1 = random_control(problem, base, scenario_constant=False)
        # the difference stays scenario-constant, where the gradient is exact
        v2 = v1 + random_control(problem, base + 1)
        return monotonicity_quotient(problem, v1, v2, ctx.settings)

    quotients = _parallel(ctx, quotient, range(ctx.cfg.diagnostics.convexity_pairs))
    c0 = compute_c0(ctx.model, problem.grid)
    convex = c0 <= 0 or min(quotients) >= CONVEXITY_SLACK * c0
    return {
        'relative_errors': errors,
        'max_relative_error': max(errors),
        'monotonicity_quotients': quotients,
        'min_quotient': min(quotients),
        'c0': c0,
        'passed': bool(max(errors) <= RELATIVE_GRADIENT_TOL and convex),
    }


def check_jacobian(ctx: RunContext) -> Dict[str, object]:
    """Finite-difference, symmetry, factorization and oracle checks of the Jacobian flow."""
    problem, quad = ctx.problem, ctx.quad
    diagnostics = ctx.cfg.diagnostics
    psi = ctx.psi()
    halving = [diagnostics.eps[0], diagnostics.eps[0] / 2]
    fd = fd_check_jacobian(problem, psi, halving, ctx.method, ctx.settings)
    exact = fd.discrepancy[-1] <= JACOBIAN_EXACT_TOL * (1.0 + hm_norm(psi))
    first_order = all(HALVING_BAND[0] <= ratio <= HALVING_BAND[1] for ratio in fd.ratios)

    coeffs = freeze_coefficients(quad)
    directional = solve_jacobian_flow(quad, psi, coeffs)
    matrix = matrix_jacobian(quad, coeffs)

    def symmetry(i):
        a, b = ctx.psi(10 + 2 * i), ctx.psi(11 + 2 * i)
        return symmetry_check(quad, a, b, coeffs) / max(hm_norm(a) * hm_norm(b), 1e-300)

    asymmetry = _parallel(ctx, symmetry, range(diagnostics.symmetry_pairs))
    frechet = frechet_check(problem, psi, diagnostics.eps, ctx.method, ctx.settings)

    result = {
        'fd_discrepancy': fd.discrepancy,
        'fd_ratios': fd.ratios,
        'fd_exact': exact,
        'factorization_gap': factorization_check(directional, matrix),
        'uniqueness_gap': uniqueness_check(quad, psi),
        'symmetry_gaps': asymmetry,
        'frechet_remainders': frechet.remainders,
        'frechet_ratio': frechet.ratio,
    }
    passed = (exact or first_order) and max(asymmetry) <= SYMMETRY_TOL

    try:
        riccati = riccati_for(problem)
    except ValueError:
        riccati = None
    if riccati is not None:
        DxZ = float(np.mean(matrix.DZ.values[0][..., 0, 0]))
        oracle_error = abs(DxZ - riccati.P[0]) / max(abs(riccati.P[0]), 1e-300)
        result.update({'DxZ_t0': DxZ, 'P_t0': float(riccati.P[0]), 'oracle_error': oracle_error})
        passed = passed and oracle_error <= ORACLE_TOL
    result['passed'] = bool(passed)
    return result


def check_bellman(ctx: RunContext) -> Dict[str, object]:
    diagnostics = ctx.cfg.diagnostics
    reports = [
        bellman_residual(ctx.problem, t, ctx.method, ctx.settings,
                         gaussian_samples=diagnostics.gaussian_samples, seed=diagnostics.psi_seed,
                         threads=ctx.threads)
        for t in diagnostics.probe_times
    ]
    identity = terminal_identity(ctx.problem)
    passed = all(report.normalized <= BELLMAN_TOL for report in reports) and identity <= IDENTITY_TOL
    return {'reports': [report.to_dict() for report in reports], 'terminal_identity': identity,
            'passed': bool(passed)}


def check_master(ctx: RunContext) -> Dict[str, object]:
    points = ctx.cfg.probe_points()
    reports = [
        master_residual(ctx.problem, x, t, ctx.method, ctx.settings, threads=ctx.threads)
        for t in ctx.cfg.diagnostics.probe_times for x in points
    ]
    identities = [master_terminal_identity(ctx.problem, x) for x in points]
    flows = solve_lfd_probes(ctx.quad, points, threads=ctx.threads)
    values = [value_lfd(ctx.quad, x, probe=flow.probe) for x, flow in zip(points, flows)]
    probes = [{**value.to_record(), 'bound_ratio': flow.bound_ratio()} for value, flow in zip(values, flows)]

    worst_identity = max(max(item['gradient_gap'], item['normalized_integral']) for item in identities)
    passed = all(report.normalized <= MASTER_TOL for report in reports) and worst_identity <= IDENTITY_TOL
    return {
        'reports': [report.to_dict() for report in reports],
        'terminal_identities': identities,
        'probes': probes,
        'C10': fitted_bound_constant(flows),
        'passed': bool(passed),
    }


CHECK_RUNNERS: Dict[str, Callable[[RunContext], Dict[str, object]]] = {
    'grad-check': check_gradient,
    'jacobian-check': check_jacobian,
    'bellman-check': check_bellman,
    'master-check': check_master,
    'lq-validate': check_lq_validate,
}


def run_pipeline(cfg: RunConfig, command: str = 'solve', extra_checks: Optional[List[str]] = None) -> RunOutcome:
    """Gate, solve, run the enabled checks and write everything."""
    ctx = _context(cfg)
    gated = _gate(ctx)
    if gated is not None:
        return gated

    checks = list(dict.fromkeys(list(ctx.cfg.diagnostics.checks) + list(extra_checks or [])))
    try:
        ctx.quad = solve_optimal(ctx.problem, ctx.method, ctx.settings)
    except ConvergenceError as exc:
        logger.error(f"❌ Solver failed: {exc}")
        return _finish(ctx, command, EXIT_CONVERGENCE, {'error': str(exc), 'config_hash': ctx.digest}, [])
    except RegressionRankError as exc:
        logger.error(f"❌ Ensemble too small for the regression basis: {exc}")
        return _finish(ctx, command, EXIT_CONFIG, {'error': str(exc), 'regression': exc.diagnostics,
                                                  'config_hash': ctx.digest}, [])

    artifacts = _write_solve(ctx)
    summary: Dict[str, object] = {
        'config_hash': ctx.digest,
        'c0': compute_c0(ctx.model, ctx.problem.grid),
        'solve': ctx.quad.summary(),
        'noise': ctx.problem.noise.to_record(),
    }
    if not ctx.quad.converged:
        logger.error(f"❌ {ctx.method} did not converge within {ctx.settings.max_iters} iterations")
        return _finish(ctx, command, EXIT_CONVERGENCE, summary, artifacts)

    results = {}
    try:
        for name in checks:
            logger.info(f"🧪 Running {name}")
            results[name] = CHECK_RUNNERS[name](ctx)
            logger.info(f"{'✅' if results[name]['passed'] else '❌'} {name}")
    except AssumptionGateError as exc:
        summary.update({'checks': results, 'error': str(exc)})
        return _finish(ctx, command, EXIT_GATE, summary, artifacts)
    except ConvergenceError as exc:
        summary.update({'checks': results, 'error': str(exc)})
        return _finish(ctx, command, EXIT_CONVERGENCE, summary, artifacts)

    summary['checks'] = results
    residuals = {name: results[name] for name in ('bellman-check', 'master-check') if name in results}
    if residuals:
        artifacts.append(export.write_json(ctx.path('residuals.json'), residuals, ctx.digest))
    if 'jacobian-check' in results:
        artifacts.append(export.write_field(ctx.path('direction.csv'), ctx.psi(), ctx.digest))
    if 'master-check' in results:
        artifacts.append(export.write_probe_table(ctx.path('probes.csv'), results['master-check']['probes'],
                                                  ctx.digest))

    passed = all(result['passed'] for result in results.values())
    return _finish(ctx, command, EXIT_OK if passed else EXIT_FAILED, summary, artifacts)


def run_solve(cfg: RunConfig) -> RunOutcome:
    return run_pipeline(cfg, 'solve')


def run_grad_check(cfg: RunConfig) -> RunOutcome:
    return run_pipeline(cfg, 'grad-check', ['grad-check'])


def run_jacobian_check(cfg: RunConfig) -> RunOutcome:
    return run_pipeline(cfg, 'jacobian-check', ['jacobian-check'])


def run_bellman_check(cfg: RunConfig) -> RunOutcome:
    return run_pipeline(cfg, 'bellman-check', ['bellman-check'])


def run_master_check(cfg: RunConfig) -> RunOutcome:
    return run_pipeline(cfg, 'master-check', ['master-check'])


def run_lq_validate(cfg: RunConfig) -> RunOutcome:
    return run_pipeline(cfg, 'lq-validate', ['lq-validate'])


def run_assumptions(cfg: RunConfig) -> RunOutcome:
    """Probe the structural assumptions without solving."""
    ctx = _context(cfg)
    report = check_assumptions(ctx.model, default_probes(ctx.model.n), ctx.problem.grid)
    summary = {'config_hash': ctx.digest, 'assumptions': report.to_dict()}
    logger.info(f"🧪 c0={report.c0}, delta1={report.delta1}, certificate={report.convexity_certificate}")
    return _finish(ctx, 'assumptions', EXIT_OK if report.passed else EXIT_FAILED, summary, [])


COMMANDS: Dict[str, Callable[[RunConfig], RunOutcome]] = {
    'solve': run_solve,
    'grad-check': run_grad_check,
    'jacobian-check': run_jacobian_check,
    'bellman-check': run_bellman_check,
    'master-check': run_master_check,
    'lq-validate': run_lq_validate,
    'assumptions': run_assumptions,
}
