import numpy as np
import pytest


def _problem(model_name='lq_scalar', M=20, K=1, N=50, eta=0.0, seed=0, atoms=None, **params):
    from mfc.core import TimeGrid, gaussian_atoms
    from mfc.fbsde import make_problem
    from mfc.model import build_model

    model = build_model(model_name, 1, params)
    atoms = gaussian_atoms(M, 1, seed=seed) if atoms is None else atoms
    return make_problem(model, eta, TimeGrid(0.0, 1.0, N), atoms, K, seed=seed + 1)


def _tight():
    from mfc.fbsde import SolverSettings

    return SolverSettings.from_defaults(tol=1e-10)


def test_residual_report_normalizes_by_the_largest_component():
    from mfc.pde import ResidualReport

    report = ResidualReport.from_components('bellman', 0.5, {'time': 2.0, 'hamiltonian': -1.5}, 0.1)
    assert report.residual == pytest.approx(0.5)
    assert report.normalized == pytest.approx(0.25)
    assert ResidualReport.from_components('bellman', 0.0, {'time': 0.0}, 0.1).normalized == 0.0
    assert report.to_dict()['components'] == {'time': 2.0, 'hamiltonian': -1.5}


def test_terminal_identities_hold_to_rounding():
    from mfc.pde import master_terminal_identity, terminal_identity

    for name in ('lq_scalar', 'mean_interaction', 'quadratic_plus_gaussian'):
        problem = _problem(name, M=7, N=5, s_bar_T=0.3) if name == 'mean_interaction' else _problem(name, M=7, N=5)
        assert terminal_identity(problem) <= 1e-10
        identity = master_terminal_identity(problem, [0.4])
        assert identity['gradient_gap'] <= 1e-10
        assert identity['normalized_integral'] <= 1e-10


def test_probe_time_must_leave_room_for_the_time_difference():
    from mfc.pde import bellman_residual

    problem = _problem(M=3, N=4)
    with pytest.raises(ValueError):
        bellman_residual(problem, 1.0)
    with pytest.raises(ValueError):
        bellman_residual(problem, 0.3)


def test_zero_cost_has_a_vanishing_bellman_residual():
    from mfc.pde import bellman_residual

    report = bellman_residual(_problem('zero_cost', M=5, K=4, N=10, eta=0.3), 0.5, settings=_tight(),
                              gaussian_samples=2)
    assert report.residual == 0.0
    assert report.normalized == 0.0
    assert report.metadata['stencil'] == [3, 7]


def test_deterministic_bellman_residual_is_small():
    from mfc.pde import bellman_residual

    report = bellman_residual(_problem(N=100), 0.5, settings=_tight(), gaussian_samples=2)
    assert set(report.components) == {'time', 'trace', 'hamiltonian', 'running_mean_field'}
    assert report.components['trace'] == 0.0
    assert report.normalized <= 0.05


@pytest.mark.slow
def test_stochastic_bellman_residual_is_small():
    from mfc.core import gaussian_atoms
    from mfc.pde import bellman_residual

    atoms = gaussian_atoms(40, 1, std=2.0, method='quantile')
    problem = _problem(K=200, N=100, eta=0.3, atoms=atoms)
    report = bellman_residual(problem, 0.5, settings=_tight(), threads=3)
    assert report.normalized <= 0.05


def test_master_residual_is_small_for_a_mean_interaction():
    from mfc.pde import master_residual

    problem = _problem('mean_interaction', N=100)
    report = master_residual(problem, [0.5], 0.5, settings=_tight())
    assert report.x == [0.5]
    assert report.components['trace_x'] == 0.0
    assert report.normalized <= 0.10


def test_gaussian_trace_agrees_with_the_matrix_trace():
    from mfc.fbsde import solve_optimal
    from mfc.jacobian import matrix_jacobian
    from mfc.pde import gaussian_trace

    problem = _problem(M=200, N=10, eta=0.3)
    quad = solve_optimal(problem, settings=_tight())
    hessians = matrix_jacobian(quad).DZ.values[0]
    exact = 0.09 * float(np.mean(hessians[..., 0, 0]))
    estimate = gaussian_trace(quad, samples=4, seed=3)
    assert estimate['estimate'] == pytest.approx(exact, rel=0.2)
    assert np.isfinite(estimate['standard_error'])


def test_costate_along_the_path_matches_a_restart():
    from mfc.core import atom_field
    from mfc.fbsde import solve_optimal
    from mfc.pde import costate_consistency_check

    problem = _problem(M=8, N=20)
    quad = solve_optimal(problem, settings=_tight())
    psi = atom_field(np.random.default_rng(4).standard_normal((8, 1)), 1)
    report = costate_consistency_check(problem, quad, 0.5, psi)
    assert report['node'] == 10
    assert report['inner_restart'] == pytest.approx(report['inner_along_path'], rel=1e-5, abs=1e-8)
    assert report['remainders'][-1] <= report['remainders'][0]


def test_ito_formula_for_the_second_moment_of_brownian_motion():
    from mfc.core import TimeGrid, brownian_paths
    from mfc.pde import TestFunctional, ito_check

    grid = TimeGrid(0.0, 1.0, 20)
    eta = 0.5
    noise = brownian_paths(grid, 9, K=20000, n=1)
    x0 = np.array([[-1.0], [1.0]])
    W = np.concatenate([np.zeros((1, 20000, 1)), np.cumsum(noise.increments, axis=0)])
    X = x0[None, :, None, :] + eta * W[:, None]

    functional = TestFunctional(
        psi=lambda x, s: np.sum(x ** 2, axis=-1),
        psi_t=lambda x, s: np.zeros(x.shape[:-1]),
        psi_x=lambda x, s: 2.0 * x,
        psi_xx=lambda x, s: 2.0 * np.broadcast_to(np.eye(1), x.shape + (1,)),
    )
    report = ito_check(functional, X, 0.0, eta, grid)
    assert report.slope_rhs == pytest.approx(eta ** 2)
    assert report.slope_relative_error <= 0.05
    assert report.integrated_discrepancy <= 0.05 * eta ** 2
