import numpy as np
import pytest


def _problem(model_name='lq_scalar', M=20, K=1, N=20, eta=0.0, seed=0, **params):
    from mfc.core import TimeGrid, gaussian_atoms
    from mfc.fbsde import make_problem
    from mfc.model import build_model

    model = build_model(model_name, 1, params)
    return make_problem(model, eta, TimeGrid(0.0, 1.0, N), gaussian_atoms(M, 1, seed=seed), K, seed=seed + 1)


def test_problem_validates_noise_and_eta_shapes():
    from mfc.core import TimeGrid, brownian_paths, identity_field
    from mfc.errors import ShapeMismatchError
    from mfc.fbsde import ControlProblem
    from mfc.model import lq_scalar

    grid = TimeGrid(0.0, 1.0, 4)
    x0 = identity_field(np.zeros((3, 1)), K=2)
    with pytest.raises(ShapeMismatchError):
        ControlProblem(lq_scalar(), np.eye(1), grid, x0, brownian_paths(grid, 0, K=3, n=1))
    with pytest.raises(ShapeMismatchError):
        ControlProblem(lq_scalar(), np.eye(2), grid, x0, brownian_paths(grid, 0, K=2, n=1))


def test_initial_field_must_not_depend_on_the_noise():
    from mfc.core import RandomField, TimeGrid, brownian_paths
    from mfc.errors import AdaptednessError
    from mfc.fbsde import ControlProblem
    from mfc.model import lq_scalar

    grid = TimeGrid(0.0, 1.0, 4)
    x0 = RandomField(np.zeros((3, 2, 1)), time_index=1, adapted_to=1)
    with pytest.raises(AdaptednessError):
        ControlProblem(lq_scalar(), np.eye(1), grid, x0, brownian_paths(grid, 0, K=2, n=1))


def test_forward_recursion_adds_drift_and_noise():
    from mfc.fbsde import simulate_forward

    problem = _problem(M=2, K=3, N=4, eta=0.5)
    Y = simulate_forward(problem, np.ones(problem.control_shape)).values
    cumulative = 0.5 * np.cumsum(problem.noise.increments, axis=0)
    expected_last = problem.x0.values + 1.0 + cumulative[-1][None]
    assert np.allclose(Y[-1], expected_last)
    assert np.allclose(Y[0], problem.x0.values)


def test_control_shape_mismatch_is_rejected():
    from mfc.errors import ShapeMismatchError
    from mfc.fbsde import simulate_forward

    problem = _problem(M=2, K=1, N=4)
    with pytest.raises(ShapeMismatchError):
        simulate_forward(problem, np.zeros((3, 2, 1, 1)))


def test_zero_cost_is_solved_by_the_zero_control():
    from mfc.fbsde import solve_optimal

    problem = _problem('zero_cost', M=5, K=4, eta=0.3)
    quad = solve_optimal(problem)
    assert quad.converged
    assert quad.iterations == 0
    assert quad.value == 0.0
    assert not np.any(quad.u.values)
    assert not np.any(quad.Z.values)


def test_gradient_is_exact_along_noise_independent_directions():
    from mfc.core import l2_inner
    from mfc.fbsde import gradient, random_control
    from mfc.oracle import fd_gradient_oracle

    problem = _problem(M=5, K=30, N=10, eta=0.3)
    control = random_control(problem, 3, scale=0.5, scenario_constant=False)
    for seed in range(4, 8):
        psi = random_control(problem, seed)
        inner = l2_inner(gradient(problem, control).values, psi, problem.dt)
        fd = fd_gradient_oracle(problem, control, psi, 1e-3)
        assert inner == pytest.approx(fd, rel=1e-7)


def test_gradient_matches_central_differences_for_a_non_quadratic_interaction():
    from mfc.core import l2_inner
    from mfc.fbsde import gradient, random_control
    from mfc.oracle import fd_gradient_oracle

    problem = _problem('mean_interaction', M=6, K=20, N=10, eta=0.3, kappa=0.3)
    control = random_control(problem, 11, scale=0.5, scenario_constant=False)
    psi = random_control(problem, 12)
    inner = l2_inner(gradient(problem, control).values, psi, problem.dt)
    fd = fd_gradient_oracle(problem, control, psi, 1e-4)
    assert inner == pytest.approx(fd, rel=1e-5)


def test_monotonicity_quotient_is_at_least_c0():
    from mfc.core import TimeGrid
    from mfc.fbsde import monotonicity_quotient, random_control
    from mfc.model import compute_c0

    problem = _problem(M=5, K=20, N=10, eta=0.3)
    c0 = compute_c0(problem.model, TimeGrid(0.0, 1.0, 10))
    for seed in range(3):
        v1 = random_control(problem, 2 * seed)
        v2 = random_control(problem, 2 * seed + 1)
        assert monotonicity_quotient(problem, v1, v2) >= 0.9 * c0


@pytest.mark.parametrize('method', ['picard_feedback', 'gradient_descent'])
def test_deterministic_lq_matches_riccati(method):
    from mfc.fbsde import SolverSettings, solve_optimal
    from mfc.oracle import compare_with_riccati, riccati_for

    problem = _problem(M=50, K=1, N=200)
    settings = SolverSettings.from_defaults(tol=1e-8, step=0.3)
    quad = solve_optimal(problem, method, settings)
    assert quad.converged
    comparison = compare_with_riccati(quad, riccati_for(problem))
    assert comparison['control_error'] <= 0.02
    assert comparison['value_error'] <= 0.02
    assert quad.first_order_residual() <= 1e-8


def test_both_methods_reach_the_same_fixed_point():
    from mfc.core import sup_node_distance
    from mfc.fbsde import SolverSettings, solve_optimal

    problem = _problem(M=10, K=20, N=10, eta=0.3)
    settings = SolverSettings.from_defaults(tol=1e-9, step=0.3)
    picard = solve_optimal(problem, 'picard_feedback', settings)
    descent = solve_optimal(problem, 'gradient_descent', settings)
    assert sup_node_distance(picard.u.values, descent.u.values) <= 1e-6
    assert picard.value == pytest.approx(descent.value, rel=1e-8)


@pytest.mark.slow
def test_stochastic_lq_matches_riccati():
    from mfc.fbsde import solve_optimal
    from mfc.oracle import compare_with_riccati, riccati_for

    problem = _problem(M=50, K=200, N=200, eta=0.3)
    quad = solve_optimal(problem)
    assert quad.converged
    comparison = compare_with_riccati(quad, riccati_for(problem))
    assert comparison['control_error'] <= 0.02
    assert comparison['value_error'] <= 0.02


def test_iteration_cap_returns_best_iterate():
    from mfc.fbsde import SolverSettings, solve_optimal

    problem = _problem(M=5, K=1, N=10)
    quad = solve_optimal(problem, 'gradient_descent', SolverSettings.from_defaults(tol=1e-14, max_iters=2, step=0.1))
    assert not quad.converged
    assert quad.iterations <= 2
    assert quad.first_order_residual() == pytest.approx(min(quad.history))


def test_unknown_method_is_rejected():
    from mfc.fbsde import solve_optimal

    with pytest.raises(ValueError):
        solve_optimal(_problem(M=2, N=2), 'newton')


def test_value_function_requires_convergence():
    from mfc.errors import ConvergenceError
    from mfc.fbsde import SolverSettings, value_function

    with pytest.raises(ConvergenceError):
        value_function(_problem(M=5, N=10), 'gradient_descent',
                       SolverSettings.from_defaults(tol=1e-14, max_iters=1, step=0.1))


def test_restart_and_optimality_principle_on_the_same_noise():
    from mfc.fbsde import SolverSettings, flow_restart_check, optimality_principle_check, solve_optimal

    problem = _problem(M=10, K=20, N=20, eta=0.3)
    quad = solve_optimal(problem, settings=SolverSettings.from_defaults(tol=1e-10))
    assert flow_restart_check(problem, quad, 0.5) <= 1e-6
    principle = optimality_principle_check(problem, quad, 10)
    assert principle['discrepancy'] <= 1e-6 * (1.0 + abs(quad.value))


def test_restart_node_must_be_interior():
    from mfc.fbsde import flow_restart_check, solve_optimal

    problem = _problem(M=3, N=4)
    quad = solve_optimal(problem)
    with pytest.raises(ValueError):
        flow_restart_check(problem, quad, 4)


def test_value_depends_on_the_law_only():
    from mfc.fbsde import law_invariance_check

    assert law_invariance_check(_problem(M=8, K=10, N=10, eta=0.3)) <= 1e-10


def test_frechet_remainder_is_first_order():
    from mfc.core import atom_field
    from mfc.fbsde import frechet_check

    problem = _problem(M=10, K=1, N=20)
    psi = atom_field(np.random.default_rng(5).standard_normal((10, 1)), 1)
    report = frechet_check(problem, psi)
    assert 0.05 <= report.ratio <= 0.2
    assert report.finite_differences[-1] == pytest.approx(report.inner_product, rel=1e-2, abs=2e-3)


def test_value_time_profile_and_growth_constants():
    from mfc.fbsde import growth_constants, solve_optimal, value_time_profile

    problem = _problem(M=10, K=1, N=10)
    profile = value_time_profile(problem, [0, 5])
    assert profile.times == pytest.approx([0.0, 0.5])
    assert np.isfinite(profile.holder_constant)
    constants = growth_constants(solve_optimal(problem))
    assert set(constants) == {'C_Y', 'C_Z', 'C_u'}
    assert all(value > 0 for value in constants.values())
