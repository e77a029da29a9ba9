import numpy as np
import pytest


def test_rk4_and_dop853_agree():
    from mfc.core import TimeGrid
    from mfc.oracle import LQParams, riccati_solve

    params = LQParams(q=1.0, q_T=1.0, r=1.0, eta=np.array([[0.3]]), lam_bar=0.5, s_bar=0.25)
    grid = TimeGrid(0.0, 1.0, 20)
    rk4 = riccati_solve(params, grid)
    dop = riccati_solve(params, grid, method='solve_ivp')
    assert np.allclose(rk4.P, dop.P, atol=1e-9)
    assert np.allclose(rk4.Pi, dop.Pi, atol=1e-9)
    assert np.allclose(rk4.offset, dop.offset, atol=1e-9)


def test_terminal_only_riccati_has_a_closed_form():
    from mfc.core import TimeGrid
    from mfc.oracle import LQParams, riccati_solve

    # P' = P^2 / r with P(T) = q_T gives P(s) = 1 / (1/q_T + (T - s)/r)
    params = LQParams(q=0.0, q_T=2.0, r=1.0, eta=np.array([[0.0]]))
    grid = TimeGrid(0.0, 1.0, 10)
    solution = riccati_solve(params, grid)
    expected = 1.0 / (0.5 + (1.0 - grid.nodes))
    assert np.allclose(solution.P, expected, atol=1e-8)
    assert np.allclose(solution.Pi, expected, atol=1e-8)
    assert np.allclose(solution.offset, 0.0)


def test_zero_cost_oracle_is_identically_zero():
    from mfc.core import TimeGrid
    from mfc.model import zero_cost
    from mfc.oracle import lq_params_from, riccati_solve

    solution = riccati_solve(lq_params_from(zero_cost(), 0.3), TimeGrid(0.0, 1.0, 5))
    assert not np.any(solution.P)
    assert not np.any(solution.Pi)
    assert not np.any(solution.offset)


def test_mean_interaction_shifts_only_the_mean_coefficient():
    from mfc.core import TimeGrid
    from mfc.model import mean_interaction
    from mfc.oracle import lq_params_from, riccati_solve

    solution = riccati_solve(lq_params_from(mean_interaction(s_bar=0.5), 0.0), TimeGrid(0.0, 1.0, 10))
    assert np.all(solution.Pi[:-1] > solution.P[:-1])
    assert solution.cross_coefficient(0) == pytest.approx(solution.Pi[0] - solution.P[0])


def test_non_quadratic_models_have_no_oracle():
    from mfc.model import mean_interaction, quadratic_plus_gaussian
    from mfc.oracle import lq_params_from

    with pytest.raises(ValueError):
        lq_params_from(mean_interaction(kappa=0.2), 0.3)
    with pytest.raises(ValueError):
        lq_params_from(quadratic_plus_gaussian(), 0.3)


def test_oracle_costate_splits_mean_and_deviation():
    from mfc.core import TimeGrid
    from mfc.oracle import LQParams, RiccatiSolution

    grid = TimeGrid(0.0, 1.0, 1)
    solution = RiccatiSolution(LQParams(q=0.0, q_T=0.0, r=2.0, eta=np.eye(1)), grid,
                               P=np.array([1.0, 1.0]), Pi=np.array([3.0, 3.0]), offset=np.zeros(2))
    Y = np.array([[[0.0]], [[2.0]]])
    # mean 1: P (Y - 1) + Pi 1
    assert solution.costate(0, Y)[:, 0, 0].tolist() == pytest.approx([2.0, 4.0])
    assert solution.feedback(0, Y)[:, 0, 0].tolist() == pytest.approx([-1.0, -2.0])


def test_fd_gradient_of_a_zero_direction_is_zero():
    from mfc.core import TimeGrid, gaussian_atoms
    from mfc.fbsde import make_problem
    from mfc.model import lq_scalar
    from mfc.oracle import fd_gradient_oracle

    problem = make_problem(lq_scalar(), 0.3, TimeGrid(0.0, 1.0, 5), gaussian_atoms(3, 1), K=4)
    control = np.ones(problem.control_shape)
    assert fd_gradient_oracle(problem, control, np.zeros(problem.control_shape), 1e-3) == 0.0


def test_richardson_is_exact_for_quadratic_objectives():
    from mfc.core import TimeGrid, gaussian_atoms
    from mfc.fbsde import make_problem, random_control
    from mfc.model import lq_scalar
    from mfc.oracle import fd_gradient_oracle, richardson_gradient

    problem = make_problem(lq_scalar(), 0.3, TimeGrid(0.0, 1.0, 5), gaussian_atoms(3, 1), K=4)
    control = random_control(problem, 0, scenario_constant=False)
    psi = random_control(problem, 1)
    central = fd_gradient_oracle(problem, control, psi, 1e-2)
    assert richardson_gradient(problem, control, psi) == pytest.approx(central, rel=1e-7)
