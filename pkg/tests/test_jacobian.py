import numpy as np
import pytest


def _solved(model_name='lq_scalar', M=10, K=1, N=20, eta=0.0, seed=0, **params):
    from mfc.core import TimeGrid, gaussian_atoms
    from mfc.fbsde import SolverSettings, make_problem, solve_optimal
    from mfc.model import build_model

    model = build_model(model_name, 1, params)
    problem = make_problem(model, eta, TimeGrid(0.0, 1.0, N), gaussian_atoms(M, 1, seed=seed), K, seed=seed + 1)
    return solve_optimal(problem, settings=SolverSettings.from_defaults(tol=1e-10))


def _direction(M, K=1, seed=7):
    from mfc.core import atom_field

    return atom_field(np.random.default_rng(seed).standard_normal((M, 1)), K)


def test_finite_differences_are_exact_for_linear_quadratic_problems():
    from mfc.jacobian import fd_check_jacobian

    quad = _solved()
    report = fd_check_jacobian(quad.problem, _direction(10), [1e-2, 5e-3])
    assert len(report.discrepancy) == 2
    assert max(report.discrepancy) <= 1e-6


def test_zero_direction_has_zero_discrepancy():
    from mfc.core import atom_field
    from mfc.jacobian import fd_check_jacobian

    quad = _solved(M=4, N=10)
    report = fd_check_jacobian(quad.problem, atom_field(np.zeros((4, 1)), 1))
    assert report.discrepancy == [0.0, 0.0]
    assert report.ratios == [0.0]


def test_matrix_jacobian_matches_the_riccati_coefficient():
    from mfc.jacobian import matrix_jacobian
    from mfc.oracle import riccati_for

    quad = _solved(N=200)
    matrix = matrix_jacobian(quad)
    assert matrix.DZ.values.shape == (201, 10, 1, 1, 1)
    DxZ = float(np.mean(matrix.DZ.values[0][..., 0, 0]))
    P0 = riccati_for(quad.problem).P[0]
    assert DxZ == pytest.approx(P0, rel=0.02)
    assert np.allclose(matrix.DY.values[0][..., 0, 0], 1.0)


def test_directional_flow_factorizes_through_the_matrix_flow():
    from mfc.jacobian import factorization_check, freeze_coefficients, matrix_jacobian, solve_jacobian_flow

    quad = _solved()
    coeffs = freeze_coefficients(quad)
    directional = solve_jacobian_flow(quad, _direction(10), coeffs)
    matrix = matrix_jacobian(quad, coeffs)
    assert factorization_check(directional, matrix) <= 1e-6


def test_second_derivative_is_symmetric_and_positive():
    from mfc.core import hm_norm
    from mfc.jacobian import convexity_floor, freeze_coefficients, symmetry_check

    quad = _solved('mean_interaction', M=8, N=20)
    coeffs = freeze_coefficients(quad)
    psi, phi = _direction(8, seed=1), _direction(8, seed=2)
    assert symmetry_check(quad, psi, phi, coeffs) <= 1e-2 * hm_norm(psi) * hm_norm(phi)
    assert convexity_floor(quad, psi, coeffs) > 0.0


def test_flow_satisfies_the_linearized_first_order_condition():
    from mfc.jacobian import first_order_flow_residual, jacobian_bounds, solve_jacobian_flow

    quad = _solved('mean_interaction', M=8, N=20)
    solution = solve_jacobian_flow(quad, _direction(8))
    assert first_order_flow_residual(quad, solution) <= 1e-6
    bounds = jacobian_bounds(solution)
    assert set(bounds) == {'C_DY', 'C_DZ', 'C_Du'}
    assert bounds['C_DY'] >= 1.0 - 1e-12


def test_picard_limit_does_not_depend_on_the_initial_guess():
    from mfc.jacobian import uniqueness_check

    quad = _solved('mean_interaction', M=6, K=5, N=10, eta=0.3)
    assert uniqueness_check(quad, _direction(6, K=5)) <= 1e-8


def test_noise_dependent_directions_are_rejected():
    from mfc.core import RandomField
    from mfc.jacobian import solve_jacobian_flow

    quad = _solved(M=3, K=6, N=5, eta=0.3)
    values = np.random.default_rng(0).standard_normal((3, 6, 1))
    with pytest.raises(ValueError):
        solve_jacobian_flow(quad, RandomField(values, time_index=0, adapted_to=0))


def test_matrix_flow_respects_the_memory_cap(monkeypatch):
    from mfc.errors import MfcError
    from mfc.jacobian import matrix_jacobian

    quad = _solved(M=3, N=5)
    monkeypatch.setenv('MFC_FLOW_MAX_MATRIX_ENTRIES', '10')
    with pytest.raises(MfcError):
        matrix_jacobian(quad)
