import numpy as np
import pytest


def _solved(model_name='mean_interaction', M=20, K=1, N=50, eta=0.0, seed=0, **params):
    from mfc.core import TimeGrid, gaussian_atoms
    from mfc.fbsde import SolverSettings, make_problem, solve_optimal
    from mfc.model import build_model

    model = build_model(model_name, 1, params)
    problem = make_problem(model, eta, TimeGrid(0.0, 1.0, N), gaussian_atoms(M, 1, seed=seed), K, seed=seed + 1)
    return solve_optimal(problem, settings=SolverSettings.from_defaults(tol=1e-10))


def test_mean_interaction_costate_response_matches_riccati():
    from mfc.lfd import solve_lfd_flow
    from mfc.oracle import riccati_for

    quad = _solved(N=200)
    riccati = riccati_for(quad.problem)
    x = 1.5
    solution = solve_lfd_flow(quad, [x], normalized=True)
    # at t0 only the population mean moves, by x minus the current mean
    response = solution.dZ_dnu.values[0][..., 0]
    expected = riccati.cross_coefficient(0) * (x - float(np.mean(quad.problem.x0.values)))
    assert np.allclose(response, expected, rtol=0.02)
    assert not np.any(solution.dY_dnu.values[0])


def test_normalized_flow_differs_from_raw_by_a_probe_independent_flow():
    from mfc.jacobian import freeze_coefficients
    from mfc.lfd import solve_lfd_flow

    quad = _solved(M=10, N=20)
    coeffs = freeze_coefficients(quad)
    gaps = []
    for x in ([-1.0], [0.7]):
        raw = solve_lfd_flow(quad, x, coeffs=coeffs)
        normalized = solve_lfd_flow(quad, x, coeffs=coeffs, normalized=True)
        assert normalized.normalized and not raw.normalized
        gaps.append(raw.dZ_dnu.values - normalized.dZ_dnu.values)
    assert np.allclose(gaps[0], gaps[1], atol=1e-6)


def test_source_scale_acts_linearly():
    from mfc.jacobian import freeze_coefficients
    from mfc.lfd import solve_lfd_flow

    quad = _solved(M=10, N=20)
    coeffs = freeze_coefficients(quad)
    single = solve_lfd_flow(quad, [0.5], coeffs=coeffs)
    double = solve_lfd_flow(quad, [0.5], coeffs=coeffs, source_scale=2.0)
    assert np.allclose(double.dZ_dnu.values, 2.0 * single.dZ_dnu.values, rtol=1e-5, atol=1e-7)


def test_non_interacting_models_have_no_measure_response():
    from mfc.lfd import solve_lfd_flow

    quad = _solved('lq_scalar', M=5, N=10)
    solution = solve_lfd_flow(quad, [2.0])
    assert np.allclose(solution.dZ_dnu.values, 0.0)
    assert solution.bound_ratio() == pytest.approx(0.0, abs=1e-20)


def test_delta1_gate_blocks_strong_mean_field_terms():
    from mfc.core import TimeGrid, gaussian_atoms
    from mfc.errors import AssumptionGateError
    from mfc.fbsde import make_problem
    from mfc.lfd import require_delta1
    from mfc.model import lq_scalar

    grid = TimeGrid(0.0, 1.0, 10)
    assert require_delta1(make_problem(lq_scalar(), 0.0, grid, gaussian_atoms(3, 1), 1)) == pytest.approx(50 / 101)
    with pytest.raises(AssumptionGateError):
        require_delta1(make_problem(lq_scalar(lam_bar=10.0), 0.0, grid, gaussian_atoms(3, 1), 1))


def test_probe_points_must_match_the_state_dimension():
    from mfc.errors import ShapeMismatchError
    from mfc.lfd import solve_lfd_flow

    quad = _solved(M=3, N=5)
    with pytest.raises(ShapeMismatchError):
        solve_lfd_flow(quad, [0.0, 1.0])


def test_gradient_flow_needs_third_derivatives():
    from mfc.core import TimeGrid, gaussian_atoms
    from mfc.errors import MissingDerivativeError
    from mfc.fbsde import make_problem, solve_optimal
    from mfc.lfd import solve_grad_lfd_flow
    from mfc.model import QuadraticCostModel

    class NoThirdDerivatives(QuadraticCostModel):
        def has_third_derivatives(self):
            return False

    model = NoThirdDerivatives(1, r=1.0, q=1.0, q_T=1.0)
    quad = solve_optimal(make_problem(model, 0.0, TimeGrid(0.0, 1.0, 5), gaussian_atoms(3, 1), 1))
    with pytest.raises(MissingDerivativeError):
        solve_grad_lfd_flow(quad, [0.0])


def test_gradient_flow_rejects_normalized_input():
    from mfc.lfd import solve_grad_lfd_flow, solve_lfd_flow

    quad = _solved(M=4, N=10)
    normalized = solve_lfd_flow(quad, [0.3], normalized=True)
    with pytest.raises(ValueError):
        solve_grad_lfd_flow(quad, [0.3], lfd=normalized)


def test_gradient_flow_vanishes_for_mean_interaction():
    from mfc.lfd import solve_grad_lfd_flow

    # the dnu-flow of a quadratic mean interaction does not depend on the base atom
    quad = _solved(M=6, N=20)
    gradient = solve_grad_lfd_flow(quad, [1.0])
    assert gradient.gradient_mode
    assert gradient.dZ_dnu.values.shape == (21, 6, 1, 1, 1)
    assert np.allclose(gradient.dZ_dnu.values, 0.0, atol=1e-8)


def test_value_derivative_of_zero_cost_vanishes():
    from mfc.lfd import value_lfd

    quad = _solved('zero_cost', M=5, K=3, N=10, eta=0.3)
    value = value_lfd(quad, [1.0])
    assert value.raw == 0.0
    assert value.normalized == 0.0
    assert np.allclose(value.grad, 0.0)
    assert value.to_record() == {'x': [1.0], 'raw': 0.0, 'normalized': 0.0, 'grad': [0.0]}


def test_value_derivative_gradient_is_the_probe_costate():
    from mfc.lfd import value_lfd
    from mfc.oracle import riccati_for

    quad = _solved('lq_scalar', M=10, N=200)
    value = value_lfd(quad, [0.8])
    assert value.grad[0] == pytest.approx(riccati_for(quad.problem).P[0] * 0.8, rel=0.02)


def test_value_derivative_matches_measure_perturbations():
    from mfc.lfd import measure_perturbation_check

    quad = _solved(M=20, N=50)
    report = measure_perturbation_check(quad, [0.5])
    assert report['eps'] == pytest.approx([1 / 21, 2 / 22])
    assert report['discrepancy'] <= 0.05


def test_fitted_bound_constant_is_the_worst_probe():
    from mfc.lfd import fitted_bound_constant, solve_lfd_probes

    quad = _solved(M=8, N=20)
    flows = solve_lfd_probes(quad, [[-1.0], [0.0], [2.0]], threads=2)
    assert [flow.x.tolist() for flow in flows] == [[-1.0], [0.0], [2.0]]
    assert fitted_bound_constant(flows) == max(flow.bound_ratio() for flow in flows)
    assert all(np.isfinite(flow.bound_ratio()) for flow in flows)


def test_passive_atom_on_a_base_atom_reproduces_its_flow():
    from mfc.lfd import passive_lfd_flow, solve_lfd_flow

    quad = _solved(M=10, N=20, kappa=0.3, s_bar=0.1)
    lfd = solve_lfd_flow(quad, [0.5])
    passive = passive_lfd_flow(quad, lfd, quad.problem.x0.values[3, 0])
    assert passive.dZ_dnu.values.shape == (21, 1, 1, 1)
    assert np.allclose(passive.dZ_dnu.values[:, 0], lfd.dZ_dnu.values[:, 3], atol=1e-6)
    assert np.allclose(passive.dY_dnu.values[:, 0], lfd.dY_dnu.values[:, 3], atol=1e-6)


def test_xi_gradient_matches_forward_differences_of_the_passive_flow(monkeypatch):
    from mfc.lfd import solve_grad_lfd_flow, solve_lfd_flow, xi_difference_check

    monkeypatch.setenv('MFC_FLOW_TOL', '1e-12')
    monkeypatch.setenv('MFC_FLOW_MAX_ITERS', '2000')
    quad = _solved(M=10, N=20, kappa=0.3, s_bar=0.1)
    lfd = solve_lfd_flow(quad, [0.5])
    gradient = solve_grad_lfd_flow(quad, [0.5], lfd=lfd)
    assert np.max(np.abs(gradient.dZ_dnu.values[0])) > 1e-6

    report = xi_difference_check(quad, lfd, gradient, atom=2, steps=(1e-2, 5e-3, 2.5e-3))
    assert report['errors'][0] <= 1e-3
    assert all(0.4 <= ratio <= 0.6 for ratio in report['ratios'])
