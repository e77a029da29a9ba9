import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st


def test_time_grid_nodes_and_tail():
    from mfc.core import TimeGrid

    grid = TimeGrid(0.0, 1.0, 4)
    assert grid.dt == pytest.approx(0.25)
    assert grid.nodes.tolist() == pytest.approx([0.0, 0.25, 0.5, 0.75, 1.0])
    assert grid.index_of(0.5) == 2

    tail = grid.tail(2)
    assert (tail.t0, tail.T, tail.N) == (0.5, 1.0, 2)
    assert tail.dt == pytest.approx(grid.dt)


def test_time_grid_rejects_bad_input():
    from mfc.core import TimeGrid

    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 4)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 4).index_of(0.3)


def test_brownian_paths_are_seeded_and_scaled():
    from mfc.core import TimeGrid, brownian_paths

    grid = TimeGrid(0.0, 1.0, 200)
    a = brownian_paths(grid, seed=7, K=500, n=1)
    b = brownian_paths(grid, seed=7, K=500, n=1)
    assert np.array_equal(a.increments, b.increments)
    assert a.increments.shape == (200, 500, 1)
    # variance dt per step
    assert np.var(a.increments) == pytest.approx(grid.dt, rel=0.05)
    with pytest.raises(ValueError):
        a.increments[0, 0, 0] = 1.0


def test_antithetic_pairs_cancel():
    from mfc.core import TimeGrid, brownian_paths

    noise = brownian_paths(TimeGrid(0.0, 1.0, 10), seed=3, K=6, n=2, antithetic=True)
    assert np.allclose(noise.increments[:, :3] + noise.increments[:, 3:], 0.0)


def test_random_field_checks_shape_and_adaptedness():
    from mfc.core import RandomField
    from mfc.errors import AdaptednessError, ShapeMismatchError

    with pytest.raises(ShapeMismatchError):
        RandomField(np.zeros((3, 2)))
    with pytest.raises(AdaptednessError):
        RandomField(np.zeros((3, 2, 1)), time_index=1, adapted_to=2)
    with pytest.raises(ValueError):
        RandomField(np.full((3, 2, 1), np.nan))


def test_hm_inner_is_an_ensemble_average():
    from mfc.core import hm_inner, hm_norm, identity_field

    field = identity_field(np.array([[1.0], [3.0]]), K=4)
    assert hm_inner(field, field) == pytest.approx(5.0)
    assert hm_norm(field) == pytest.approx(np.sqrt(5.0))


def test_pushforward_and_moments():
    from mfc.core import identity_field, pushforward

    mu = pushforward(identity_field(np.array([[-1.0], [1.0]]), K=3))
    assert mu.size == 6
    assert mu.mean() == pytest.approx([0.0])
    assert mu.second_moment() == pytest.approx(1.0)
    assert mu.merged().size == 2


def test_empirical_measure_validates_weights():
    from mfc.core import EmpiricalMeasure

    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((2, 1)), np.array([0.7, 0.7]))
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((2, 1)), np.array([1.5, -0.5]))


def test_mixture_weights():
    from mfc.core import EmpiricalMeasure

    mu = EmpiricalMeasure.uniform(np.array([[0.0], [2.0]]))
    delta = EmpiricalMeasure.uniform(np.array([[10.0]]))
    mixed = mu.mixture(delta, 0.1)
    assert mixed.mean() == pytest.approx([0.9 * 1.0 + 0.1 * 10.0])


def test_w2_of_translation_is_the_shift():
    from mfc.core import EmpiricalMeasure, w2_1d

    points = np.random.default_rng(0).standard_normal((50, 1))
    mu = EmpiricalMeasure.uniform(points)
    nu = EmpiricalMeasure.uniform(points + 0.3)
    assert w2_1d(mu, nu) == pytest.approx(0.3, rel=1e-10)


def test_w2_between_two_point_measures():
    from mfc.core import EmpiricalMeasure, w2_1d

    mu = EmpiricalMeasure.uniform(np.array([[0.0], [2.0]]))
    nu = EmpiricalMeasure.uniform(np.array([[1.0], [3.0]]))
    assert w2_1d(mu, nu) == pytest.approx(1.0, rel=1e-12)
    assert w2_1d(mu, mu) == 0.0


def test_w2_rejects_higher_dimensions():
    from mfc.core import EmpiricalMeasure, w2_1d
    from mfc.errors import DimensionError

    mu = EmpiricalMeasure.uniform(np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        w2_1d(mu, mu)


def test_quantile_atoms_are_symmetric():
    from mfc.core import gaussian_atoms

    atoms = gaussian_atoms(40, 1, std=2.0, method='quantile')
    assert np.mean(atoms) == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(np.sort(atoms[:, 0]), -np.sort(atoms[:, 0])[::-1])


@settings(max_examples=25, deadline=None)
@given(shift=st.floats(-5, 5), scale=st.floats(0.1, 3.0))
def test_w2_matches_gaussian_formula_on_quantile_atoms(shift, scale):
    from mfc.core import EmpiricalMeasure, gaussian_atoms, w2_1d

    base = gaussian_atoms(64, 1, method='quantile')
    mu = EmpiricalMeasure.uniform(base)
    nu = EmpiricalMeasure.uniform(shift + scale * base)
    spread = float(np.sqrt(np.mean(base ** 2)))
    expected = np.sqrt(shift ** 2 + ((scale - 1.0) * spread) ** 2)
    assert w2_1d(mu, nu) == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_field_process_norms():
    from mfc.core import FieldProcess

    values = np.ones((3, 2, 2, 1))
    values[1] *= 2.0
    process = FieldProcess(values)
    assert process.node_norms().tolist() == pytest.approx([1.0, 2.0, 1.0])
    assert process.sup_norm() == pytest.approx(2.0)
    assert process.at(1).time_index == 1


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_hm_inner_is_bilinear_and_bounded(seed, a, b):
    from mfc.core import hm_inner, hm_norm

    rng = np.random.default_rng(seed)
    X, Y, W = rng.standard_normal((3, 4, 5, 2))
    combined = hm_inner(a * X + b * Y, W)
    assert combined == pytest.approx(a * hm_inner(X, W) + b * hm_inner(Y, W), rel=1e-9, abs=1e-9)
    assert abs(hm_inner(X, Y)) <= hm_norm(X) * hm_norm(Y) + 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_w2_satisfies_the_triangle_inequality(seed):
    from mfc.core import EmpiricalMeasure, w2_1d

    rng = np.random.default_rng(seed)
    mu, nu, rho = (EmpiricalMeasure(rng.standard_normal((size, 1)), rng.dirichlet(np.ones(size)))
                   for size in (3, 5, 4))
    assert w2_1d(mu, rho) <= w2_1d(mu, nu) + w2_1d(nu, rho) + 1e-9
    assert w2_1d(mu, nu) == pytest.approx(w2_1d(nu, mu), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_pushforward_integrates_as_an_ensemble_average(seed):
    from mfc.core import pushforward

    values = np.random.default_rng(seed).standard_normal((3, 4, 2))
    measure = pushforward(values)
    integral = measure.integrate(lambda p: np.sin(p[:, 0]) * p[:, 1])
    assert float(integral) == pytest.approx(float(np.mean(np.sin(values[..., 0]) * values[..., 1])), abs=1e-12)
