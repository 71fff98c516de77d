import math
import warnings

import numpy as np
import pytest

from histmatch.design import latin_hypercube, space_filling
from histmatch.emulator import (
    Emulator,
    EmulatorConfig,
    FactorizationError,
    basis_matrix,
    bl_adjust,
    correlation,
    effective_degree,
    emulate,
    fit_emulator,
    fit_regression,
    monomial_exponents,
    predict_many,
    select_active,
    theta_rule,
)
from histmatch.simulators import default_toy, toy_simulate


def dense_adjust(prior_mean, prior_cov, cross, data_cov, data_mean, data):
    Vi = np.linalg.inv(data_cov)
    return prior_mean + cross @ Vi @ (data - data_mean), prior_cov - cross @ Vi @ cross.T


# --- bl_adjust ---

def test_scalar_substitution():
    m, v = bl_adjust([0.0], [[1.0]], [[1.0]], [[2.0]], [0.0], [2.0])
    assert m[0] == pytest.approx(1.0, abs=1e-15)
    assert v[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_zero_cross_cov_returns_prior(rng):
    A = rng.normal(size=(3, 3))
    P = A @ A.T + np.eye(3)
    m, v = bl_adjust([1.0, 2.0, 3.0], P, np.zeros((3, 4)), np.eye(4), np.zeros(4), rng.normal(size=4))
    np.testing.assert_array_equal(m, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(v, P, atol=1e-15)


def test_non_pd_reports_pivot():
    with pytest.raises(FactorizationError) as e:
        bl_adjust([0.0], [[1.0]], [[1.0, 0.0]], np.array([[1.0, 2.0], [2.0, 1.0]]), [0, 0], [1, 1])
    assert e.value.smallest_pivot < 0
    assert "smallest pivot" in str(e.value)


def test_emulator_matches_dense_oracle_on_five_points(rng):
    X = rng.uniform(-1, 1, (5, 2))
    y = np.sin(2 * X[:, 0]) + X[:, 1] ** 2
    em = fit_emulator(X, y, EmulatorConfig(degree=0, active=(0, 1), nugget_share=0.1, theta=0.7))
    Xs = rng.uniform(-1, 1, (6, 2))
    su, sw, th = em.sigma_u2, em.sigma_w2, em.theta
    K = su * correlation(X, X, th) + sw * np.eye(5) + em.jitter * np.eye(5)
    k = su * correlation(Xs, X, th)
    trend_train = basis_matrix(X, em.exponents) @ em.coefficients
    prior_cov = su * correlation(Xs, Xs, th) + sw * np.eye(6)
    mean, cov = dense_adjust(np.zeros(6), prior_cov, k, K, np.zeros(5), y - trend_train)
    mean += basis_matrix(Xs, em.exponents) @ em.coefficients
    m, v = em.predict(Xs)
    np.testing.assert_allclose(m, mean, atol=1e-10, rtol=0)
    np.testing.assert_allclose(v, np.diag(cov), atol=1e-10, rtol=0)


# --- correlation ---

def test_correlation_spot_values():
    x = np.array([[0.1, -0.4]])
    assert correlation(x, x, 0.3)[0, 0] == 1.0
    y = x + np.array([[0.3, 0.0]])
    assert abs(correlation(x, y, 0.3)[0, 0] - math.exp(-1)) < 1e-12


def test_correlation_symmetric_and_bounded(rng):
    X = rng.uniform(-1, 1, (20, 3))
    C = correlation(X, X, 0.5)
    np.testing.assert_array_equal(C, C.T)
    assert np.all((C > 0) & (C <= 1))
    assert np.all(np.diag(C) == 1.0)


# --- regression ---

def test_linear_output_exact():
    X = latin_hypercube(60, 3, 1).points
    y = 1.0 + 2.0 * X[:, 0] - 0.5 * X[:, 2]
    fit = fit_regression(X, y, [0, 1, 2], degree=3)
    assert fit.summary.residual_sd < 1e-8
    cubic = fit.exponents.sum(axis=1) >= 2
    assert np.abs(fit.coefficients[cubic]).max() < 1e-8


def test_saturated_fit():
    X = latin_hypercube(4, 2, 3).points  # p = 3 for degree 1 in two inputs
    y = 3.0 * X[:, 0] - X[:, 1] + 0.2
    assert fit_regression(X, y, [0, 1], degree=1).summary.adjusted_r2 == pytest.approx(1.0, abs=1e-12)


def test_quadratic_truth_linear_fit_by_hand():
    x = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])[:, None]
    fit = fit_regression(x, x[:, 0] ** 2, [0], degree=1)
    # intercept = mean(x^2) = 0.5, slope = 0 by symmetry; SS_res = 0.875 over n - p = 3
    assert fit.coefficients[1] == pytest.approx(0.0, abs=1e-14)
    assert fit.coefficients[0] == pytest.approx(0.5, abs=1e-14)
    assert fit.summary.residual_sd == pytest.approx(math.sqrt(0.875 / 3), rel=1e-12)


def test_rank_deficient_warns():
    X = np.column_stack([np.linspace(-1, 1, 30), np.linspace(-1, 1, 30)])
    with pytest.warns(RuntimeWarning, match="collinear"):
        fit = fit_regression(X, X[:, 0], [0, 1], degree=1)
    assert len(fit.dropped) == 1
    assert fit.summary.residual_sd < 1e-10


def test_too_few_runs():
    with pytest.raises(ValueError):
        fit_regression(np.zeros((3, 2)), np.zeros(3), [0, 1], degree=1)


def test_basis_matrix_matches_direct_products(rng):
    X = rng.uniform(-1, 1, (9, 3))
    E = monomial_exponents(3, 3)
    direct = np.array([[np.prod(x ** e) for e in E] for x in X])
    np.testing.assert_allclose(basis_matrix(X, E), direct, rtol=1e-14, atol=1e-15)
    assert E.shape == (20, 3) and np.all(E[0] == 0)


def test_effective_degree():
    assert effective_degree(150, 5, 3) == 2  # 56 cubic terms need 168 runs
    assert effective_degree(168, 5, 3) == 3
    assert effective_degree(5, 5, 3) == 1


# --- active selection ---

def test_three_true_inputs_selected():
    c = default_toy(n_active=3)
    X = space_filling(200, 8, 4).points
    assert select_active(X, toy_simulate(X, c)[:, 5], max_active=8) == [0, 1, 2]


def test_constant_output_selects_nothing():
    X = latin_hypercube(50, 4, 2).points
    assert select_active(X, np.full(50, 3.0), max_active=4) == []


def test_single_input_is_univariate_best(rng):
    X = latin_hypercube(120, 5, 8).points
    y = 0.3 * X[:, 0] + np.sin(3 * X[:, 3]) + 0.5 * X[:, 1] ** 2 + 0.05 * rng.normal(size=120)
    chosen = select_active(X, y, max_active=1)
    deg = effective_degree(120, 1, 3)
    scores = [fit_regression(X, y, [k], deg).summary.adjusted_r2 for k in range(5)]
    assert chosen == [int(np.argmax(scores))]


def test_start_set_is_kept():
    c = default_toy(dimension=5, n_active=2)
    X = latin_hypercube(100, 5, 1).points
    y = toy_simulate(X, c)[:, 3]
    assert 4 in select_active(X, y, max_active=3, start=[4])


def test_max_active_validation():
    with pytest.raises(ValueError):
        select_active(np.zeros((10, 2)), np.zeros(10), max_active=3)


# --- emulator ---

@pytest.fixture(scope="module")
def toy_emulator():
    X = space_filling(80, 4, 1).points
    y = toy_simulate(X, default_toy(dimension=4, n_active=3))[:, 4]
    return fit_emulator(X, y, EmulatorConfig(max_active=3))


def test_interpolation_zero_nugget(rng):
    for n, d in ((30, 2), (100, 3), (200, 3)):
        X = space_filling(n, d, n).points
        y = np.sin(2 * X[:, 0]) * np.cos(X[:, 1]) + X[:, -1] ** 3
        em = fit_emulator(X, y, EmulatorConfig(nugget_share=0.0, active=tuple(range(d)), theta_multiplier=0.5))
        m, v = em.predict(X)
        assert np.abs(m - y).max() < 1e-8
        assert v.max() < 1e-10


def test_far_point_recovers_prior():
    X = latin_hypercube(30, 2, 5).points * 0.1
    y = X[:, 0] + 0.1 * np.sin(20 * X[:, 1])
    em = fit_emulator(X, y, EmulatorConfig(active=(0, 1), theta=0.01, degree=1))
    far = np.array([[0.9, -0.9]])
    m, v = em.predict(far)
    assert correlation(far, X, em.theta).max() < 1e-12
    assert v[0] == pytest.approx(em.sigma_u2 + em.sigma_w2, rel=1e-12)
    assert m[0] == pytest.approx(em.trend(far)[0], abs=1e-12)


def test_pure_nugget_variance():
    X = latin_hypercube(40, 2, 5).points
    y = X[:, 0] + 0.1 * np.sin(9 * X[:, 1])
    em = fit_emulator(X, y, EmulatorConfig(active=(0, 1), nugget_share=1.0, degree=1))
    assert em.sigma_u2 == 0.0
    _, v = em.predict(np.array([[0.5, 0.5], X[0]]))
    sigma2 = em.summary.residual_sd**2
    np.testing.assert_allclose(v, sigma2, rtol=1e-12)


def test_inactive_coordinate_has_no_effect(toy_emulator):
    em = toy_emulator
    X = np.random.default_rng(1).uniform(-1, 1, (10, 4))
    Z = X.copy()
    inactive = [k for k in range(4) if k not in em.active]
    Z[:, inactive] = -Z[:, inactive]
    a, b = em.predict(X), em.predict(Z)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_refit_is_identical():
    X = space_filling(60, 3, 2).points
    y = toy_simulate(X, default_toy(dimension=3))[:, 2]
    a = fit_emulator(X, y, EmulatorConfig(max_active=3))
    b = fit_emulator(X, y, EmulatorConfig(max_active=3))
    assert a.to_dict() == b.to_dict()


def test_save_load_bit_for_bit(toy_emulator, tmp_path):
    em = toy_emulator
    em.save(tmp_path / "e.emu")
    back = Emulator.load(tmp_path / "e.emu")
    X = np.random.default_rng(3).uniform(-1, 1, (50, 4))
    for a, b in zip(em.predict(X), back.predict(X)):
        assert np.array_equal(a, b)


def test_emulate_single_point(toy_emulator):
    em = toy_emulator
    x = np.full(4, 0.2)
    p = emulate(em, x)
    m, v = em.predict(x[None, :])
    assert (p.mean, p.variance) == (m[0], v[0])
    assert p.variance >= 0


def test_predict_many_matches_predict():
    X = space_filling(80, 4, 6).points
    Y = toy_simulate(X, default_toy(dimension=4, n_outputs=6))
    cfg = EmulatorConfig(active=(0, 1, 2))
    ems = [fit_emulator(X, Y[:, o], cfg, output_index=o) for o in range(6)]
    ems.append(fit_emulator(X, Y[:, 0], EmulatorConfig(active=(0, 1)), output_index=0))
    Xs = np.random.default_rng(2).uniform(-1, 1, (300, 4))
    M, V = predict_many(ems, Xs)
    for k, em in enumerate(ems):
        m, v = em.predict(Xs)
        np.testing.assert_allclose(M[:, k], m, rtol=1e-11, atol=1e-13)
        np.testing.assert_allclose(V[:, k], v, rtol=1e-11, atol=1e-15)


def test_more_runs_raise_adjusted_r2():
    c = default_toy(n_active=5, decay=0.75, scales=(0.1, 0.1, 1.0))
    r2 = []
    for n in (100, 200, 400):
        X = space_filling(n, 8, 12).points * 0.5
        y = toy_simulate(X, c)[:, 7]
        r2.append(fit_emulator(X, y, EmulatorConfig(max_active=5)).summary.adjusted_r2)
    assert r2[0] < r2[1] < r2[2]


def test_theta_rule():
    X = np.column_stack([np.linspace(-1, 1, 16), np.linspace(-0.5, 0.5, 16)])
    # mean side 1.5, 16 runs over 2 inputs: 2 * 1.5 / 4
    assert theta_rule(X) == pytest.approx(0.75)
    assert theta_rule(X, 0.2) == pytest.approx(0.15)


def test_config_validation():
    with pytest.raises(ValueError):
        EmulatorConfig(nugget_share=1.5)
    with pytest.raises(ValueError):
        EmulatorConfig(theta_multiplier=0)


def test_no_warnings_on_normal_fit():
    X = space_filling(100, 3, 1).points
    y = toy_simulate(X, default_toy(dimension=3))[:, 0]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit_emulator(X, y, EmulatorConfig(max_active=3))
