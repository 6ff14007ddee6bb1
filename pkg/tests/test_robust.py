import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from geohead.robust import NonConvergenceError, em_two_gaussians_uniform, levenberg_marquardt


def rosenbrock(x):
    return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])


def test_lm_rosenbrock():
    res = levenberg_marquardt(rosenbrock, [-1.2, 1.0], max_iter=200)
    assert res.converged
    assert_allclose(res.x, [1.0, 1.0], atol=1e-6)
    assert res.cost < 1e-12


def test_lm_linear_least_squares_matches_lstsq():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(30, 4))
    b = rng.normal(size=30)
    res = levenberg_marquardt(lambda x: A @ x - b, np.zeros(4), jac=lambda x: A)
    assert_allclose(res.x, np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-8)


def test_lm_at_optimum_stays():
    res = levenberg_marquardt(lambda x: x - 3.0, [3.0])
    assert res.converged and res.cost == 0.0
    assert_allclose(res.x, [3.0])


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_lm_never_increases_cost(a, b):
    res = levenberg_marquardt(rosenbrock, [a, b], max_iter=5)
    assert res.cost <= res.initial_cost


def test_em_separates_two_gaussians():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(5.0, 0.05, 600), rng.normal(3.4, 0.2, 300), rng.uniform(0, 8, 100)])
    fit = em_two_gaussians_uniform(x)
    assert fit.converged
    order = np.argsort(fit.means)[::-1]
    assert_allclose(fit.means[order], [5.0, 3.4], atol=0.05)
    assert_allclose(fit.stds[order], [0.05, 0.2], rtol=0.2)
    assert_allclose(fit.weights.sum(), 1.0)
    assert_allclose(fit.posteriors.sum(axis=1), 1.0)


def test_em_loglik_monotone():
    rng = np.random.default_rng(2)
    x = np.concatenate([rng.normal(1.0, 0.1, 200), rng.normal(2.0, 0.3, 100)])
    ll = np.array(em_two_gaussians_uniform(x).loglik)
    assert np.all(np.diff(ll) >= -1e-8 * np.abs(ll[1:]))


def test_em_support_widens_uniform():
    x = np.random.default_rng(1).normal(5.0, 0.03, 200)
    narrow = em_two_gaussians_uniform(x)
    wide = em_two_gaussians_uniform(x, support=(0.0, x.max()))
    assert wide.weights[2] < narrow.weights[2]


def test_em_non_convergence_carries_fit():
    x = np.random.default_rng(4).uniform(0, 10, 300)
    with pytest.raises(NonConvergenceError) as e:
        em_two_gaussians_uniform(x, max_iter=2)
    assert e.value.best is not None and e.value.best.iterations == 2
