import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cqlflow.divergence import (Categorical, DiagGaussian, SupportError, d_cql, kl_categorical,
                                kl_gauss_to_std, kl_gauss_to_std_grad, log_softmax, log_sum_exp,
                                softmax)

from conftest import numeric_grad, rel_err

finite = st.floats(-50, 50, allow_nan=False)


def simplex(n, seed):
    return np.random.default_rng(seed).dirichlet(np.ones(n))


@given(st.integers(2, 8), st.integers(0, 10_000), st.integers(0, 10_000))
def test_d_cql_nonnegative_zero_iff_equal(n, s1, s2):
    p, q = simplex(n, s1), simplex(n, s2)
    assert d_cql(p, q) >= -1e-12
    assert d_cql(p, p) == pytest.approx(0.0, abs=1e-12)
    if np.max(np.abs(p - q)) > 1e-3:
        assert d_cql(p, q) > 0


def test_d_cql_known_value():
    # sum p^2/q - 1 = 0.25/0.5*2 - 1 = 0 ; and a skewed case by hand
    assert d_cql([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert d_cql([0.8, 0.2], [0.5, 0.5]) == pytest.approx(0.64 / 0.5 + 0.04 / 0.5 - 1.0, abs=1e-15)


def test_support_violation_raises():
    with pytest.raises(SupportError):
        d_cql([0.5, 0.5], [1.0, 0.0])
    with pytest.raises(SupportError):
        kl_categorical([0.5, 0.5], [1.0, 0.0])
    assert kl_categorical([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2))


def test_invalid_distributions_rejected():
    with pytest.raises(ValueError):
        Categorical([0.6, 0.6])
    with pytest.raises(ValueError):
        Categorical([])
    with pytest.raises(ValueError):
        DiagGaussian([0.0], [0.0])
    with pytest.raises(ValueError):
        DiagGaussian([0.0, 1.0], [1.0])


@pytest.mark.parametrize("seed", range(5))
def test_kl_categorical_matches_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
    x = rng.choice(5, size=100_000, p=p)
    samples = np.log(p[x]) - np.log(q[x])
    se = samples.std(ddof=1) / np.sqrt(samples.size)
    assert abs(samples.mean() - kl_categorical(p, q)) < 3 * se


@pytest.mark.parametrize("seed", range(5))
def test_kl_gauss_matches_monte_carlo(seed):
    rng = np.random.default_rng(100 + seed)
    mean = rng.normal(size=3)
    var = np.exp(rng.normal(scale=0.5, size=3))
    z = mean + np.sqrt(var) * rng.standard_normal((100_000, 3))
    log_q = -0.5 * np.sum((z - mean) ** 2 / var + np.log(2 * np.pi * var), axis=1)
    log_p = -0.5 * np.sum(z * z + np.log(2 * np.pi), axis=1)
    samples = log_q - log_p
    se = samples.std(ddof=1) / np.sqrt(samples.size)
    assert abs(samples.mean() - kl_gauss_to_std(DiagGaussian(mean, var))) < 3 * se


@given(arrays(float, 4, elements=st.floats(-3, 3)), arrays(float, 4, elements=st.floats(-3, 3)))
@settings(max_examples=50)
def test_kl_gauss_gradient_finite_differences(mean, logvar):
    mean, logvar = mean.copy(), logvar.copy()
    gm, gv = kl_gauss_to_std_grad(mean, logvar)
    f = lambda: kl_gauss_to_std(DiagGaussian.from_logvar(mean, logvar))  # noqa: E731
    num = np.r_[numeric_grad(f, mean), numeric_grad(f, logvar)]
    assert rel_err(np.r_[gm, gv], num) < 1e-6


@given(arrays(float, st.integers(1, 20), elements=finite), st.floats(-1e3, 1e3))
def test_log_sum_exp_shift_invariance(v, c):
    assert log_sum_exp(v + c) == pytest.approx(log_sum_exp(v) + c, abs=1e-9, rel=1e-12)


def test_log_sum_exp_extremes_and_errors():
    assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000.0 + np.log(2))
    assert log_sum_exp([-1000.0]) == -1000.0
    np.testing.assert_allclose(log_sum_exp(np.zeros((3, 4)), axis=1), np.full(3, np.log(4)))
    with pytest.raises(ValueError):
        log_sum_exp([])
    with pytest.raises(ValueError):
        log_sum_exp([np.inf])


@given(arrays(float, (3, 5), elements=finite))
def test_softmax_rows_are_distributions(z):
    p = softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax(z)), p, atol=1e-12)
