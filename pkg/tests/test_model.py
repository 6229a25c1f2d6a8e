"""Marginal likelihood, posterior moments, and gradient checks."""

import numpy as np
import pytest

from sblreg.exceptions import ConditioningError, InvalidInputError
from sblreg.model import (
    Dataset,
    HyperParams,
    beta_from_gamma,
    likelihood_gradient_coordinate,
    log_marginal_likelihood,
    log_marginal_likelihood_dense,
    posterior_moments,
)


def _random_instance(rng, n, p, k):
    X = rng.standard_normal((n, p))
    y = rng.standard_normal(n)
    gamma = np.zeros(p)
    active = rng.choice(p, size=k, replace=False)
    gamma[active] = rng.uniform(0.1, 5.0, size=k)
    sigma2 = float(rng.uniform(0.3, 3.0))
    return Dataset(y=y, X=X), HyperParams(gamma=gamma, sigma2=sigma2)


def test_likelihood_all_zero_gamma():
    # C = I_2, so ell = -0.5 * (log 1 + ||y||^2) = -0.5 * 9.25
    data = Dataset(y=np.array([3.0, 0.5]), X=np.eye(2))
    hp = HyperParams(gamma=np.zeros(2), sigma2=1.0)
    assert abs(log_marginal_likelihood(data, hp) - (-4.625)) < 1e-12


def test_likelihood_single_active_column():
    # C = diag(9, 1): ell = -0.5 (log 9 + 9/9 + 0.25/1)
    data = Dataset(y=np.array([3.0, 0.5]), X=np.eye(2))
    hp = HyperParams(gamma=np.array([8.0, 0.0]), sigma2=1.0)
    expected = -1.7236122886681098
    assert abs(log_marginal_likelihood(data, hp) - expected) < 1e-12
    assert abs(log_marginal_likelihood_dense(data, hp) - expected) < 1e-12


def test_likelihood_matches_dense_oracle():
    rng = np.random.default_rng(11)
    for _ in range(40):
        n = int(rng.integers(4, 64))
        p = int(rng.integers(2, 40))
        k = int(rng.integers(0, min(n, p) + 1))
        data, hp = _random_instance(rng, n, p, k)
        fast = log_marginal_likelihood(data, hp)
        dense = log_marginal_likelihood_dense(data, hp)
        assert abs(fast - dense) <= 1e-10 * (1.0 + abs(dense))


def test_likelihood_dense_route_when_active_exceeds_n():
    rng = np.random.default_rng(12)
    data, hp = _random_instance(rng, 8, 20, 15)
    fast = log_marginal_likelihood(data, hp)
    dense = log_marginal_likelihood_dense(data, hp)
    assert abs(fast - dense) <= 1e-10 * (1.0 + abs(dense))


def test_likelihood_permutation_invariance():
    rng = np.random.default_rng(21)
    for _ in range(10):
        data, hp = _random_instance(rng, 16, 10, 5)
        perm = rng.permutation(10)
        data_p = Dataset(y=data.y, X=data.X[:, perm])
        hp_p = HyperParams(gamma=hp.gamma[perm], sigma2=hp.sigma2)
        a = log_marginal_likelihood(data, hp)
        b = log_marginal_likelihood(data_p, hp_p)
        assert abs(a - b) <= 1e-10 * (1.0 + abs(a))


def test_posterior_moments_single_active():
    data = Dataset(y=np.array([3.0, 0.5]), X=np.eye(2))
    hp = HyperParams(gamma=np.array([8.0, 0.0]), sigma2=1.0)
    post = posterior_moments(data, hp)
    assert post.support.tolist() == [0]
    assert abs(post.mu[0] - 8.0 / 3.0) < 1e-12
    assert abs(post.v[0, 0] - 8.0 / 9.0) < 1e-12
    beta = beta_from_gamma(data, hp)
    assert abs(beta[0] - 8.0 / 3.0) < 1e-12
    assert beta[1] == 0.0


def test_posterior_moments_empty_support():
    data = Dataset(y=np.array([3.0, 0.5]), X=np.eye(2))
    hp = HyperParams(gamma=np.zeros(2), sigma2=1.0)
    post = posterior_moments(data, hp)
    assert post.support.size == 0
    assert np.array_equal(beta_from_gamma(data, hp), np.zeros(2))


def test_posterior_covariance_inverts_regularized_gram():
    rng = np.random.default_rng(31)
    for _ in range(10):
        data, hp = _random_instance(rng, 24, 12, 6)
        post = posterior_moments(data, hp)
        xa = data.X[:, post.support]
        prec = xa.T @ xa + hp.sigma2 * np.diag(1.0 / hp.gamma[post.support])
        err = np.max(np.abs(post.v @ prec - np.eye(post.support.size)))
        assert err <= 1e-10


def test_posterior_diagonal_under_orthogonal_design():
    rng = np.random.default_rng(32)
    q, _ = np.linalg.qr(rng.standard_normal((12, 4)))
    X = q * np.array([1.0, 2.0, 0.5, 1.5])  # distinct column norms
    y = rng.standard_normal(12)
    data = Dataset(y=y, X=X)
    hp = HyperParams(gamma=np.array([2.0, 1.0, 0.0, 3.0]), sigma2=0.7)
    post = posterior_moments(data, hp)
    col_sq = np.sum(X ** 2, axis=0)[post.support]
    expected = np.diag(1.0 / (col_sq + hp.sigma2 / hp.gamma[post.support]))
    assert np.max(np.abs(post.v - expected)) <= 1e-10


def test_beta_permutation_equivariance():
    rng = np.random.default_rng(33)
    data, hp = _random_instance(rng, 16, 9, 4)
    perm = rng.permutation(9)
    beta = beta_from_gamma(data, hp)
    beta_p = beta_from_gamma(
        Dataset(y=data.y, X=data.X[:, perm]),
        HyperParams(gamma=hp.gamma[perm], sigma2=hp.sigma2),
    )
    assert np.max(np.abs(beta_p - beta[perm])) <= 1e-10


def test_gradient_at_zero_gamma():
    # C_j = I, <x_j, y> = 3, unit column: 0.5 (9 - 0 - 1) = 4
    data = Dataset(y=np.array([3.0, 0.5]), X=np.eye(2))
    hp = HyperParams(gamma=np.zeros(2), sigma2=1.0)
    assert abs(likelihood_gradient_coordinate(data, hp, 0) - 4.0) < 1e-12


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(41)
    for _ in range(50):
        n = int(rng.integers(6, 32))
        p = int(rng.integers(2, 16))
        k = int(rng.integers(0, min(n, p) + 1))
        data, hp = _random_instance(rng, n, p, k)
        j = int(rng.integers(p))
        g = likelihood_gradient_coordinate(data, hp, j)
        h = 1e-5 * (1.0 + hp.gamma[j])

        def ell(value):
            gamma = hp.gamma.copy()
            gamma[j] = value
            return log_marginal_likelihood(
                data, HyperParams(gamma=gamma, sigma2=hp.sigma2)
            )

        g_j = float(hp.gamma[j])
        if g_j >= h:
            fd = (ell(g_j + h) - ell(g_j - h)) / (2.0 * h)
        else:
            # one-sided second-order stencil at the gamma_j >= 0 boundary
            fd = (-3.0 * ell(g_j) + 4.0 * ell(g_j + h) - ell(g_j + 2.0 * h)) / (2.0 * h)
        assert abs(g - fd) <= 1e-5 * (1.0 + abs(g))


def test_gradient_negative_for_zero_response():
    rng = np.random.default_rng(42)
    X = rng.standard_normal((10, 4))
    data = Dataset(y=np.zeros(10), X=X)
    hp = HyperParams(gamma=np.array([0.5, 0.0, 1.0, 0.0]), sigma2=1.0)
    for j in range(4):
        assert likelihood_gradient_coordinate(data, hp, j) < 0.0


def test_gradient_vanishes_at_orthogonal_optimum():
    from sblreg.em import orthogonal_closed_form

    rng = np.random.default_rng(43)
    q, _ = np.linalg.qr(rng.standard_normal((20, 6)))
    X = q * np.sqrt(20.0)
    y = X[:, :2] @ np.array([3.0, -2.5]) + 0.1 * rng.standard_normal(20)
    data = Dataset(y=y, X=X)
    gamma = orthogonal_closed_form(data, sigma2=1.0)
    hp = HyperParams(gamma=gamma, sigma2=1.0)
    for j in np.flatnonzero(gamma):
        assert abs(likelihood_gradient_coordinate(data, hp, int(j))) <= 1e-9


def test_dataset_validation_errors():
    with pytest.raises(InvalidInputError, match="3 rows.*2|2.*3"):
        Dataset(y=np.zeros(2), X=np.zeros((3, 1)) + 1.0)
    with pytest.raises(InvalidInputError, match="column"):
        Dataset(y=np.ones(3), X=np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]))
    with pytest.raises(InvalidInputError):
        Dataset(y=np.array([1.0, np.nan]), X=np.ones((2, 1)))


def test_hyperparams_validation_errors():
    with pytest.raises(InvalidInputError, match="negative"):
        HyperParams(gamma=np.array([1.0, -0.1]), sigma2=1.0)
    with pytest.raises(InvalidInputError, match="sigma2"):
        HyperParams(gamma=np.ones(2), sigma2=0.0)
    with pytest.raises(InvalidInputError):
        HyperParams(gamma=np.ones(2), sigma2=float("inf"))


def test_conditioning_error_reports_pivot():
    # duplicate columns with gamma so large that sigma2/gamma underflows:
    # the posterior precision becomes numerically singular
    x = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    data = Dataset(y=np.ones(3), X=x)
    hp = HyperParams(gamma=np.array([1e308, 1e308]), sigma2=1.0)
    with pytest.raises(ConditioningError) as info:
        posterior_moments(data, hp)
    assert isinstance(info.value.pivot, int)
    assert info.value.pivot >= 0
