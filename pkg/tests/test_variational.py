import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfvi_bnn.variational import (
    FactorizedGaussianPrior,
    NeuronParams,
    ShapeError,
    VariationalPosterior,
    kl_gradient,
    kl_monte_carlo,
    kl_neuron,
    kl_per_neuron,
    kl_total,
    log_q,
    reparam_transform,
    sample_noise,
    sample_weights,
    softplus,
    softplus_grad,
    softplus_inverse,
    transform,
)

from conftest import random_posterior

finite = st.floats(-30, 30, allow_nan=False)


def test_softplus_reference_values():
    assert softplus(0.0) == pytest.approx(math.log(2), abs=1e-15)
    assert softplus(50.0) == pytest.approx(50.0, rel=1e-15)
    tiny = softplus(-50.0)
    assert tiny >= 0 and tiny == pytest.approx(math.exp(-50), rel=1e-12)
    assert np.isfinite(softplus(1e4))


@given(st.floats(-40, 40))
def test_softplus_matches_naive_formula(rho):
    assert softplus(rho) == pytest.approx(math.log1p(math.exp(rho)), rel=1e-12)


@given(st.floats(1e-8, 1e3))
def test_softplus_inverse_round_trip(sigma):
    assert softplus(softplus_inverse(sigma)) == pytest.approx(sigma, rel=1e-12)


def test_softplus_inverse_values():
    assert softplus_inverse(math.log(2)) == pytest.approx(0.0, abs=1e-15)
    assert softplus_inverse(1e-3) == pytest.approx(math.log(math.expm1(1e-3)), rel=1e-12)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_softplus_inverse_rejects_nonpositive(bad):
    with pytest.raises(ValueError):
        softplus_inverse(bad)


def test_softplus_grad_is_finite_difference_derivative():
    rho = np.linspace(-5, 5, 11)
    h = 1e-6
    numeric = (softplus(rho + h) - softplus(rho - h)) / (2 * h)
    np.testing.assert_allclose(softplus_grad(rho), numeric, rtol=1e-8)


def test_neuron_params_invariants():
    with pytest.raises(ValueError):
        NeuronParams(np.array([np.nan]), np.zeros(1), np.zeros(2), np.zeros(2))
    # softplus underflows to 0 far in the negative tail, which is not a valid scale
    with pytest.raises(ValueError):
        NeuronParams(np.zeros(1), np.array([-800.0]), np.zeros(2), np.zeros(2))
    ok = NeuronParams(np.zeros(2), np.zeros(2), np.zeros(3), np.zeros(3))
    assert ok.d_x == 3 and ok.d_y == 2


def test_reparam_zero_noise_returns_means():
    theta = NeuronParams(np.array([1.0, -2.0]), np.zeros(2), np.array([0.5, 0.0, 3.0]), np.ones(3))
    a, b = reparam_transform(theta, np.zeros(5))
    np.testing.assert_array_equal(a, theta.mu_a)
    np.testing.assert_array_equal(b, theta.mu_b)


def test_reparam_unit_scale_bumps_one_coordinate():
    one = softplus_inverse(1.0)
    theta = NeuronParams(np.zeros(2), np.full(2, one), np.zeros(3), np.full(3, one))
    for k in range(5):
        z = np.eye(5)[k]
        a, b = reparam_transform(theta, z)
        # layout: first d_x coordinates drive b, the rest drive a
        np.testing.assert_allclose(np.concatenate([b, a]), z, atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_reparam_matches_scalar_arithmetic(seed):
    gen = np.random.default_rng(seed)
    theta = NeuronParams(gen.normal(size=2), gen.normal(size=2), gen.normal(size=3), gen.normal(size=3))
    z = gen.normal(size=5)
    a, b = reparam_transform(theta, z)
    for k in range(3):
        assert b[k] == pytest.approx(theta.mu_b[k] + math.log1p(math.exp(theta.rho_b[k])) * z[k], rel=1e-12, abs=1e-14)
    for k in range(2):
        assert a[k] == pytest.approx(theta.mu_a[k] + math.log1p(math.exp(theta.rho_a[k])) * z[3 + k], rel=1e-12, abs=1e-14)


def test_reparam_shape_error():
    theta = NeuronParams(np.zeros(1), np.zeros(1), np.zeros(2), np.zeros(2))
    with pytest.raises(ShapeError):
        reparam_transform(theta, np.zeros(4))


def test_transform_matches_per_neuron(small_posterior):
    z = np.random.default_rng(3).normal(size=(4, 5))
    w = transform(small_posterior, z)
    for j, theta in enumerate(small_posterior.neurons):
        a, b = reparam_transform(theta, z[j])
        np.testing.assert_allclose(w.a[j], a)
        np.testing.assert_allclose(w.b[j], b)


def test_sample_weights_deterministic_and_uses_noise(small_posterior):
    w1 = sample_weights(small_posterior, np.random.default_rng(5))
    w2 = sample_weights(small_posterior, np.random.default_rng(5))
    np.testing.assert_array_equal(w1.a, w2.a)
    np.testing.assert_array_equal(w1.b, w2.b)
    z = sample_noise(small_posterior, np.random.default_rng(5))
    w3 = transform(small_posterior, z)
    np.testing.assert_array_equal(w1.b, w3.b)


def test_sample_weights_moments():
    post = random_posterior(3, 2, 1, seed=2)
    gen = np.random.default_rng(0)
    draws = np.array([sample_weights(post, gen).b for _ in range(20000)])
    np.testing.assert_allclose(draws.mean(axis=0), post.mu_b, atol=5 * post.sigma_b.max() / math.sqrt(20000))
    np.testing.assert_allclose(draws.std(axis=0), post.sigma_b, rtol=0.03)


def test_posterior_shape_checks():
    with pytest.raises(ShapeError):
        VariationalPosterior(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((3, 2)), np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        VariationalPosterior.from_neurons([])
    a = NeuronParams(np.zeros(1), np.zeros(1), np.zeros(2), np.zeros(2))
    b = NeuronParams(np.zeros(1), np.zeros(1), np.zeros(3), np.zeros(3))
    with pytest.raises(ShapeError):
        VariationalPosterior.from_neurons([a, b])


def test_posterior_json_round_trip(tmp_path, small_posterior):
    path = tmp_path / "post.json"
    small_posterior.save(path)
    back = VariationalPosterior.load(path)
    for name in ("mu_a", "rho_a", "mu_b", "rho_b"):
        np.testing.assert_array_equal(getattr(back, name), getattr(small_posterior, name))
    data = json.loads(path.read_text())
    assert data["N"] == 4 and data["d_x"] == 3 and data["d_y"] == 2
    data["N"] = 5
    with pytest.raises(ShapeError):
        VariationalPosterior.from_dict(data)


def test_prior_validation_and_density():
    with pytest.raises(ValueError):
        FactorizedGaussianPrior(0.0, 0.0)
    prior = FactorizedGaussianPrior(0.0, 0.2)
    w = np.array([0.1, -0.3])
    expected = sum(-0.5 * x * x / 0.2 - 0.5 * math.log(2 * math.pi * 0.2) for x in w)
    assert prior.log_density(w) == pytest.approx(expected, rel=1e-14)


def test_kl_zero_at_prior():
    prior = FactorizedGaussianPrior(0.3, 0.2)
    post = VariationalPosterior.from_prior(prior, 5, 3, 2)
    assert abs(kl_total(post, prior)) < 1e-12
    assert all(abs(kl_neuron(t, prior)) < 1e-12 for t in post.neurons)


def test_kl_one_dimensional_reference():
    # KL(N(1, 0.5^2) || N(0, 1)) = (0.25 + 1)/2 - log(0.5) - 1/2
    prior = FactorizedGaussianPrior(0.0, 1.0)
    rho = softplus_inverse(0.5)
    theta = NeuronParams(np.array([1.0]), np.array([rho]), np.array([0.0]), np.array([softplus_inverse(1.0)]))
    assert kl_neuron(theta, prior) == pytest.approx(0.625 - math.log(0.5) - 0.5, rel=1e-12)


def test_kl_matches_monte_carlo_log_ratio():
    prior = FactorizedGaussianPrior(0.0, 0.2)
    theta = random_posterior(1, 3, 2, seed=9).neuron(0)
    est, se = kl_monte_carlo(theta, prior, 200_000, np.random.default_rng(1))
    assert abs(kl_neuron(theta, prior) - est) < 3 * se


def test_kl_sum_and_per_neuron_agree(small_posterior):
    prior = FactorizedGaussianPrior()
    per = kl_per_neuron(small_posterior, prior)
    np.testing.assert_allclose(per, [kl_neuron(t, prior) for t in small_posterior.neurons], rtol=1e-13)
    assert kl_total(small_posterior, prior) == pytest.approx(per.sum(), rel=1e-13)


@given(st.integers(0, 10_000))
@settings(max_examples=25)
def test_kl_nonnegative_and_permutation_invariant(seed):
    post = random_posterior(5, 2, 2, seed=seed, rho_range=(-4.0, 2.0))
    prior = FactorizedGaussianPrior()
    kl = kl_total(post, prior)
    assert kl >= 0
    order = np.random.default_rng(seed).permutation(5)
    assert kl_total(post.permuted(order), prior) == pytest.approx(kl, rel=1e-13)


def test_kl_gradient_finite_differences(small_posterior):
    prior = FactorizedGaussianPrior(0.1, 0.2)
    grads = dict(zip(("mu_a", "rho_a", "mu_b", "rho_b"), kl_gradient(small_posterior, prior)))
    h = 1e-6
    for name, g in grads.items():
        for idx in np.ndindex(g.shape):
            plus, minus = small_posterior.copy(), small_posterior.copy()
            getattr(plus, name)[idx] += h
            getattr(minus, name)[idx] -= h
            numeric = (kl_total(plus, prior) - kl_total(minus, prior)) / (2 * h)
            assert g[idx] == pytest.approx(numeric, rel=1e-6, abs=1e-8)


def test_log_q_matches_gaussian_density():
    theta = random_posterior(1, 2, 1, seed=4).neuron(0)
    a, b = np.array([0.3]), np.array([-0.2, 0.7])
    expected = 0.0
    for w, mu, s in zip(np.concatenate([a, b]), np.concatenate([theta.mu_a, theta.mu_b]),
                        np.concatenate([theta.sigma_a, theta.sigma_b])):
        expected += -0.5 * ((w - mu) / s) ** 2 - math.log(s * math.sqrt(2 * math.pi))
    assert log_q(theta, a, b) == pytest.approx(expected, rel=1e-13)
