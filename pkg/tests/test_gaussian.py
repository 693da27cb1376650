"""Gaussian head: analytic anchors, scipy oracle, sampling statistics."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from pedcast import tensorcore as tc
from pedcast.gaussian import (
    LOG_2PI, BiGaussSeq, nll, params_to_csv, raw_to_params, sample,
)
from gradcheck import assert_grads_match


def seq_from_arrays(mu, sigma, rho, origin=None):
    return BiGaussSeq(mu=np.asarray(mu, float), sigma=np.asarray(sigma, float),
                      rho=np.asarray(rho, float), origin=origin)


def test_raw_to_params_transforms():
    raw = np.zeros((2, 3, 5))
    raw[..., 0] = 1.5
    raw[..., 2] = np.log(0.5)
    raw[..., 4] = 0.3
    seq = raw_to_params(raw)
    np.testing.assert_allclose(seq.mu[..., 0], 1.5)
    np.testing.assert_allclose(seq.sigma[..., 0], 0.5, rtol=1e-12)
    np.testing.assert_allclose(seq.sigma[..., 1], 1.0)
    np.testing.assert_allclose(seq.rho, np.tanh(0.3), rtol=1e-12)


def test_raw_to_params_rho_clamped():
    raw = np.zeros((1, 1, 5))
    raw[..., 4] = 50.0
    seq = raw_to_params(raw)
    assert seq.rho[0, 0] <= 1.0 - 1e-6


def test_nll_standard_normal_at_mean():
    # unit sigmas, rho 0, target at mean: density (2 pi)^-1, nll log(2 pi)
    seq = seq_from_arrays(np.zeros((1, 1, 2)), np.ones((1, 1, 2)), np.zeros((1, 1)))
    val = float(nll(seq, np.zeros((1, 1, 2))).data)
    np.testing.assert_allclose(val, LOG_2PI, rtol=0, atol=1e-9)


def test_nll_standard_normal_unit_offset():
    seq = seq_from_arrays(np.zeros((1, 1, 2)), np.ones((1, 1, 2)), np.zeros((1, 1)))
    target = np.zeros((1, 1, 2))
    target[0, 0, 0] = 1.0
    val = float(nll(seq, target).data)
    np.testing.assert_allclose(val, LOG_2PI + 0.5, rtol=0, atol=1e-9)


def test_nll_zero_rho_splits_into_univariates():
    rng = np.random.default_rng(0)
    mu = rng.standard_normal((3, 2, 2))
    sigma = rng.uniform(0.5, 2.0, (3, 2, 2))
    target = rng.standard_normal((3, 2, 2))
    seq = seq_from_arrays(mu, sigma, np.zeros((3, 2)))
    total = float(nll(seq, target, reduce="sum").data)
    uni = 0.5 * np.log(2.0 * np.pi) + np.log(sigma) + \
        0.5 * ((target - mu) / sigma) ** 2
    np.testing.assert_allclose(total, uni.sum(), rtol=1e-10)


def test_nll_matches_scipy_oracle():
    rng = np.random.default_rng(1)
    mu = rng.standard_normal((4, 3, 2))
    sigma = rng.uniform(0.3, 1.8, (4, 3, 2))
    rho = rng.uniform(-0.85, 0.85, (4, 3))
    target = rng.standard_normal((4, 3, 2))
    seq = seq_from_arrays(mu, sigma, rho)
    total = float(nll(seq, target, reduce="sum").data)
    expected = 0.0
    for t in range(4):
        for n in range(3):
            sx, sy = sigma[t, n]
            r = rho[t, n]
            cov = [[sx * sx, r * sx * sy], [r * sx * sy, sy * sy]]
            expected -= multivariate_normal(mean=mu[t, n], cov=cov).logpdf(target[t, n])
    np.testing.assert_allclose(total, expected, rtol=1e-10)


def test_nll_mean_reduce_divides_by_peds():
    rng = np.random.default_rng(2)
    mu = rng.standard_normal((2, 4, 2))
    sigma = rng.uniform(0.5, 1.5, (2, 4, 2))
    rho = rng.uniform(-0.5, 0.5, (2, 4))
    target = rng.standard_normal((2, 4, 2))
    seq = seq_from_arrays(mu, sigma, rho)
    total = float(nll(seq, target, reduce="sum").data)
    mean = float(nll(seq, target, reduce="mean_peds").data)
    np.testing.assert_allclose(mean, total / 4.0, rtol=1e-12)
    with pytest.raises(ValueError):
        nll(seq, target, reduce="median")


def test_nll_shape_mismatch_rejected():
    seq = seq_from_arrays(np.zeros((2, 2, 2)), np.ones((2, 2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        nll(seq, np.zeros((3, 2, 2)))


def test_nll_finite_near_degenerate_rho():
    seq = seq_from_arrays(np.zeros((1, 1, 2)), np.ones((1, 1, 2)),
                          np.full((1, 1), 1.0 - 1e-6))
    val = float(nll(seq, np.ones((1, 1, 2))).data)
    assert np.isfinite(val)


def test_nll_gradient_through_raw_tensor():
    rng = np.random.default_rng(3)
    target = rng.standard_normal((3, 2, 2))

    def build(raw):
        seq = raw_to_params(raw)
        return nll(seq, target)

    raw = tc.Tensor(rng.standard_normal((3, 2, 5)) * 0.5, requires_grad=True)
    assert_grads_match(build, [raw])


def test_sampling_statistics_match_parameters():
    # 100k draws: empirical mean and correlation near the truth
    seq = seq_from_arrays(np.array([[[0.7, -0.3]]]), np.ones((1, 1, 2)),
                          np.full((1, 1), 0.5), origin=np.zeros((1, 2)))
    draws = sample(seq, seed=123, count=100_000)[:, 0, 0, :]
    np.testing.assert_allclose(draws.mean(axis=0), [0.7, -0.3], atol=0.02)
    corr = np.corrcoef(draws[:, 0], draws[:, 1])[0, 1]
    np.testing.assert_allclose(corr, 0.5, atol=0.02)


def test_sampling_prefix_stable_and_deterministic():
    rng = np.random.default_rng(4)
    seq = seq_from_arrays(rng.standard_normal((4, 3, 2)) * 0.1,
                          rng.uniform(0.2, 0.8, (4, 3, 2)),
                          rng.uniform(-0.6, 0.6, (4, 3)),
                          origin=rng.standard_normal((3, 2)))
    few = sample(seq, seed=9, count=5)
    many = sample(seq, seed=9, count=20)
    np.testing.assert_array_equal(few, many[:5])
    again = sample(seq, seed=9, count=20)
    np.testing.assert_array_equal(many, again)
    other = sample(seq, seed=10, count=20)
    assert not np.array_equal(many, other)


def test_sample_cumsums_from_origin():
    # deterministic case: sigma ~ 0 makes samples equal the cumsummed mean
    mu = np.tile(np.array([[1.0, 0.5]]), (3, 1))[:, None, :]
    seq = seq_from_arrays(mu, np.full((3, 1, 2), 1e-12), np.zeros((3, 1)),
                          origin=np.array([[10.0, -5.0]]))
    draws = sample(seq, seed=0, count=2)
    expect = np.array([[11.0, -4.5], [12.0, -4.0], [13.0, -3.5]])
    np.testing.assert_allclose(draws[0, 0], expect, atol=1e-9)
    np.testing.assert_allclose(seq.mean_positions()[0], expect, atol=1e-12)


def test_absolute_space_samples_skip_cumsum():
    mu = np.zeros((2, 1, 2))
    mu[1, 0] = [4.0, 4.0]
    seq = BiGaussSeq(mu=mu, sigma=np.full((2, 1, 2), 1e-12), rho=np.zeros((2, 1)),
                     space="absolute")
    draws = sample(seq, seed=0, count=1)
    np.testing.assert_allclose(draws[0, 0], [[0.0, 0.0], [4.0, 4.0]], atol=1e-9)


def test_params_csv_layout():
    rng = np.random.default_rng(5)
    raw = rng.standard_normal((12, 3, 5))
    seq = raw_to_params(raw, origin=np.zeros((3, 2)))
    text = params_to_csv(seq)
    lines = text.strip().split("\n")
    assert lines[0] == "t,ped,mu_x,mu_y,sigma_x,sigma_y,rho,abs_mu_x,abs_mu_y"
    assert len(lines) == 1 + 12 * 3
    first = lines[1].split(",")
    np.testing.assert_allclose(float(first[2]), raw[0, 0, 0], rtol=1e-10)
    # deterministic bytes
    assert text == params_to_csv(seq)
