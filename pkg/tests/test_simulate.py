"""Synthetic data generator: design geometry, error law, determinism."""

import numpy as np
import pytest
from scipy import stats

from svcm.data import validate
from svcm.errors import ConfigError, NumericalError
from svcm.simulate import (
    SimConfig,
    binomial_by_inversion,
    exponential_covariance,
    simulate_dataset,
    true_g,
    with_seed,
    write_truth_csv,
)


# ---------------------------------------------------------------------------
# the four benchmark coefficient functions


def test_true_g_at_zero():
    g = true_g(0.0)
    expect = np.array(
        [0.0, 5.0, 3.5 * (np.exp(-1.0) + np.exp(-9.0)) - 1.5, 0.0]
    )
    np.testing.assert_allclose(g, expect, atol=1e-14)


def test_true_g_at_one():
    g = true_g(1.0)
    expect = np.array(
        [0.0, 0.0, 3.5 * (np.exp(-4.0) + np.exp(-1.0)) - 1.5, 3.5]
    )
    # sin(2*pi) in floating point is ~1e-16, not exactly 0
    np.testing.assert_allclose(g, expect, atol=1e-12)


def test_true_g_quarter_point_sine_peak():
    assert true_g(0.25)[0] == pytest.approx(3.5, abs=1e-14)


def test_true_g_vectorized_shape():
    out = true_g(np.linspace(0, 1, 7).reshape(7, 1))
    assert out.shape == (7, 1, 4)


# ---------------------------------------------------------------------------
# error covariance


def test_exponential_covariance_matches_formula():
    times = np.array([0.1, 0.5, 0.9])
    sig = exponential_covariance(times, 4.95, 0.8)
    d = np.abs(times[:, None] - times[None, :])
    np.testing.assert_allclose(sig, 4.95 * 0.8**d, rtol=1e-15)


def test_exponential_covariance_rho_zero_is_diagonal():
    sig = exponential_covariance(np.array([0.2, 0.21, 0.9]), 3.0, 0.0)
    np.testing.assert_array_equal(sig, 3.0 * np.eye(3))


def test_exponential_covariance_small_rho_widely_spaced():
    # rho^d -> 0 as rho -> 0 for d > 0; at rho=1e-12 the off-diagonal is
    # below 1e-10*omega once the time gap exceeds 5/6, so use spaced times
    sig = exponential_covariance(np.array([0.05, 0.95]), 2.0, 1e-12)
    assert abs(sig[0, 1]) < 1e-10 * 2.0
    np.testing.assert_allclose(np.diag(sig), 2.0, rtol=1e-15)


def test_exponential_covariance_negative_rho_rejected():
    with pytest.raises(NumericalError):
        exponential_covariance(np.array([0.1, 0.2]), 1.0, -0.4)


def test_error_second_moment_matches_target():
    # sample covariance of the exact-normal draws at times (0.1, 0.5),
    # pooled over 100k subjects, against the closed form omega*rho^0.4
    times = np.array([0.1, 0.5])
    sig = exponential_covariance(times, 4.95, 0.8)
    L = np.linalg.cholesky(sig)
    rng = np.random.default_rng(42)
    eps = rng.standard_normal((100_000, 2)) @ L.T
    sample = np.cov(eps, rowvar=False)
    target = 4.95 * 0.8**0.4
    assert sample[0, 1] == pytest.approx(target, rel=0.02)
    assert sample[0, 0] == pytest.approx(4.95, rel=0.02)


# ---------------------------------------------------------------------------
# binomial inversion


def test_binomial_inversion_edge_probabilities():
    assert binomial_by_inversion(0.5, 7, 0.0) == 0
    assert binomial_by_inversion(0.5, 7, 1.0) == 7


def test_binomial_inversion_against_scipy_cdf():
    # k is the smallest integer with CDF(k) >= u
    for m, p in ((6, 0.65), (12, 0.3), (3, 0.9)):
        for u in np.linspace(0.01, 0.99, 23):
            k = binomial_by_inversion(u, m, p)
            assert stats.binom.cdf(k, m, p) >= u
            if k > 0:
                assert stats.binom.cdf(k - 1, m, p) < u


def test_binomial_inversion_monotone_in_u():
    ks = [binomial_by_inversion(u, 9, 0.4) for u in np.linspace(0, 1, 101)]
    assert all(a <= b for a, b in zip(ks, ks[1:]))


# ---------------------------------------------------------------------------
# dataset generation


def test_simulated_dataset_validates():
    dataset, _ = simulate_dataset(SimConfig(n=15, seed=3))
    assert validate(dataset) == []


def test_cluster_sizes_and_time_subintervals():
    cfg = SimConfig(n=40, m0=6, mr=6, seed=11)
    dataset, _ = simulate_dataset(cfg)
    M = cfg.m0 + cfg.mr
    for s in dataset.subjects:
        assert cfg.m0 <= s.m <= M
        # observation j falls in the j-th of M equal subintervals
        for j, t in enumerate(s.times):
            assert j / M <= t <= (j + 1) / M


def test_constant_cluster_size_when_mr_zero():
    dataset, _ = simulate_dataset(SimConfig(n=12, m0=4, mr=0, seed=5))
    assert all(s.m == 4 for s in dataset.subjects)


def test_z_first_column_is_one_and_truncation():
    cfg = SimConfig(n=30, seed=9, truncate_covariates=2.5)
    dataset, _ = simulate_dataset(cfg)
    for s in dataset.subjects:
        np.testing.assert_array_equal(s.z[:, 0], 1.0)
        assert np.abs(s.x).max() <= 2.5
        assert np.abs(s.z[:, 1:]).max() <= 2.5


def test_untruncated_covariates_exceed_bound():
    cfg = SimConfig(n=400, seed=2, truncate_covariates=None)
    dataset, _ = simulate_dataset(cfg)
    assert np.abs(dataset.x_all).max() > 2.5


def test_truth_record_consistency():
    cfg = SimConfig(n=10, seed=21)
    dataset, truth = simulate_dataset(cfg)
    assert truth.g_obs.shape == (dataset.N1, cfg.q)
    np.testing.assert_array_equal(truth.beta0, np.asarray(cfg.beta0))
    # y decomposes exactly into mean + Gaussian error with the stored cov
    row = 0
    for s, sig in zip(dataset.subjects, truth.sigmas):
        assert sig.shape == (s.m, s.m)
        g = truth.g_obs[row : row + s.m]
        np.testing.assert_allclose(
            g, cfg.g(s.times).reshape(s.m, cfg.q), rtol=1e-14
        )
        row += s.m


def test_truth_covariance_factorization_error():
    _, truth = simulate_dataset(SimConfig(n=25, rho=0.8, seed=7))
    for sig in truth.sigmas:
        L = np.linalg.cholesky(sig)
        assert np.abs(L @ L.T - sig).max() < 1e-10


def test_rho_zero_truth_sigmas_diagonal():
    _, truth = simulate_dataset(SimConfig(n=8, rho=0.0, seed=13))
    for sig in truth.sigmas:
        off = sig - np.diag(np.diag(sig))
        assert np.abs(off).max() == 0.0
        np.testing.assert_allclose(np.diag(sig), 4.95, rtol=1e-15)


def test_fixed_seed_reproduces_dataset_exactly():
    cfg = SimConfig(n=18, seed=101)
    d1, t1 = simulate_dataset(cfg)
    d2, t2 = simulate_dataset(cfg)
    np.testing.assert_array_equal(d1.y_all, d2.y_all)
    np.testing.assert_array_equal(d1.times_all, d2.times_all)
    np.testing.assert_array_equal(d1.x_all, d2.x_all)
    np.testing.assert_array_equal(t1.g_obs, t2.g_obs)
    d3, _ = simulate_dataset(cfg, seed=102)
    assert not np.array_equal(d1.y_all, d3.y_all)


def test_with_seed_override():
    cfg = with_seed(SimConfig(n=5, seed=1), 99)
    assert cfg.seed == 99


def test_custom_g_and_q():
    g_fn = lambda t: np.stack(
        [np.ones_like(np.asarray(t, float)), np.asarray(t, float)], axis=-1
    )
    cfg = SimConfig(n=6, q=2, g_fn=g_fn, seed=4)
    dataset, truth = simulate_dataset(cfg)
    assert dataset.q == 2
    assert truth.g_obs.shape[1] == 2


def test_diverging_scenario_dense_subjects():
    cfg = SimConfig(n=20, scenario="diverging", B=1.5, C=1.0, seed=6)
    dataset, _ = simulate_dataset(cfg)
    n_dense_target = int(np.ceil(cfg.C * cfg.n**0.375))
    dense = []
    for s in dataset.subjects:
        gaps = np.diff(s.times)
        if s.m > 8 and np.allclose(gaps, gaps[0], atol=1e-12):
            dense.append(s)
    assert len(dense) == n_dense_target
    for s in dense:
        assert s.times[0] == 0.0 and s.times[-1] == 1.0


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        SimConfig(n=0)
    with pytest.raises(ConfigError):
        SimConfig(n=5, binom_p=1.5)
    with pytest.raises(ConfigError):
        SimConfig(n=5, rho=1.0)
    with pytest.raises(ConfigError):
        SimConfig(n=5, omega=0.0)
    with pytest.raises(ConfigError):
        SimConfig(n=5, scenario="weird")
    with pytest.raises(ConfigError):
        SimConfig(n=5, q=2)  # default curves need q=4


def test_write_truth_csv(tmp_path):
    dataset, truth = simulate_dataset(SimConfig(n=4, seed=8))
    obs = tmp_path / "truth.csv"
    dig = tmp_path / "digest.csv"
    write_truth_csv(dataset, truth, obs, dig)
    lines = obs.read_text().strip().splitlines()
    assert lines[0] == "subject,t,g1,g2,g3,g4"
    assert len(lines) == dataset.N1 + 1
    dlines = dig.read_text().strip().splitlines()
    assert dlines[0] == "subject,m,sigma_factor_sha256"
    assert len(dlines) == dataset.n + 1
