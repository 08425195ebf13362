"""End-to-end pipeline: step wiring, variants, curve updates, CI bands."""

import os

import numpy as np
import pytest

from svcm.config import PipelineConfig
from svcm.data import make_dataset, Subject
from svcm.errors import NumericalError, PipelineError
from svcm.pipeline import (
    crude_variant,
    efficient_fit,
    oracle_variant,
    pointwise_ci_g,
    positive_variant,
    spline_g_refit,
    update_g_local,
    write_result_dir,
)
from svcm.covariance import build_covariance_model
from svcm.gee import gamma_to_curves
from svcm.simulate import SimConfig, simulate_dataset, with_seed
from svcm.smoothing import EPAN_NU0, epanechnikov, local_linear_vc

from helpers import study_dataset, true_residuals
from reference_gee import dense_design, dense_weight


def _linear_g(t):
    t = np.asarray(t, dtype=float)
    return np.stack([1.0 + 0.5 * t, 2.0 - t], axis=-1)


def _smooth_g(t):
    t = np.asarray(t, dtype=float)
    return np.stack([np.sin(np.pi * t), 2.0 * (1.0 - t) ** 2], axis=-1)


_FAST = PipelineConfig(kn=5, h1=0.2, h2=0.25, cov_grid_size=51,
                       eval_grid_size=101)


# ---------------------------------------------------------------------------
# degenerate and structural behavior


def test_noise_free_recovers_beta_exactly():
    # linear varying coefficients live in the cubic spline space, so with
    # (numerically) zero noise both fits must return beta0 and the
    # covariance model must collapse to ~0 with the ridge repair engaged
    cfg = SimConfig(n=25, q=2, g_fn=_linear_g, omega=1e-30, seed=42)
    dataset, truth = simulate_dataset(cfg)
    res = efficient_fit(dataset, _FAST, keep_state=True)
    np.testing.assert_allclose(res.beta_init, truth.beta0, atol=1e-6)
    np.testing.assert_allclose(res.beta_eff, truth.beta0, atol=1e-6)
    assert np.abs(res.state["resid"]).max() < 1e-6
    assert np.abs(res.covariance_model.variance).max() < 1e-6
    assert np.abs(res.covariance_model.surface).max() < 1e-6
    assert res.diagnostics.counters.get("pd_floor_repair") == dataset.n


def test_bandwidth_tie_h3_equals_multiplier_times_h1():
    dataset, _ = study_dataset(n=25, seed=1)
    cfg = PipelineConfig(kn=5, h2=0.25, h3_mult=1.5, cov_grid_size=51,
                         eval_grid_size=101)
    res = efficient_fit(dataset, cfg)
    assert res.h3 == 1.5 * res.h1       # exact float equality
    res2 = efficient_fit(dataset, PipelineConfig(kn=5, h1=0.2, h2=0.25,
                                                 h3=0.33, cov_grid_size=51,
                                                 eval_grid_size=101))
    assert res2.h3 == 0.33


def test_first_sweep_matches_single_pass_bitwise():
    dataset, _ = study_dataset(n=25, seed=2)
    res1 = efficient_fit(dataset, _FAST)
    res8 = efficient_fit(
        dataset, PipelineConfig(kn=5, h1=0.2, h2=0.25, cov_grid_size=51,
                                eval_grid_size=101, max_iter=8)
    )
    assert res1.iterations == 1
    np.testing.assert_array_equal(res8.beta_path[0], res1.beta_eff)
    np.testing.assert_array_equal(res8.se_path[0], res1.se_eff)
    assert res8.iterations >= 2
    # the sweep loop stops once the relative beta change is below tolerance
    last, prev = res8.beta_path[-1], res8.beta_path[-2]
    assert np.abs(last - prev).max() < 1e-6 * (1.0 + np.abs(prev).max())


def test_result_shapes_and_positive_ses():
    dataset, _ = study_dataset(n=25, seed=3)
    res = efficient_fit(dataset, _FAST)
    p, q = dataset.p, dataset.q
    assert res.beta_init.shape == (p,) and res.beta_eff.shape == (p,)
    assert np.all(res.se_init > 0) and np.all(res.se_eff > 0)
    assert res.g_ll_updated.values.shape == (101, q)
    assert res.g_spline_updated.values.shape == (101, q)
    assert res.state is None


def test_keep_state_contents():
    dataset, _ = study_dataset(n=20, seed=4)
    res = efficient_fit(dataset, _FAST, keep_state=True)
    assert set(res.state) == {"designs", "fit_init", "fit_eff", "sigmas",
                              "resid"}
    assert len(res.state["sigmas"]) == dataset.n


def test_too_small_dataset_fails_at_step_zero():
    s = Subject(id="a", times=np.array([0.5]), y=np.array([1.0]),
                x=np.ones((1, 1)), z=np.ones((1, 1)))
    with pytest.raises(PipelineError) as exc:
        efficient_fit(make_dataset([s]), _FAST)
    assert exc.value.step == 0


def test_rank_deficiency_annotated_with_step():
    dataset, _ = study_dataset(n=20, seed=5)
    subjects = [
        Subject(id=s.id, times=s.times, y=s.y,
                x=np.hstack([s.x, s.x[:, :1]]), z=s.z)
        for s in dataset.subjects
    ]
    with pytest.raises(PipelineError) as exc:
        efficient_fit(make_dataset(subjects), _FAST)
    assert exc.value.step == 1
    assert "step 1" in str(exc.value)


# ---------------------------------------------------------------------------
# working-independence vs efficient when the truth is uncorrelated


def test_uncorrelated_errors_efficient_close_to_independent():
    # with rho=0 the true covariance is diagonal, so FGLS and working
    # independence estimate the same thing; their gap should be small on
    # the SE scale on average over replications
    cfg = SimConfig(n=40, m0=4, mr=4, rho=0.0, seed=77)
    pipe = PipelineConfig(kn=4, h1=0.25, h2=0.3, cov_grid_size=41,
                          eval_grid_size=81, pd_floor=0.05)
    ratios = []
    for r in range(100):
        dataset, _ = simulate_dataset(with_seed(cfg, 7000 + r))
        res = efficient_fit(dataset, pipe)
        ratios.append(np.max(np.abs(res.beta_eff - res.beta_init) / res.se_eff))
    assert np.mean(ratios) < 0.5


def test_uncorrelated_errors_surface_near_zero():
    cfg = SimConfig(n=300, rho=0.0, seed=31)
    dataset, truth = simulate_dataset(cfg)
    resid = true_residuals(dataset, cfg, truth)
    model = build_covariance_model(dataset, resid, 0.15, 0.3, 0.0, 51)
    inner = (model.grid >= 0.1) & (model.grid <= 0.9)
    assert np.abs(model.surface[np.ix_(inner, inner)]).max() < 1.0
    assert abs(np.median(model.variance[inner]) - 4.95) < 0.75


# ---------------------------------------------------------------------------
# curve updates


def test_update_g_local_at_initial_beta_reproduces_step2_curve():
    dataset, _ = study_dataset(n=25, seed=6)
    res = efficient_fit(dataset, _FAST)
    again = update_g_local(dataset, res.beta_init, res.h1,
                           grid=res.g_ll_init.grid)
    np.testing.assert_array_equal(again.values, res.g_ll_init.values)


def test_update_g_local_linearity_in_beta():
    dataset, _ = study_dataset(n=25, seed=7)
    b1 = np.array([5.0, 5.0, -5.0, -5.0])
    b2 = b1 + np.array([0.3, -0.1, 0.2, 0.05])
    grid = np.linspace(0, 1, 41)
    c1 = update_g_local(dataset, b1, 0.2, grid=grid)
    c2 = update_g_local(dataset, b2, 0.2, grid=grid)
    shift = local_linear_vc(dataset, dataset.x_all @ (b2 - b1), 0.2, grid)
    np.testing.assert_allclose(c1.values - c2.values, shift.values,
                               atol=1e-10)


def test_update_g_local_noise_free_bias_bound():
    # tolerance 0.02 at h=0.05 for curves with moderate curvature
    cfg = SimConfig(n=300, q=2, g_fn=_smooth_g, omega=1e-30, seed=8)
    dataset, truth = simulate_dataset(cfg)
    grid = np.linspace(0, 1, 101)
    curve = update_g_local(dataset, truth.beta0, 0.05, grid=grid)
    assert np.abs(curve.values - _smooth_g(grid)).max() < 0.02


def test_spline_refit_identity_weights_matches_joint_gamma():
    # at the joint-fit beta the gamma block of the joint solution solves the
    # same normal equations as a frozen-beta refit
    dataset, _ = study_dataset(n=25, seed=9)
    res = efficient_fit(dataset, _FAST)
    curve = spline_g_refit(dataset, res.beta_init, None, res.basis,
                           grid=res.g_spline_init.grid)
    np.testing.assert_allclose(curve.values, res.g_spline_init.values,
                               atol=1e-8)


def test_spline_refit_exact_recovery_in_spline_space():
    cfg = SimConfig(n=20, q=2, g_fn=_linear_g, omega=1e-30, seed=10)
    dataset, truth = simulate_dataset(cfg)
    res = efficient_fit(dataset, _FAST, keep_state=True)
    grid = np.linspace(0, 1, 61)
    curve = spline_g_refit(dataset, truth.beta0, res.state["sigmas"],
                           res.basis, grid=grid)
    np.testing.assert_allclose(curve.values, _linear_g(grid), atol=1e-8)


def test_spline_refit_matches_dense_solver():
    dataset, _ = study_dataset(n=12, seed=11)
    res = efficient_fit(dataset, _FAST, keep_state=True)
    sigmas = res.state["sigmas"]
    beta = res.beta_eff
    U = dense_design(dataset, res.basis)
    Vinv = dense_weight(dataset, sigmas)
    W = U[:, dataset.p:]
    rhs = W.T @ Vinv @ (dataset.y_all - dataset.x_all @ beta)
    gamma = np.linalg.solve(W.T @ Vinv @ W, rhs)
    grid = np.linspace(0, 1, 31)
    expect = gamma_to_curves(res.basis, gamma, grid)
    got = spline_g_refit(dataset, beta, sigmas, res.basis, grid=grid)
    np.testing.assert_allclose(got.values, expect.values, atol=1e-8)


# ---------------------------------------------------------------------------
# estimator variants


def test_oracle_variant_uses_true_covariances():
    cfg = SimConfig(n=30, seed=12)
    dataset, truth = simulate_dataset(cfg)
    res = efficient_fit(dataset, _FAST, keep_state=True)
    beta, se = oracle_variant(dataset, res.basis, truth.sigmas,
                              designs=res.state["designs"])
    assert beta.shape == (dataset.p,) and np.all(se > 0)
    assert np.abs(beta - truth.beta0).max() < 1.0


def test_crude_variant_runs_and_requires_state():
    dataset, _ = study_dataset(n=25, seed=13)
    res = efficient_fit(dataset, _FAST, keep_state=True)
    beta, se = crude_variant(dataset, _FAST, res)
    assert np.all(np.isfinite(beta)) and np.all(se > 0)
    bare = efficient_fit(dataset, _FAST)
    with pytest.raises(NumericalError):
        crude_variant(dataset, _FAST, bare)


def test_positive_variant_runs_and_requires_state():
    dataset, _ = study_dataset(n=25, seed=14)
    res = efficient_fit(dataset, _FAST, keep_state=True)
    beta, se = positive_variant(dataset, _FAST, res, lambda_l=0.05)
    assert np.all(np.isfinite(beta)) and np.all(se > 0)
    bare = efficient_fit(dataset, _FAST)
    with pytest.raises(NumericalError):
        positive_variant(dataset, _FAST, bare)


# ---------------------------------------------------------------------------
# pointwise confidence bands


def _scalar_dataset(n=60, seed=0):
    rng = np.random.default_rng(seed)
    subjects = []
    for i in range(n):
        m = 4
        times = np.sort(rng.random(m))
        x = rng.standard_normal((m, 2))
        z = np.ones((m, 1))
        y = x @ np.array([1.0, -1.0]) + np.sin(times) + rng.standard_normal(m)
        subjects.append(Subject(id=str(i), times=times, y=y, x=x, z=z))
    return make_dataset(subjects)


def test_ci_bands_scalar_reduction():
    # q=1, z=1, constant variance: the band half-width must reduce to the
    # classical local-linear formula z * sqrt(nu0 * s2 / (N h fhat))
    dataset = _scalar_dataset()
    grid = np.linspace(0.1, 0.9, 17)
    h = 0.3
    curve = local_linear_vc(dataset, dataset.y_all, h, grid)
    s2 = 1.7
    bands = pointwise_ci_g(dataset, curve, lambda ts: np.full(len(ts), s2), h,
                           level=0.95)
    N = dataset.N1
    fhat = epanechnikov((dataset.times_all[None, :] - grid[:, None]) / h).sum(
        axis=1
    ) / (N * h)
    from scipy.special import ndtri

    expect = ndtri(0.975) * np.sqrt(EPAN_NU0 * s2 / (fhat * N * h))
    np.testing.assert_allclose(bands.half_widths[:, 0], expect, rtol=1e-10)
    assert bands.level == 0.95


def test_ci_bands_shrink_with_sample_size():
    grid = np.linspace(0.2, 0.8, 13)
    h = 0.2
    widths = {}
    for n in (150, 300):
        dataset, _ = study_dataset(n=n, seed=15)
        curve = local_linear_vc(
            dataset, np.zeros(dataset.N1), h, grid
        )
        bands = pointwise_ci_g(dataset, curve,
                               lambda ts: np.full(len(ts), 4.95), h)
        widths[n] = bands.half_widths.mean()
    ratio = widths[150] / widths[300]
    assert abs(ratio - np.sqrt(2.0)) < 0.1 * np.sqrt(2.0)


def test_ci_bands_singular_moment_matrix_raises():
    dataset, _ = study_dataset(n=10, seed=16)
    grid = np.linspace(0, 1, 21)
    curve = local_linear_vc(dataset, np.zeros(dataset.N1), 0.3, grid)
    with pytest.raises(NumericalError, match="singular"):
        pointwise_ci_g(dataset, curve, lambda ts: np.ones(len(ts)), 0.005)


def test_ci_bands_level_validation():
    dataset = _scalar_dataset(n=10, seed=1)
    curve = local_linear_vc(dataset, dataset.y_all, 0.4,
                            np.linspace(0.2, 0.8, 5))
    with pytest.raises(ValueError):
        pointwise_ci_g(dataset, curve, lambda ts: np.ones(len(ts)), 0.4,
                       level=1.2)


# ---------------------------------------------------------------------------
# artifact serialization


def test_write_result_dir_artifacts(tmp_path):
    dataset, _ = study_dataset(n=20, seed=17)
    cfg = _FAST
    res = efficient_fit(dataset, cfg)
    out = tmp_path / "run"
    write_result_dir(res, str(out), config=cfg,
                     extra_manifest=[("note", "unit")])
    for name in ("beta.csv", "curves.csv", "covariance_variance.csv",
                 "covariance_surface.csv", "manifest.txt"):
        assert (out / name).exists()
    lines = (out / "beta.csv").read_text().strip().splitlines()
    assert lines[0] == "variant,coefficient,estimate,se,wald"
    assert len(lines) == 1 + 2 * dataset.p
    _, _, est, se, wald = lines[1].split(",")
    assert float(wald) == pytest.approx(float(est) / float(se), rel=1e-12)
    manifest = dict(
        line.split("=", 1)
        for line in (out / "manifest.txt").read_text().strip().splitlines()
    )
    assert float(manifest["h1"]) == res.h1
    assert manifest["config_kn"] == "5"
    assert manifest["note"] == "unit"
    ncols = len((out / "curves.csv").read_text().splitlines()[0].split(","))
    assert ncols == 1 + 3 * dataset.q
