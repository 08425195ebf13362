"""The seven-step efficient estimation pipeline and its variants.

Step 1 working-independence GEE spline fit; Step 2 local-linear curve from
the parametric residual; Step 3 residuals; Steps 4-5 variance curve and
covariance surface smoothing; Step 6 FGLS refit with the assembled
Sigma_i; Step 7 updated curves (local linear and spline). An optional
iteration repeats Steps 3-6 from the latest beta until the relative change
falls under iter_tol.

Failures raise PipelineError carrying the step number.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .config import config_to_pairs
from .covariance import (
    build_covariance_model,
    retruncate,
    sigma_matrix,
    write_covariance_csv,
)
from .diagnostics import Diagnostics
from .errors import NumericalError, PipelineError
from .gee import (
    WeightSpec,
    beta_se,
    gamma_only_fit,
    gamma_to_curves,
    gee_spline_fit,
    stacked_designs,
)
from .smoothing import (
    EPAN_NU0,
    default_cv_grid,
    local_linear_vc,
    loso_cv,
)
from .splines import build_basis


@dataclass
class EfficientFitResult:
    beta_init: np.ndarray
    se_init: np.ndarray
    beta_eff: np.ndarray           # final (after any iteration)
    se_eff: np.ndarray
    beta_path: tuple               # FGLS beta after each sweep; [0] = no iteration
    se_path: tuple
    gamma_init: np.ndarray
    gamma_eff: np.ndarray          # Step-7 spline refit coefficients
    g_ll_init: object              # Step-2 curve (CurveEstimate)
    g_ll_updated: object           # Step-7 local-linear curve
    g_spline_init: object
    g_spline_updated: object
    covariance_model: object
    h1: float
    h2: float
    h3: float
    iterations: int
    diagnostics: Diagnostics
    basis: object
    state: dict = None             # heavyweight intermediates, optional


def _step(k, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except NumericalError as e:
        raise PipelineError(k, e) from e


def _eval_grid(config):
    return np.linspace(0.0, 1.0, config.eval_grid_size)


def _curve_residuals(dataset, pseudo, curve):
    fitted = np.einsum("oq,oq->o", dataset.z_all, curve(dataset.times_all))
    return pseudo - fitted


def efficient_fit(dataset, config, keep_state=False):
    """Run Steps 1-7 and return the assembled result."""
    if dataset.n < 2 or dataset.N2 < 1:
        raise PipelineError(
            0, NumericalError("need n >= 2 and at least one within-subject pair")
        )
    diag = Diagnostics()
    grid = _eval_grid(config)
    basis = build_basis(config.resolve_kn(dataset.n), config.spline_degree)
    designs = stacked_designs(dataset, basis)

    # Step 1: working-independence spline GEE
    fit_i = _step(
        1, gee_spline_fit, dataset, basis, WeightSpec.identity(), designs=designs
    )
    pseudo = dataset.y_all - dataset.x_all @ fit_i.beta

    # Step 2: local-linear curve, bandwidth by LOSO CV unless fixed
    if config.h1 is not None:
        h1 = config.h1
    else:
        cands = config.h1_grid or default_cv_grid(
            dataset.times_all, config.cv_grid_size
        )
        h1, _ = _step(2, loso_cv, dataset, pseudo, cands, "curve",
                      ridge_eps=config.ridge_eps)
    g_init = _step(
        2, local_linear_vc, dataset, pseudo, h1, grid,
        ridge_eps=config.ridge_eps, diag=diag,
    )

    # Step 3: residuals off the smoothed curve
    resid = _curve_residuals(dataset, pseudo, g_init)

    # Step 4 bandwidth (the smoothing itself happens inside the model build)
    if config.h2 is not None:
        h2 = config.h2
    else:
        cands = config.h2_grid or default_cv_grid(
            dataset.times_all, config.cv_grid_size
        )
        h2, _ = _step(4, loso_cv, dataset, resid, cands, "variance",
                      ridge_eps=config.ridge_eps)
    h3 = config.h3 if config.h3 is not None else config.h3_mult * h1

    # Steps 4-6, optionally iterated with refreshed residuals
    beta_path, se_path = [], []
    model = None
    sigmas = None
    fit_eff = None
    iterations = 0
    beta_prev = None
    for sweep in range(config.max_iter):
        model = _step(
            5, build_covariance_model, dataset, resid, h2, h3,
            config.lambda_l, config.cov_grid_size,
            ridge_eps=config.ridge_eps, pd_floor=config.pd_floor, diag=diag,
        )
        sigmas = _step(
            6,
            lambda: [sigma_matrix(model, s.times, diag=diag) for s in dataset.subjects],
        )
        fit_eff = _step(
            6, gee_spline_fit, dataset, basis,
            WeightSpec.from_matrices(sigmas), designs=designs,
        )
        beta_path.append(fit_eff.beta)
        se_path.append(_step(6, beta_se, fit_eff, mode="model"))
        iterations = sweep + 1
        if beta_prev is not None:
            delta = np.abs(fit_eff.beta - beta_prev).max()
            if delta < config.iter_tol * (1.0 + np.abs(beta_prev).max()):
                beta_prev = fit_eff.beta
                break
        beta_prev = fit_eff.beta
        if sweep == config.max_iter - 1:
            break
        # next sweep: Steps 2-3 analogue with the latest beta
        pseudo_k = dataset.y_all - dataset.x_all @ fit_eff.beta
        g_k = _step(
            7, local_linear_vc, dataset, pseudo_k, h1, grid,
            ridge_eps=config.ridge_eps, diag=diag,
        )
        resid = _curve_residuals(dataset, pseudo_k, g_k)

    # independence SEs: sandwich with the estimated covariances
    se_init = _step(
        1, beta_se, fit_i, dataset, basis, sigmas, mode="sandwich", designs=designs
    )

    # Step 7: updated curves under the final beta
    g_upd = _step(
        7, update_g_local, dataset, fit_eff.beta, h1,
        grid=grid, ridge_eps=config.ridge_eps, diag=diag,
    )
    gamma_s = _step(
        7, gamma_only_fit, dataset, basis, fit_eff.beta,
        WeightSpec.from_matrices(sigmas), designs=designs,
    )
    g_spline_upd = gamma_to_curves(basis, gamma_s, grid)
    g_spline_init = gamma_to_curves(basis, fit_i.gamma, grid)

    state = None
    if keep_state:
        state = {
            "designs": designs,
            "fit_init": fit_i,
            "fit_eff": fit_eff,
            "sigmas": sigmas,
            "resid": resid,
        }
    return EfficientFitResult(
        beta_init=fit_i.beta,
        se_init=se_init,
        beta_eff=fit_eff.beta,
        se_eff=se_path[-1],
        beta_path=tuple(beta_path),
        se_path=tuple(se_path),
        gamma_init=fit_i.gamma,
        gamma_eff=gamma_s,
        g_ll_init=g_init,
        g_ll_updated=g_upd,
        g_spline_init=g_spline_init,
        g_spline_updated=g_spline_upd,
        covariance_model=model,
        h1=float(h1),
        h2=float(h2),
        h3=float(h3),
        iterations=iterations,
        diagnostics=diag,
        basis=basis,
        state=state,
    )


def update_g_local(dataset, beta, h1, *, grid=None, ridge_eps=1e-10, diag=None):
    """Step-7 local-linear curve: smooth Y - X beta for the given beta."""
    if grid is None:
        grid = np.linspace(0.0, 1.0, 201)
    pseudo = dataset.y_all - dataset.x_all @ np.asarray(beta, float)
    return local_linear_vc(
        dataset, pseudo, h1, grid, ridge_eps=ridge_eps, diag=diag
    )


def spline_g_refit(dataset, beta, sigmas, basis, *, designs=None, grid=None):
    """Step-7 spline curve: gamma-only weighted refit at the given beta."""
    weights = (
        WeightSpec.identity() if sigmas is None else WeightSpec.from_matrices(sigmas)
    )
    gamma = gamma_only_fit(dataset, basis, np.asarray(beta, float), weights,
                           designs=designs)
    if grid is None:
        grid = np.linspace(0.0, 1.0, 201)
    return gamma_to_curves(basis, gamma, grid)


# ---------------------------------------------------------------------------
# estimator variants (harness support)


def oracle_variant(dataset, basis, true_sigmas, *, designs=None):
    """GEE refit with the true covariances; model-based SEs."""
    fit = gee_spline_fit(
        dataset, basis, WeightSpec.from_matrices(true_sigmas), designs=designs
    )
    return fit.beta, beta_se(fit, mode="model")


def crude_variant(dataset, config, result):
    """Skip Steps 2-3: spline residuals from Step 1 feed Steps 4-6."""
    state = result.state
    if state is None:
        raise NumericalError("crude variant needs a result with keep_state=True")
    diag = result.diagnostics
    resid = state["fit_init"].residuals
    model = build_covariance_model(
        dataset, resid, result.h2, result.h3,
        config.lambda_l, config.cov_grid_size,
        ridge_eps=config.ridge_eps, pd_floor=config.pd_floor, diag=diag,
    )
    sigmas = [sigma_matrix(model, s.times, diag=diag) for s in dataset.subjects]
    fit = gee_spline_fit(
        dataset, result.basis, WeightSpec.from_matrices(sigmas),
        designs=state["designs"],
    )
    return fit.beta, beta_se(fit, mode="model")


def positive_variant(dataset, config, result, lambda_l=0.05):
    """Re-truncate the smoothed surface at a strictly positive threshold."""
    state = result.state
    if state is None:
        raise NumericalError("positive variant needs a result with keep_state=True")
    diag = result.diagnostics
    model = retruncate(result.covariance_model, lambda_l)
    sigmas = [sigma_matrix(model, s.times, diag=diag) for s in dataset.subjects]
    fit = gee_spline_fit(
        dataset, result.basis, WeightSpec.from_matrices(sigmas),
        designs=state["designs"],
    )
    return fit.beta, beta_se(fit, mode="model")


# ---------------------------------------------------------------------------
# pointwise confidence bands for the updated local-linear curve


@dataclass(frozen=True)
class CurveBands:
    grid: np.ndarray
    half_widths: np.ndarray   # (len(grid), q)
    level: float


def pointwise_ci_g(dataset, curve, variance_fn, h1, level=0.95):
    """Normal-theory pointwise bands for the updated local-linear curve.

    Plug-in moments: Lambda1(t) = (N1 h1)^{-1} sum K(u) Z Z', Lambda2(t)
    additionally weighted by the variance function at T_ij. Half-width per
    coefficient is z * sqrt(nu0 * [L1^{-1} L2 L1^{-1}]_ll / (N1 h1)). The
    O(h1^2) bias term is not subtracted.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0,1)")
    times, Z = dataset.times_all, dataset.z_all
    N, q = Z.shape
    grid = np.asarray(curve.grid, dtype=float)
    s2 = np.asarray(variance_fn(times), dtype=float)
    M = np.einsum("oa,ob->oab", Z, Z).reshape(N, q * q)
    u = (times[None, :] - grid[:, None]) / h1
    from .smoothing import epanechnikov

    w = epanechnikov(u) / (N * h1)
    L1 = (w @ M).reshape(-1, q, q)
    L2 = ((w * s2[None, :]) @ M).reshape(-1, q, q)
    z = ndtri(0.5 * (1.0 + level))
    hw = np.empty((len(grid), q))
    for k in range(len(grid)):
        c = np.linalg.cond(L1[k])
        if not np.isfinite(c) or c > 1e12:
            raise NumericalError(
                f"singular local moment matrix at t={grid[k]:.6g} in the CI bands"
            )
        psi = np.linalg.solve(L1[k], np.linalg.solve(L1[k], L2[k]).T)
        hw[k] = z * np.sqrt(EPAN_NU0 * np.clip(np.diag(psi), 0.0, None) / (N * h1))
    return CurveBands(grid=grid, half_widths=hw, level=level)


# ---------------------------------------------------------------------------
# result serialization


def write_result_dir(result, out_dir, config=None, bands=None, extra_manifest=()):
    """Write the fit artifacts: beta table, curve grids, covariance model,
    and a flat key=value manifest."""
    os.makedirs(out_dir, exist_ok=True)
    p = len(result.beta_eff)

    def fmt(v):
        return format(float(v), ".15g")

    with open(os.path.join(out_dir, "beta.csv"), "w", encoding="utf-8") as fh:
        fh.write("variant,coefficient,estimate,se,wald\n")
        for name, b, s in (
            ("independent", result.beta_init, result.se_init),
            ("efficient", result.beta_eff, result.se_eff),
        ):
            for k in range(p):
                wald = b[k] / s[k] if s[k] > 0 else float("nan")
                fh.write(
                    f"{name},beta{k + 1},{fmt(b[k])},{fmt(s[k])},{fmt(wald)}\n"
                )

    grid = result.g_ll_updated.grid
    q = result.g_ll_updated.values.shape[1]
    with open(os.path.join(out_dir, "curves.csv"), "w", encoding="utf-8") as fh:
        cols = ["t"]
        for l in range(q):
            cols += [f"g{l + 1}_ll_init", f"g{l + 1}_ll", f"g{l + 1}_spline"]
            if bands is not None:
                cols += [f"g{l + 1}_lo", f"g{l + 1}_hi"]
        fh.write(",".join(cols) + "\n")
        for i, t in enumerate(grid):
            row = [fmt(t)]
            for l in range(q):
                row += [
                    fmt(result.g_ll_init.values[i, l]),
                    fmt(result.g_ll_updated.values[i, l]),
                    fmt(result.g_spline_updated.values[i, l]),
                ]
                if bands is not None:
                    c = result.g_ll_updated.values[i, l]
                    row += [
                        fmt(c - bands.half_widths[i, l]),
                        fmt(c + bands.half_widths[i, l]),
                    ]
            fh.write(",".join(row) + "\n")

    write_covariance_csv(
        result.covariance_model,
        os.path.join(out_dir, "covariance_variance.csv"),
        os.path.join(out_dir, "covariance_surface.csv"),
    )

    pairs = [
        ("h1", fmt(result.h1)),
        ("h2", fmt(result.h2)),
        ("h3", fmt(result.h3)),
        ("kn", str(result.basis.dim)),
        ("spline_degree", str(result.basis.degree)),
        ("iterations", str(result.iterations)),
        ("eigen_retained", str(result.covariance_model.eigen_report["retained"])),
        ("eigen_zeroed", str(result.covariance_model.eigen_report["zeroed"])),
        (
            "eigen_lambda_min_before",
            fmt(result.covariance_model.eigen_report["lambda_min_before"]),
        ),
    ]
    if config is not None:
        pairs += [(f"config_{k}", v) for k, v in config_to_pairs(config)]
    pairs += list(extra_manifest)
    pairs += result.diagnostics.as_pairs()
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        for k, v in pairs:
            fh.write(f"{k}={v}\n")
