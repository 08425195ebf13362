"""Nonparametric within-subject covariance model.

The model couples a variance curve sigma2(t) (diagonal) with a smoothed,
spectrally truncated covariance surface sigma(s,t) (off-diagonal). The
truncation acts on the gridded surface as a plain symmetric matrix:
eigenvalues <= lambda_L are zeroed and the surface is reconstructed, which
enforces PSD up to interpolation. The diagonal of every materialized
Sigma_i always comes from sigma2(T_ij), never from the truncated surface,
so the nugget sigma2(t) - sigma(t,t) survives truncation.
"""

from __future__ import annotations

from dataclasses import dataclass

import csv

import numpy as np

from .smoothing import cov_surface, local_linear_variance


@dataclass(frozen=True)
class CovarianceModel:
    grid: np.ndarray            # shared evaluation grid on [0,1], length G
    variance: np.ndarray        # sigma2 values on grid (floored positive)
    surface: np.ndarray         # G x G truncated covariance surface
    raw_surface: np.ndarray     # pre-truncation, for re-thresholding variants
    lambda_l: float
    eigen_report: dict          # retained/zeroed counts, lambda_min before
    pd_floor: float = 1e-8


def truncate_surface(raw, lambda_l):
    """Zero eigenvalues <= lambda_l of the symmetrized grid matrix.

    Returns (surface, eigen_report). The input is symmetrized as
    (S + S')/2 before the decomposition.
    """
    sym = 0.5 * (raw + raw.T)
    vals, vecs = np.linalg.eigh(sym)
    keep = vals > lambda_l
    report = {
        "retained": int(keep.sum()),
        "zeroed": int((~keep).sum()),
        "lambda_min_before": float(vals.min()),
        "lambda_max_before": float(vals.max()),
    }
    truncated = (vecs[:, keep] * vals[keep]) @ vecs[:, keep].T
    truncated = 0.5 * (truncated + truncated.T)
    return truncated, report


def floor_variance(values, diag=None):
    """Clip nonpositive variance values to 0.05 x median positive value.

    With no positive values at all (degenerate, e.g. noise-free input) the
    curve is floored at a near-zero positive constant so the model invariant
    (strictly positive variance) still holds; the pd_floor repair in
    sigma_matrix then keeps the materialized matrices usable.
    """
    values = np.asarray(values, dtype=float)
    pos = values[values > 0.0]
    if len(pos) == 0:
        if diag is not None:
            diag.bump("variance_floor_degenerate")
        floor = max(1e-12, 0.05 * float(np.median(np.abs(values))))
        return np.maximum(values, floor)
    floor = 0.05 * np.median(pos)
    n_low = int((values < floor).sum())
    if n_low and diag is not None:
        diag.bump("variance_floor_applied", n_low)
    return np.maximum(values, floor)


def build_covariance_model(
    dataset,
    residuals,
    h2,
    h3,
    lambda_l=0.0,
    grid_size=101,
    *,
    ridge_eps=1e-10,
    pd_floor=1e-8,
    diag=None,
):
    """Steps 4-5 plus truncation: variance curve and PSD surface on a grid."""
    if grid_size < 11:
        raise ValueError("grid_size must be >= 11")
    grid = np.linspace(0.0, 1.0, grid_size)
    var_vals = local_linear_variance(
        dataset, residuals, h2, grid, ridge_eps=ridge_eps, diag=diag
    )
    var_vals = floor_variance(var_vals, diag=diag)
    raw = cov_surface(
        dataset, residuals, h3, grid, grid, ridge_eps=ridge_eps, diag=diag
    )
    raw = 0.5 * (raw + raw.T)
    surface, report = truncate_surface(raw, lambda_l)
    if report["retained"] == 0 and diag is not None:
        diag.note("covariance surface fully truncated (all eigenvalues <= lambda_l)")
    return CovarianceModel(
        grid=grid,
        variance=var_vals,
        surface=surface,
        raw_surface=raw,
        lambda_l=float(lambda_l),
        eigen_report=report,
        pd_floor=float(pd_floor),
    )


def retruncate(model, lambda_l):
    """Same smoothed surface, different eigenvalue threshold."""
    surface, report = truncate_surface(model.raw_surface, lambda_l)
    return CovarianceModel(
        grid=model.grid,
        variance=model.variance,
        surface=surface,
        raw_surface=model.raw_surface,
        lambda_l=float(lambda_l),
        eigen_report=report,
        pd_floor=model.pd_floor,
    )


def _bilinear(grid, surface, s, t):
    """Bilinear interpolation of the gridded surface at points (s[k], t[k])."""
    G = len(grid)
    step = grid[1] - grid[0]
    fi = np.clip((s - grid[0]) / step, 0.0, G - 1.0)
    fj = np.clip((t - grid[0]) / step, 0.0, G - 1.0)
    i0 = np.minimum(fi.astype(int), G - 2)
    j0 = np.minimum(fj.astype(int), G - 2)
    ds = fi - i0
    dt = fj - j0
    return (
        surface[i0, j0] * (1 - ds) * (1 - dt)
        + surface[i0 + 1, j0] * ds * (1 - dt)
        + surface[i0, j0 + 1] * (1 - ds) * dt
        + surface[i0 + 1, j0 + 1] * ds * dt
    )


def sigma_matrix(model, times, diag=None):
    """Materialize Sigma_i for one subject's times.

    Diagonal: linear interpolation of the variance curve. Off-diagonal:
    bilinear interpolation of the truncated surface. If the assembled matrix
    has lambda_min < pd_floor, (pd_floor - lambda_min) * I is added; the
    ridge repair cannot fail and is counted in the diagnostics.
    """
    times = np.asarray(times, dtype=float)
    m = len(times)
    var = np.interp(times, model.grid, model.variance)
    if m == 1:
        return np.array([[max(var[0], model.pd_floor)]])
    S, T = np.meshgrid(times, times, indexing="ij")
    out = _bilinear(model.grid, model.surface, S.ravel(), T.ravel()).reshape(m, m)
    out = 0.5 * (out + out.T)
    out[np.diag_indices(m)] = var
    lam = float(np.linalg.eigvalsh(out).min())
    if lam < model.pd_floor:
        out = out + (model.pd_floor - lam) * np.eye(m)
        if diag is not None:
            diag.bump("pd_floor_repair")
    return out


# ---------------------------------------------------------------------------
# serialization


def write_covariance_csv(model, variance_path, surface_path):
    """Serialize the model as a CSV pair (variance curve; surface grid)."""
    with open(variance_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "sigma2"])
        for t, v in zip(model.grid, model.variance):
            w.writerow([format(t, ".15g"), format(v, ".15g")])
    with open(surface_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "t", "sigma", "sigma_raw"])
        for i, s in enumerate(model.grid):
            for j, t in enumerate(model.grid):
                w.writerow(
                    [
                        format(s, ".15g"),
                        format(t, ".15g"),
                        format(model.surface[i, j], ".15g"),
                        format(model.raw_surface[i, j], ".15g"),
                    ]
                )


def read_covariance_csv(variance_path, surface_path, lambda_l=0.0, pd_floor=1e-8):
    """Rebuild a CovarianceModel from its CSV pair (grids must be shared)."""
    with open(variance_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    grid = np.array([float(r[0]) for r in rows])
    variance = np.array([float(r[1]) for r in rows])
    G = len(grid)
    surface = np.empty((G, G))
    raw = np.empty((G, G))
    with open(surface_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for k, row in enumerate(reader):
            i, j = divmod(k, G)
            surface[i, j] = float(row[2])
            raw[i, j] = float(row[3])
    _, report = truncate_surface(raw, lambda_l)
    return CovarianceModel(
        grid=grid,
        variance=variance,
        surface=surface,
        raw_surface=raw,
        lambda_l=lambda_l,
        eigen_report=report,
        pd_floor=pd_floor,
    )
