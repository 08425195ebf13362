"""Local polynomial smoothers for the residual-based covariance pipeline.

Three estimators share the machinery here:

* a vector varying-coefficient smoother (local linear in t, regressors
  Z (x) (1, u) with u the scaled time offset),
* a variance-curve smoother (the q=1, Z=1 special case applied to squared
  residuals),
* a covariance-surface smoother (local plane over within-subject ordered
  pairs j != j' with a product kernel).

All kernel sums are assembled as matrix products of per-observation feature
matrices, never per-point Python loops, so grids of a few hundred points and
a few thousand observations stay in the tens of milliseconds. Local systems
are regularized with ridge_eps*I; points whose system remains ill-conditioned
(cond > 1e12) fall back to the local-constant value, and points whose kernel
window holds no data at all (possible near t=1 when late design intervals are
sparsely populated) take the local-constant value with the window doubled
until it is nonempty. Both events are counted in the diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularSmootherError

# Epanechnikov kernel constants: nu0 = int K^2, mu2 = int u^2 K
EPAN_NU0 = 0.6
EPAN_MU2 = 0.2

_COND_LIMIT = 1e12


def epanechnikov(u):
    u = np.asarray(u, dtype=float)
    return 0.75 * np.maximum(1.0 - u * u, 0.0)


@dataclass(frozen=True)
class CurveEstimate:
    """A q-vector curve on a grid plus an exact off-grid evaluator."""

    grid: np.ndarray
    values: np.ndarray  # (len(grid), q)
    _fn: callable

    def __call__(self, ts):
        ts = np.asarray(ts, dtype=float)
        scalar = ts.ndim == 0
        out = self._fn(np.atleast_1d(ts))
        return out[0] if scalar else out


# ---------------------------------------------------------------------------
# 1-D assembly


def _chunk_rows(n_obs, budget=3_000_000):
    return max(16, budget // max(n_obs, 1))


def _assemble_1d(times, Z, resp, h, eval_ts):
    """Kernel-weighted moments for the local-linear system at each eval point.

    Returns S (E,3,q,q) with S[:,k] = sum w u^k Z Z^T, b (E,2,q) with
    b[:,k] = sum w u^k resp Z, and wsum (E,) = sum of raw kernel weights
    (window-emptiness indicator). Weights carry the 1/(N1 h) normalization.
    """
    times = np.asarray(times, float)
    Z = np.asarray(Z, float)
    resp = np.asarray(resp, float)
    eval_ts = np.asarray(eval_ts, float)
    N, q = Z.shape
    E = len(eval_ts)
    M = np.einsum("oa,ob->oab", Z, Z).reshape(N, q * q)
    R = resp[:, None] * Z
    S = np.empty((E, 3, q, q))
    b = np.empty((E, 2, q))
    wsum = np.empty(E)
    scale = 1.0 / (N * h)
    for lo in range(0, E, _chunk_rows(N)):
        hi = min(lo + _chunk_rows(N), E)
        u = (times[None, :] - eval_ts[lo:hi, None]) / h
        w = epanechnikov(u) * scale
        wsum[lo:hi] = w.sum(axis=1)
        wu = w * u
        wuu = wu * u
        S[lo:hi, 0] = (w @ M).reshape(-1, q, q)
        S[lo:hi, 1] = (wu @ M).reshape(-1, q, q)
        S[lo:hi, 2] = (wuu @ M).reshape(-1, q, q)
        b[lo:hi, 0] = w @ R
        b[lo:hi, 1] = wu @ R
    return S, b, wsum


def _own_contribution_1d(sub_times, sub_Z, sub_resp, h, norm):
    """Same moments as _assemble_1d but of one subject against its own
    observation points (eval points = that subject's times)."""
    m, q = sub_Z.shape
    u = (sub_times[None, :] - sub_times[:, None]) / h
    w = epanechnikov(u) * norm
    M = np.einsum("oa,ob->oab", sub_Z, sub_Z).reshape(m, q * q)
    R = sub_resp[:, None] * sub_Z
    wu = w * u
    S = np.stack(
        [
            (w @ M).reshape(m, q, q),
            (wu @ M).reshape(m, q, q),
            (wu * u @ M).reshape(m, q, q),
        ],
        axis=1,
    )
    b = np.stack([w @ R, wu @ R], axis=1)
    return S, b, w.sum(axis=1)


def _nw_widened_1d(times, Z, resp, h, t0, ridge_eps):
    """Local-constant value at t0 with the window doubled until it holds data.

    Totality guard: an empty window would otherwise abort the pipeline, so
    the fallback chain ends in a solvable local-constant system. h >= 2
    covers all of [0,1] with positive weight, so the loop terminates.
    """
    q = Z.shape[1]
    width = float(h)
    while width < 4.0:
        width *= 2.0
        w = epanechnikov((times - t0) / width)
        if not np.any(w > 0.0):
            continue
        S0 = (w[:, None] * Z).T @ Z + ridge_eps * np.eye(q)
        c0 = np.linalg.cond(S0)
        if np.isfinite(c0) and c0 <= _COND_LIMIT:
            return np.linalg.solve(S0, (w * resp) @ Z)
    raise SingularSmootherError(f"t={t0:.6g}", "empty kernel window after widening")


def _solve_local(S, b, ridge_eps, where, diag=None, score_mode=False, widen=None):
    """Solve the stacked 2q x 2q local systems; return level coefficients.

    score_mode: instead of raising on empty/singular windows, mark those
    points invalid (NaN) so CV can assign an infinite score. widen: callable
    idx -> level vector used for points whose window is empty.
    """
    E, _, q, _ = S.shape
    A = np.empty((E, 2 * q, 2 * q))
    A[:, 0::2, 0::2] = S[:, 0]
    A[:, 0::2, 1::2] = S[:, 1]
    A[:, 1::2, 0::2] = S[:, 1]
    A[:, 1::2, 1::2] = S[:, 2]
    rhs = np.empty((E, 2 * q))
    rhs[:, 0::2] = b[:, 0]
    rhs[:, 1::2] = b[:, 1]

    eye = np.eye(2 * q)
    empty = ~(np.abs(S[:, 0]).sum(axis=(1, 2)) > 0.0)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(A + ridge_eps * eye)
    bad = ~np.isfinite(cond) | (cond > _COND_LIMIT) | empty
    out = np.full((E, q), np.nan)
    if np.any(~bad):
        sol = np.linalg.solve(A[~bad] + ridge_eps * eye, rhs[~bad, :, None])
        out[~bad] = sol[:, 0::2, 0]
    n_fallback = 0
    n_widened = 0
    for idx in np.flatnonzero(bad):
        if empty[idx]:
            if score_mode:
                continue
            if widen is None:
                raise SingularSmootherError(where(idx), "empty kernel window")
            out[idx] = widen(idx)
            n_widened += 1
            continue
        # local-constant fallback on the zeroth-moment block
        S0 = S[idx, 0] + ridge_eps * np.eye(q)
        c0 = np.linalg.cond(S0)
        if not np.isfinite(c0) or c0 > _COND_LIMIT:
            if score_mode:
                continue
            raise SingularSmootherError(
                where(idx), f"singular after ridge (cond {c0:.2e})"
            )
        out[idx] = np.linalg.solve(S0, b[idx, 0])
        n_fallback += 1
    if diag is not None and n_fallback:
        diag.bump("nw_fallback", n_fallback)
    if diag is not None and n_widened:
        diag.bump("widened_window", n_widened)
    return out


def local_linear_vc(dataset, pseudo, h, eval_points, *, ridge_eps=1e-10, diag=None):
    """Varying-coefficient local-linear fit of pseudo-responses on Z.

    At each t solves the 2q x 2q kernel-weighted system with regressors
    Z (x) (1, (T-t)/h) and keeps the level part, i.e. the curve estimate
    g(t) of the model pseudo ~ Z^T g(T).
    """
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    times, Z = dataset.times_all, dataset.z_all
    pseudo = np.asarray(pseudo, float)
    eval_points = np.asarray(eval_points, float)

    def fit_at(ts):
        S, b, _ = _assemble_1d(times, Z, pseudo, h, ts)
        return _solve_local(
            S,
            b,
            ridge_eps,
            lambda i: f"t={ts[i]:.6g}",
            diag=diag,
            widen=lambda i: _nw_widened_1d(times, Z, pseudo, h, ts[i], ridge_eps),
        )

    values = fit_at(eval_points)
    return CurveEstimate(grid=eval_points, values=values, _fn=fit_at)


def local_linear_variance(dataset, residuals, h, ts, *, ridge_eps=1e-10, diag=None):
    """Variance curve: local-linear fit to squared residuals (level part)."""
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    ts = np.asarray(ts, dtype=float)
    scalar = ts.ndim == 0
    ones = np.ones((dataset.N1, 1))
    sq = np.asarray(residuals, float) ** 2
    pts = np.atleast_1d(ts)
    S, b, _ = _assemble_1d(dataset.times_all, ones, sq, h, pts)
    out = _solve_local(
        S,
        b,
        ridge_eps,
        lambda i: f"t={pts[i]:.6g}",
        diag=diag,
        widen=lambda i: _nw_widened_1d(
            dataset.times_all, ones, sq, h, pts[i], ridge_eps
        ),
    )[:, 0]
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# 2-D (covariance surface) assembly


def _nw_widened_pair(times, resid, offsets, h, s0, t0):
    """Local-constant surface value at (s0, t0), window doubled until some
    within-subject pair falls inside the product kernel. Pairs (j, j) are
    excluded as everywhere else; the 1/(N2 h^2) norm cancels in the ratio."""
    width = float(h)
    while width < 4.0:
        width *= 2.0
        ks = epanechnikov((times - s0) / width)[None, :]
        kt = epanechnikov((times - t0) / width)[None, :]
        p00 = _pair_sums(ks, kt, offsets)[0, 0]
        if p00 > 0.0:
            q00 = _pair_sums(ks * resid[None, :], kt * resid[None, :], offsets)[0, 0]
            return q00 / p00
    raise SingularSmootherError(
        f"(s,t)=({s0:.6g},{t0:.6g})",
        "no within-subject pair even after widening",
    )


def _axis_features(times, resid, h, pts):
    """Per-observation feature matrices on one axis of the product kernel.

    F[a] has entry [g, o] = K(u) u^a, u = (times[o]-pts[g])/h, for powers
    a = 0,1,2; Fe[a] additionally carries the residual factor, a = 0,1.
    """
    u = (times[None, :] - pts[:, None]) / h
    k = epanechnikov(u)
    F0 = k
    F1 = k * u
    F2 = F1 * u
    Fe0 = k * resid[None, :]
    Fe1 = F1 * resid[None, :]
    return (F0, F1, F2), (Fe0, Fe1)


def _pair_sums(Fa, Fb, starts_ends, minus_diag=True):
    """Sum over within-subject ordered pairs (j, j') of Fa[:, j] * Fb[:, j'].

    Factorized as per-subject (row-sum product) minus the j = j' diagonal.
    starts_ends is the dataset offsets vector.
    """
    Ga = np.add.reduceat(Fa, starts_ends[:-1], axis=1)
    Gb = np.add.reduceat(Fb, starts_ends[:-1], axis=1)
    total = Ga @ Gb.T
    if minus_diag:
        total -= Fa @ Fb.T
    return total


def cov_surface(dataset, residuals, h, s_pts, t_pts, *, ridge_eps=1e-10, diag=None):
    """Local-plane covariance surface on the s_pts x t_pts grid.

    Response for an ordered pair (j, j'), j != j', within subject i is
    eps_ij * eps_ij'; the regressors are (1, (T_ij-s)/h, (T_ij'-t)/h) with a
    product Epanechnikov kernel. Returns the (len(s_pts), len(t_pts)) level
    matrix. Sums carry the 1/(N2 h^2) normalization.
    """
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    if dataset.N2 < 1:
        raise SingularSmootherError("surface", "no within-subject pairs (N2=0)")
    times = dataset.times_all
    resid = np.asarray(residuals, float)
    s_pts = np.asarray(s_pts, float)
    t_pts = np.asarray(t_pts, float)
    offsets = dataset.offsets
    norm = 1.0 / (dataset.N2 * h * h)

    Fs, Fse = _axis_features(times, resid, h, s_pts)
    same = t_pts is s_pts or (
        len(t_pts) == len(s_pts) and np.array_equal(t_pts, s_pts)
    )
    Ft, Fte = (Fs, Fse) if same else _axis_features(times, resid, h, t_pts)

    P = {}
    for a, bb in ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)):
        P[a, bb] = _pair_sums(Fs[a], Ft[bb], offsets) * norm
    Q = {}
    for a, bb in ((0, 0), (1, 0), (0, 1)):
        Q[a, bb] = _pair_sums(Fse[a], Fte[bb], offsets) * norm

    S, T = len(s_pts), len(t_pts)
    A = np.empty((S, T, 3, 3))
    A[..., 0, 0] = P[0, 0]
    A[..., 0, 1] = A[..., 1, 0] = P[1, 0]
    A[..., 0, 2] = A[..., 2, 0] = P[0, 1]
    A[..., 1, 1] = P[2, 0]
    A[..., 1, 2] = A[..., 2, 1] = P[1, 1]
    A[..., 2, 2] = P[0, 2]
    rhs = np.stack([Q[0, 0], Q[1, 0], Q[0, 1]], axis=-1)

    A = A.reshape(-1, 3, 3)
    rhs = rhs.reshape(-1, 3)
    eye3 = np.eye(3)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(A + ridge_eps * eye3)
    empty = ~(P[0, 0].reshape(-1) > 0.0)
    bad = ~np.isfinite(cond) | (cond > _COND_LIMIT) | empty
    out = np.full(S * T, np.nan)
    if np.any(~bad):
        sol = np.linalg.solve(A[~bad] + ridge_eps * eye3, rhs[~bad, :, None])
        out[~bad] = sol[:, 0, 0]
    n_fallback = 0
    n_widened = 0
    for idx in np.flatnonzero(bad):
        si, ti = divmod(idx, T)
        if empty[idx]:
            out[idx] = _nw_widened_pair(
                times, resid, offsets, h, s_pts[si], t_pts[ti]
            )
            n_widened += 1
            continue
        out[idx] = rhs[idx, 0] / A[idx, 0, 0]
        n_fallback += 1
    if diag is not None and n_fallback:
        diag.bump("nw_fallback_surface", n_fallback)
    if diag is not None and n_widened:
        diag.bump("widened_window_surface", n_widened)
    return out.reshape(S, T)


def local_linear_cov2d(dataset, residuals, h, s, t, *, ridge_eps=1e-10, diag=None):
    """Covariance surface value at a single (s, t).

    The point is evaluated in the order-canonical form (min, max) so that
    cov2d(s, t) == cov2d(t, s) bitwise.
    """
    lo, hi = (s, t) if s <= t else (t, s)
    return float(
        cov_surface(
            dataset,
            residuals,
            h,
            np.array([lo]),
            np.array([hi]),
            ridge_eps=ridge_eps,
            diag=diag,
        )[0, 0]
    )


# ---------------------------------------------------------------------------
# leave-one-subject-out bandwidth selection


def default_cv_grid(times, n_points=10):
    """Geometric candidate grid around the normal-reference rate value."""
    times = np.asarray(times, float)
    sd = times.std()
    if sd == 0.0:
        sd = 0.25
    h_rot = 1.06 * sd * len(times) ** (-0.2)
    return tuple(np.geomspace(0.5 * h_rot, 3.0 * h_rot, n_points))


def _cv_score(dataset, Z, target, h, ridge_eps):
    """Held-out squared error with per-subject exclusion of a full-data fit.

    The local fit at any point is a weighted LS solve over all observations;
    leaving subject i out only removes its additive contribution to the
    moment matrices, so the held-out fit at T_ij is (A - A_i)^{-1}(b - b_i)
    assembled from the full-data moments computed once.
    """
    times = dataset.times_all
    N, q = Z.shape
    S, b, wsum = _assemble_1d(times, Z, target, h, times)
    norm = 1.0 / (N * h)
    for i in range(dataset.n):
        sl = dataset.slice_of(i)
        So, bo, wo = _own_contribution_1d(times[sl], Z[sl], target[sl], h, norm)
        S[sl] -= So
        b[sl] -= bo
        wsum[sl] -= wo
    # guard tiny negative residue from cancellation
    wsum = np.where(wsum < 1e-300, 0.0, wsum)
    S[:, 0] *= np.where(wsum > 0.0, 1.0, 0.0)[:, None, None]
    fits = _solve_local(
        S, b, ridge_eps, lambda i: f"t={times[i]:.6g}", score_mode=True
    )
    preds = np.einsum("oq,oq->o", Z, fits)
    if not np.all(np.isfinite(preds)):
        return np.inf
    return float(np.sum((target - preds) ** 2))


def loso_cv(dataset, pseudo, candidates, smoother="curve", *, ridge_eps=1e-10):
    """Leave-one-subject-out CV over bandwidth candidates.

    smoother="curve" scores the varying-coefficient smoother on the given
    pseudo-responses; smoother="variance" scores the variance smoother on
    squared values of the input. Ties break toward the smaller bandwidth.
    Returns (chosen h, score array aligned with the sorted candidate list).
    """
    cands = np.sort(np.asarray(tuple(candidates), dtype=float))
    if len(cands) == 0 or np.any(cands <= 0):
        raise ValueError("candidates must be positive and nonempty")
    if dataset.n < 2:
        raise ValueError("leave-one-subject-out needs n >= 2")
    if smoother == "curve":
        Z = dataset.z_all
        target = np.asarray(pseudo, float)
    elif smoother == "variance":
        Z = np.ones((dataset.N1, 1))
        target = np.asarray(pseudo, float) ** 2
    else:
        raise ValueError(f"unknown smoother {smoother!r}")
    scores = np.array([_cv_score(dataset, Z, target, h, ridge_eps) for h in cands])
    if not np.any(np.isfinite(scores)):
        raise SingularSmootherError(
            "cross-validation", "every candidate bandwidth yields singular fits"
        )
    return float(cands[int(np.argmin(scores))]), scores
