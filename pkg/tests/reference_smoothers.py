"""Brute-force local polynomial fits, used only as test oracles.

Everything here is written point by point with explicit design matrices and
numpy.linalg.lstsq, deliberately avoiding the package's factorized kernel-sum
assembly so the two can disagree when one of them is wrong.
"""

import numpy as np


def epan(u):
    u = np.asarray(u, dtype=float)
    return 0.75 * np.maximum(1.0 - u * u, 0.0)


def naive_vc_fit(times, Z, resp, h, t0):
    """Level part of the local-linear varying-coefficient fit at t0.

    Weighted LS of resp on [Z, Z*(T-t0)/h] with Epanechnikov weights; the
    first q coefficients are the curve values.
    """
    times = np.asarray(times, float)
    Z = np.asarray(Z, float)
    resp = np.asarray(resp, float)
    u = (times - t0) / h
    w = epan(u)
    D = np.hstack([Z, Z * u[:, None]])
    sw = np.sqrt(w)
    sol, *_ = np.linalg.lstsq(D * sw[:, None], resp * sw, rcond=None)
    return sol[: Z.shape[1]]


def naive_variance_fit(times, residuals, h, t0):
    """Local-linear fit to squared residuals (q=1, Z=1)."""
    times = np.asarray(times, float)
    return naive_vc_fit(times, np.ones((len(times), 1)), residuals**2, h, t0)[0]


def naive_surface_fit(offsets, times, residuals, h, s0, t0):
    """Local-plane covariance surface value at (s0, t0).

    Enumerates every within-subject ordered pair (j, j'), j != j',
    response e_j * e_j', regressors (1, (T_j-s0)/h, (T_j'-t0)/h), product
    Epanechnikov weights.
    """
    times = np.asarray(times, float)
    e = np.asarray(residuals, float)
    rows, resp, wts = [], [], []
    for i in range(len(offsets) - 1):
        lo, hi = offsets[i], offsets[i + 1]
        for j in range(lo, hi):
            for k in range(lo, hi):
                if j == k:
                    continue
                us = (times[j] - s0) / h
                ut = (times[k] - t0) / h
                w = epan(us) * epan(ut)
                if w <= 0.0:
                    continue
                rows.append([1.0, us, ut])
                resp.append(e[j] * e[k])
                wts.append(w)
    if not rows:
        return np.nan
    D = np.asarray(rows)
    r = np.asarray(resp)
    sw = np.sqrt(np.asarray(wts))
    sol, *_ = np.linalg.lstsq(D * sw[:, None], r * sw, rcond=None)
    return sol[0]


def naive_loso_scores(dataset, Z, target, candidates):
    """Leave-one-subject-out CV scores by literally refitting per subject.

    For each held-out subject the local fit at each of its observation
    times is recomputed from scratch on the remaining subjects.
    """
    times = dataset.times_all
    scores = []
    for h in candidates:
        total = 0.0
        ok = True
        for i in range(dataset.n):
            sl = dataset.slice_of(i)
            keep = np.ones(len(times), dtype=bool)
            keep[sl] = False
            for j in range(sl.start, sl.stop):
                pred_coef = naive_vc_fit(
                    times[keep], Z[keep], target[keep], h, times[j]
                )
                pred = Z[j] @ pred_coef
                if not np.isfinite(pred):
                    ok = False
                    break
                total += (target[j] - pred) ** 2
            if not ok:
                break
        scores.append(total if ok else np.inf)
    return np.asarray(scores)
