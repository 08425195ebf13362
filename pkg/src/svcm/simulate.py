"""Synthetic longitudinal data with exactly known covariance structure.

Cluster sizes are m0 + Binomial(mr, p) with the binomial drawn by CDF
inversion from a single uniform (stable across platforms and library
versions). Observation j lives in the j-th of m0+mr equal subintervals of
[0,1]. Errors are exact multivariate normals with covariance
omega * rho^{|s-t|} via per-subject Cholesky factors. Every subject has its
own RNG stream keyed by (seed, 0, subject index), so generation order and
worker scheduling cannot change the data.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtr, ndtri

from .data import Subject, check_valid, make_dataset
from .errors import ConfigError, NumericalError


def true_g(t):
    """The four benchmark varying coefficients; shape (..., 4)."""
    t = np.asarray(t, dtype=float)
    out = np.stack(
        [
            3.5 * np.sin(2.0 * np.pi * t),
            5.0 * (1.0 - t) ** 2,
            3.5 * (np.exp(-((3.0 * t - 1.0) ** 2)) + np.exp(-((4.0 * t - 3.0) ** 2)))
            - 1.5,
            3.5 * np.sqrt(t),
        ],
        axis=-1,
    )
    return out


@dataclass(frozen=True)
class SimConfig:
    n: int
    m0: int = 6
    mr: int = 6
    binom_p: float = 0.65
    rho: float = 0.4
    omega: float = 4.95
    beta0: tuple = (5.0, 5.0, -5.0, -5.0)
    q: int = 4
    g_fn: callable = None          # defaults to true_g (requires q=4)
    truncate_covariates: float = 2.5   # None disables truncation
    scenario: str = "bounded"      # "bounded" | "diverging"
    B: float = 1.5
    C: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.m0 < 1 or self.mr < 0:
            raise ConfigError("need n >= 1, m0 >= 1, mr >= 0")
        if not 0.0 <= self.binom_p <= 1.0:
            raise ConfigError("binom_p must be in [0,1]")
        if not -1.0 < self.rho < 1.0:
            raise ConfigError("rho must be in (-1,1)")
        if self.omega <= 0:
            raise ConfigError("omega must be positive")
        if self.scenario not in ("bounded", "diverging"):
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.g_fn is None and self.q != 4:
            raise ConfigError("default varying coefficients require q=4")
        if self.q < 1:
            raise ConfigError("q must be >= 1")

    @property
    def p(self):
        return len(self.beta0)

    def g(self, t):
        fn = self.g_fn if self.g_fn is not None else true_g
        out = np.asarray(fn(t), dtype=float)
        return out


@dataclass(frozen=True)
class SimTruth:
    beta0: np.ndarray
    sigmas: tuple        # per-subject true error covariance matrices
    g_obs: np.ndarray    # stacked g0(T_ij), shape (N1, q)
    seed: int


def exponential_covariance(times, omega, rho):
    """omega * rho^{|s-t|} on the time grid; rho >= 0 required."""
    if rho < 0.0:
        raise NumericalError(
            "rho^{|s-t|} is not a real covariance for rho < 0 at non-integer lags"
        )
    d = np.abs(times[:, None] - times[None, :])
    if rho == 0.0:
        return omega * np.eye(len(times))
    return omega * rho**d


def binomial_by_inversion(u, m, pr):
    """Smallest k with Binomial(m, pr) CDF >= u, by a pmf recurrence scan."""
    if pr <= 0.0:
        return 0
    if pr >= 1.0:
        return m
    pmf = (1.0 - pr) ** m
    cdf = pmf
    k = 0
    while cdf < u and k < m:
        pmf *= (m - k) / (k + 1) * pr / (1.0 - pr)
        cdf += pmf
        k += 1
    return k


def _truncated_normal(rng, shape, bound):
    u = rng.random(shape)
    if bound is None:
        return ndtri(u)
    lo = ndtr(-bound)
    hi = ndtr(bound)
    return ndtri(lo + u * (hi - lo))


def _subject_rng(seed, i):
    return np.random.default_rng((int(seed), 0, int(i)))


def simulate_dataset(config, seed=None):
    """Generate (LongitudinalDataset, SimTruth) for the given design."""
    seed = config.seed if seed is None else int(seed)
    n, M = config.n, config.m0 + config.mr
    p, q = config.p, config.q
    beta0 = np.asarray(config.beta0, dtype=float)

    dense = np.zeros(n, dtype=bool)
    if config.scenario == "diverging":
        n0 = min(n, int(np.ceil(config.C * n**0.375)))
        pick = np.random.default_rng((int(seed), 1)).choice(n, size=n0, replace=False)
        dense[pick] = True

    subjects = []
    sigmas = []
    g_blocks = []
    for i in range(n):
        rng = _subject_rng(seed, i)
        m_i = config.m0 + binomial_by_inversion(rng.random(), config.mr, config.binom_p)
        if dense[i]:
            m_i = int(np.ceil(config.B * config.n**0.125 * m_i))
            times = np.linspace(0.0, 1.0, m_i)
        else:
            times = (np.arange(m_i) + rng.random(m_i)) / M
        covs = _truncated_normal(rng, (m_i, p + q - 1), config.truncate_covariates)
        x = covs[:, :p]
        z = np.hstack([np.ones((m_i, 1)), covs[:, p:]])
        sig = exponential_covariance(times, config.omega, config.rho)
        L = np.linalg.cholesky(sig)
        eps = L @ rng.standard_normal(m_i)
        g_vals = config.g(times).reshape(m_i, q)
        y = x @ beta0 + np.einsum("mq,mq->m", z, g_vals) + eps
        subjects.append(Subject(id=str(i), times=times, y=y, x=x, z=z))
        sigmas.append(sig)
        g_blocks.append(g_vals)

    dataset = check_valid(make_dataset(subjects))
    truth = SimTruth(
        beta0=beta0,
        sigmas=tuple(sigmas),
        g_obs=np.vstack(g_blocks),
        seed=seed,
    )
    return dataset, truth


def with_seed(config, seed):
    return replace(config, seed=int(seed))


def write_truth_csv(dataset, truth, obs_path, digest_path):
    """Sidecar truth files: per-observation g0 values and per-subject
    covariance factor digests (sha256 of the Cholesky factor bytes)."""
    import csv

    q = truth.g_obs.shape[1]
    with open(obs_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "t"] + [f"g{k + 1}" for k in range(q)])
        row = 0
        for s in dataset.subjects:
            for j in range(s.m):
                w.writerow(
                    [s.id, format(s.times[j], ".15g")]
                    + [format(v, ".15g") for v in truth.g_obs[row]]
                )
                row += 1
    with open(digest_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "m", "sigma_factor_sha256"])
        for s, sig in zip(dataset.subjects, truth.sigmas):
            L = np.linalg.cholesky(sig)
            w.writerow([s.id, s.m, hashlib.sha256(L.tobytes()).hexdigest()[:16]])
