"""Shared dataset builders for the test suite."""

import numpy as np

from svcm.data import Subject, make_dataset
from svcm.simulate import SimConfig, simulate_dataset


def toy_dataset(n=12, m=4, p=2, q=2, seed=0, noise=1.0):
    """Small generic dataset with iid noise; not the study design."""
    rng = np.random.default_rng(seed)
    subjects = []
    for i in range(n):
        times = np.sort(rng.uniform(0, 1, m))
        x = rng.normal(size=(m, p))
        z = np.column_stack([np.ones(m)] + [rng.normal(size=m) for _ in range(q - 1)])
        y = x @ np.arange(1, p + 1) + z @ (np.ones(q) * 0.5) + noise * rng.normal(size=m)
        subjects.append(Subject(id=str(i), times=times, y=y, x=x, z=z))
    return make_dataset(subjects)


def study_dataset(n=30, rho=0.4, seed=0, **kw):
    """One draw from the simulation design used across the estimator tests."""
    cfg = SimConfig(n=n, rho=rho, seed=seed, **kw)
    return simulate_dataset(cfg)


def true_residuals(dataset, cfg, truth):
    """Y minus the true mean surface, i.e. the exact error realizations."""
    fixed = dataset.x_all @ np.asarray(cfg.beta0)
    varying = np.einsum("ij,ij->i", dataset.z_all, truth.g_obs)
    return dataset.y_all - fixed - varying
