"""Shared session fixtures: the three 200-replication benchmark studies.

These are expensive (several minutes each on one core) and are shared by
every statistical acceptance check. pd_floor is raised per design: the true
within-subject covariance matrices of these strongly correlated designs have
smallest eigenvalues around 1e-3 to 1e-1, and estimation error near the
sparse right edge of the time range can push assembled matrices indefinite.
A floor on that scale keeps a handful of bad matrices from dominating the
weighted fit while leaving the bulk of the spectrum untouched.
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from svcm.config import PipelineConfig
from svcm.harness import mc_study
from svcm.simulate import SimConfig

BASE_SEED = 20260814
REPS = 200


@pytest.fixture(scope="session")
def mc_n100_rho04():
    """SE ladder design: independence vs weighted vs oracle vs positive."""
    sim = SimConfig(n=100, rho=0.4, seed=BASE_SEED)
    cfg = PipelineConfig(pd_floor=0.05)
    return mc_study(
        sim, REPS, ("independent", "efficient", "oracle", "positive"),
        cfg, jobs=1,
    )


@pytest.fixture(scope="session")
def mc_n200_rho04():
    """Curve-accuracy and coverage design, with the iterated variant."""
    sim = SimConfig(n=200, rho=0.4, seed=BASE_SEED)
    cfg = PipelineConfig(pd_floor=0.08)
    return mc_study(
        sim, REPS, ("independent", "efficient", "iterative"),
        cfg, jobs=1, curves=True, g_ci_at=0.5,
    )


@pytest.fixture(scope="session")
def mc_n200_rho08():
    """Strong-correlation design: the largest efficiency gain."""
    sim = SimConfig(n=200, rho=0.8, seed=BASE_SEED)
    cfg = PipelineConfig(pd_floor=0.5)
    return mc_study(sim, REPS, ("independent", "efficient"), cfg, jobs=1)
