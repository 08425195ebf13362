"""Equispaced clamped B-spline basis on [0,1].

Evaluation delegates to scipy's de Boor implementation; the knot layout is
kn - degree - 1 equispaced interior knots with (degree+1)-fold boundary
repetition, so the basis has dimension kn and forms a partition of unity on
the closed interval (t=1 falls in the last, closed, span).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class SplineBasis:
    degree: int
    dim: int
    knots: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "knots", np.asarray(self.knots, dtype=float))


def build_basis(kn, degree):
    """Basis of dimension kn and given degree; kn >= degree+1 required."""
    if kn < degree + 1:
        raise ConfigError(f"kn={kn} must be >= degree+1={degree + 1}")
    n_interior = kn - degree - 1
    interior = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
    knots = np.concatenate(
        [np.zeros(degree + 1), interior, np.ones(degree + 1)]
    )
    return SplineBasis(degree=degree, dim=kn, knots=knots)


def design_matrix(basis, ts):
    """Rows B(t) for each t; shape (len(ts), kn)."""
    ts = np.asarray(ts, dtype=float)
    if ts.ndim == 0:
        ts = ts[None]
    if np.any(ts < 0.0) or np.any(ts > 1.0):
        bad = ts[(ts < 0.0) | (ts > 1.0)][0]
        raise DataError(f"spline evaluation point {bad} outside [0,1]")
    return BSpline.design_matrix(
        ts, basis.knots, basis.degree, extrapolate=False
    ).toarray()


def eval_basis(basis, t):
    """B(t) as a length-kn vector for a single point t in [0,1]."""
    return design_matrix(basis, np.atleast_1d(float(t)))[0]


def design_row(z, b):
    """Kronecker row z (x) b: entry (l-1)*kn + k is z_l * b_k."""
    return np.kron(np.asarray(z, dtype=float), np.asarray(b, dtype=float))


def vc_design(basis, times, z):
    """Stacked varying-coefficient design W with rows Z_ij (x) B(T_ij).

    times: (m,), z: (m,q) -> (m, q*kn). Column blocks are ordered by the z
    coordinate, matching design_row.
    """
    B = design_matrix(basis, times)
    m, q = z.shape
    return np.einsum("ml,mk->mlk", z, B).reshape(m, q * basis.dim)
