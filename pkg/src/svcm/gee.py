"""Identity-link GEE spline solver.

Minimizes sum_i (Y_i - X_i b - W_i g)' V_i^{-1} (Y_i - X_i b - W_i g) where
W_i stacks Z_ij (x) B(T_ij). The normal equations are solved by block
elimination: factor H22 = sum W'V^{-1}W, form the Schur complement
H11.2 = H11 - H12 H22^{-1} H21, solve for beta, back-substitute gamma.
V_i^{-1} is never formed; per-subject Cholesky factors whiten X_i, W_i, Y_i.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .errors import NumericalError, RankDeficiencyError
from .smoothing import CurveEstimate
from .splines import design_matrix, vc_design

_RANK_RTOL = 1e-10


@dataclass(frozen=True)
class WeightSpec:
    """Per-subject inverse-weight matrices V_i for the GEE objective.

    kind is one of "identity", "matrices" (explicit SPD list), or "model"
    (materialize from a covariance model at each subject's times).
    """

    kind: str
    matrices: tuple = None
    model: object = None

    @staticmethod
    def identity():
        return WeightSpec(kind="identity")

    @staticmethod
    def from_matrices(mats):
        mats = tuple(np.asarray(m, dtype=float) for m in mats)
        for k, m in enumerate(mats):
            if not np.allclose(m, m.T, atol=1e-10):
                raise NumericalError(f"weight matrix {k} is not symmetric")
        return WeightSpec(kind="matrices", matrices=mats)

    @staticmethod
    def from_model(model):
        return WeightSpec(kind="model", model=model)

    def materialize(self, dataset, diag=None):
        """List of V_i, or None for identity weights."""
        if self.kind == "identity":
            return None
        if self.kind == "matrices":
            if len(self.matrices) != dataset.n:
                raise NumericalError(
                    f"{len(self.matrices)} weight matrices for {dataset.n} subjects"
                )
            return list(self.matrices)
        from .covariance import sigma_matrix

        return [
            sigma_matrix(self.model, s.times, diag=diag) for s in dataset.subjects
        ]


@dataclass
class GeeFit:
    beta: np.ndarray
    gamma: np.ndarray
    h11: np.ndarray
    h12: np.ndarray
    h22: np.ndarray
    h11_dot2: np.ndarray
    basis: object
    residuals: np.ndarray          # unwhitened Y - X beta - W gamma, stacked
    weight_kind: str
    ee_x: float                    # inf norms of the estimating equations
    ee_w: float
    _f112: tuple = field(repr=False, default=None)  # cho_factor of h11_dot2

    @property
    def p(self):
        return len(self.beta)


def stacked_designs(dataset, basis):
    """(X_all, W_all, y_all) stacked over observations, W from the basis."""
    W = np.vstack(
        [vc_design(basis, s.times, s.z) for s in dataset.subjects]
    )
    return dataset.x_all, W, dataset.y_all


def _whiten(dataset, X_all, W_all, y_all, sigmas):
    """Apply L_i^{-1} per subject (L_i = chol(V_i)); identity passes through."""
    if sigmas is None:
        return X_all, W_all, y_all
    Xw = np.empty_like(X_all)
    Ww = np.empty_like(W_all)
    yw = np.empty_like(y_all)
    for i in range(dataset.n):
        sl = dataset.slice_of(i)
        try:
            L = sla.cholesky(sigmas[i], lower=True)
        except sla.LinAlgError as e:
            lam = float(np.linalg.eigvalsh(sigmas[i]).min())
            raise NumericalError(
                f"weight matrix for subject {dataset.subjects[i].id} is not "
                f"positive definite (lambda_min {lam:.3e})"
            ) from e
        rhs = np.column_stack([X_all[sl], W_all[sl], y_all[sl]])
        sol = sla.solve_triangular(L, rhs, lower=True)
        pX = X_all.shape[1]
        Xw[sl] = sol[:, :pX]
        Ww[sl] = sol[:, pX:-1]
        yw[sl] = sol[:, -1]
    return Xw, Ww, yw


def _checked_cho(mat, block):
    try:
        f = sla.cho_factor(mat, lower=True)
    except sla.LinAlgError:
        lam = float(np.linalg.eigvalsh(mat).min())
        raise RankDeficiencyError(block, lam) from None
    d = np.diag(f[0]) ** 2
    if d.min() < _RANK_RTOL * d.max():
        raise RankDeficiencyError(block, float(d.min()))
    return f


def gee_spline_fit(dataset, basis, weights, *, designs=None, diag=None):
    """Solve the GEE spline normal equations under the given weights.

    designs, when provided, must be the stacked_designs(dataset, basis)
    triple; passing it avoids rebuilding W for repeated fits.
    """
    X_all, W_all, y_all = designs if designs is not None else stacked_designs(
        dataset, basis
    )
    sigmas = weights.materialize(dataset, diag=diag)
    Xw, Ww, yw = _whiten(dataset, X_all, W_all, y_all, sigmas)

    h11 = Xw.T @ Xw
    h12 = Xw.T @ Ww
    h22 = Ww.T @ Ww
    c1 = Xw.T @ yw
    c2 = Ww.T @ yw

    f22 = _checked_cho(h22, "H22")
    h22inv_h21 = sla.cho_solve(f22, h12.T)
    h22inv_c2 = sla.cho_solve(f22, c2)
    h11_dot2 = h11 - h12 @ h22inv_h21
    h11_dot2 = 0.5 * (h11_dot2 + h11_dot2.T)
    f112 = _checked_cho(h11_dot2, "H11.2")
    beta = sla.cho_solve(f112, c1 - h12 @ h22inv_c2)
    gamma = h22inv_c2 - h22inv_h21 @ beta

    rw = yw - Xw @ beta - Ww @ gamma
    ee_x = float(np.abs(Xw.T @ rw).max())
    ee_w = float(np.abs(Ww.T @ rw).max())
    residuals = y_all - X_all @ beta - W_all @ gamma
    return GeeFit(
        beta=beta,
        gamma=gamma,
        h11=h11,
        h12=h12,
        h22=h22,
        h11_dot2=h11_dot2,
        basis=basis,
        residuals=residuals,
        weight_kind=weights.kind,
        ee_x=ee_x,
        ee_w=ee_w,
        _f112=f112,
    )


def gamma_only_fit(dataset, basis, beta, weights, *, designs=None, diag=None):
    """Solve H22 gamma = sum W' V^{-1} (Y - X beta) with beta held fixed."""
    X_all, W_all, y_all = designs if designs is not None else stacked_designs(
        dataset, basis
    )
    sigmas = weights.materialize(dataset, diag=diag)
    resp = y_all - X_all @ beta
    _, Ww, rw = _whiten(dataset, X_all[:, :0], W_all, resp, sigmas)
    f22 = _checked_cho(Ww.T @ Ww, "H22")
    return sla.cho_solve(f22, Ww.T @ rw)


def beta_se(fit, dataset=None, basis=None, sigmas=None, mode="model", *, designs=None):
    """Standard errors of the constant coefficients.

    mode="model": sqrt of the first p diagonal entries of
    (sum U_i' S_i^{-1} U_i)^{-1} with U_i = (X_i, W_i). With sigmas=None the
    fit's own weighted blocks are reused (valid when the fit was computed
    under those same weights). mode="sandwich": requires an identity-weight
    fit; (sum U'U)^{-1} sum U' S U (sum U'U)^{-1}, sigmas mandatory.
    """
    if mode == "model":
        if sigmas is None:
            M = sla.cho_solve(fit._f112, np.eye(fit.p))
            return np.sqrt(np.diag(M))
        refit_blocks = _weighted_blocks(dataset, basis, sigmas, designs)
        h11, h12, h22 = refit_blocks
        f22 = _checked_cho(h22, "H22")
        hd = h11 - h12 @ sla.cho_solve(f22, h12.T)
        hd = 0.5 * (hd + hd.T)
        lam = float(np.linalg.eigvalsh(hd).min())
        if lam <= 0:
            raise NumericalError(f"model information not PD (lambda_min {lam:.3e})")
        return np.sqrt(np.diag(sla.cho_solve(_checked_cho(hd, "H11.2"), np.eye(fit.p))))
    if mode == "sandwich":
        if fit.weight_kind != "identity":
            raise NumericalError("sandwich SEs require an identity-weight fit")
        if sigmas is None:
            raise NumericalError("sandwich SEs need covariance matrices")
        p, d = fit.p, fit.h11.shape[0] + fit.h22.shape[0]
        A = np.block([[fit.h11, fit.h12], [fit.h12.T, fit.h22]])
        X_all, W_all, _ = designs if designs is not None else stacked_designs(
            dataset, basis
        )
        meat = np.zeros((d, d))
        for i in range(dataset.n):
            sl = dataset.slice_of(i)
            U = np.column_stack([X_all[sl], W_all[sl]])
            meat += U.T @ sigmas[i] @ U
        try:
            cA = sla.cho_factor(A, lower=True)
        except sla.LinAlgError:
            lam = float(np.linalg.eigvalsh(A).min())
            raise NumericalError(f"bread matrix not PD (lambda_min {lam:.3e})")
        M = sla.cho_solve(cA, sla.cho_solve(cA, meat).T)
        var = np.diag(M)[:p]
        if np.any(var <= 0):
            raise NumericalError("sandwich variance not positive")
        return np.sqrt(var)
    raise ValueError(f"unknown mode {mode!r}")


def _weighted_blocks(dataset, basis, sigmas, designs=None):
    X_all, W_all, y_all = designs if designs is not None else stacked_designs(
        dataset, basis
    )
    Xw, Ww, _ = _whiten(dataset, X_all, W_all, y_all, sigmas)
    return Xw.T @ Xw, Xw.T @ Ww, Ww.T @ Ww


def gamma_to_curves(basis, gamma, eval_points):
    """Curves g_l(t) = gamma_l . B(t) from the stacked spline coefficients.

    gamma is the q*kn vector blocked by varying coefficient, as returned by
    gee_spline_fit / gamma_only_fit.
    """
    gamma = np.asarray(gamma, dtype=float)
    q = len(gamma) // basis.dim
    G = gamma.reshape(q, basis.dim)

    def fn(ts):
        return design_matrix(basis, ts) @ G.T

    eval_points = np.asarray(eval_points, dtype=float)
    return CurveEstimate(grid=eval_points, values=fn(eval_points), _fn=fn)
