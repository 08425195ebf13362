"""Estimator facade with the scikit-learn fit/predict/get_params protocol.

The heavy lifting lives in :mod:`svcm.pipeline`; this class exists so the
model slots into sklearn-style tooling (param grids, clones, pipelines that
pass opaque estimators around). The design matrix argument of ``fit`` is a
:class:`svcm.data.LongitudinalDataset`, which already carries the response,
so ``y`` is accepted only for interface compatibility and must be ``None``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .config import PipelineConfig
from .data import LongitudinalDataset
from .pipeline import efficient_fit


class SemivaryingGEE(BaseEstimator):
    """Semivarying coefficient regression for clustered longitudinal data.

    Fits y = x'beta + z'g(t) + error with constant coefficients beta
    estimated by spline-basis GEE and varying coefficients g recovered by
    kernel smoothing, then refits beta with subject covariance matrices
    estimated from residuals.

    Parameters mirror :class:`svcm.config.PipelineConfig`; ``None`` means
    "use the data-driven default" (bandwidths by leave-one-subject-out
    cross validation, basis dimension from the sample size).
    """

    def __init__(self, *, spline_degree=3, kn=None, ck=2.0, h1=None, h2=None,
                 h3=None, h3_mult=2.0, h1_grid=None, h2_grid=None,
                 cv_grid_size=10, lambda_l=0.0, cov_grid_size=101,
                 ridge_eps=1e-10, pd_floor=1e-8, max_iter=1, iter_tol=1e-6,
                 eval_grid_size=201, ci_level=0.95):
        self.spline_degree = spline_degree
        self.kn = kn
        self.ck = ck
        self.h1 = h1
        self.h2 = h2
        self.h3 = h3
        self.h3_mult = h3_mult
        self.h1_grid = h1_grid
        self.h2_grid = h2_grid
        self.cv_grid_size = cv_grid_size
        self.lambda_l = lambda_l
        self.cov_grid_size = cov_grid_size
        self.ridge_eps = ridge_eps
        self.pd_floor = pd_floor
        self.max_iter = max_iter
        self.iter_tol = iter_tol
        self.eval_grid_size = eval_grid_size
        self.ci_level = ci_level

    def _config(self):
        tup = lambda v: None if v is None else tuple(float(x) for x in v)
        return PipelineConfig(
            spline_degree=self.spline_degree,
            kn=self.kn,
            ck=self.ck,
            h1=self.h1,
            h2=self.h2,
            h3=self.h3,
            h3_mult=self.h3_mult,
            h1_grid=tup(self.h1_grid),
            h2_grid=tup(self.h2_grid),
            cv_grid_size=self.cv_grid_size,
            lambda_l=self.lambda_l,
            cov_grid_size=self.cov_grid_size,
            ridge_eps=self.ridge_eps,
            pd_floor=self.pd_floor,
            max_iter=self.max_iter,
            iter_tol=self.iter_tol,
            eval_grid_size=self.eval_grid_size,
            ci_level=self.ci_level,
        )

    def fit(self, X, y=None):
        if not isinstance(X, LongitudinalDataset):
            raise TypeError(
                "X must be a LongitudinalDataset (see svcm.data.load_csv)"
            )
        if y is not None:
            raise ValueError("y must be None; the dataset carries the response")
        result = efficient_fit(X, self._config())
        self.result_ = result
        self.beta_ = result.beta_eff
        self.se_ = result.se_eff
        self.beta_init_ = result.beta_init
        self.se_init_ = result.se_init
        self.curves_ = {
            "ll_init": result.g_ll_init,
            "ll_refined": result.g_ll_updated,
            "spline_init": result.g_spline_init,
            "spline_refined": result.g_spline_updated,
        }
        self.covariance_model_ = result.covariance_model
        self.bandwidths_ = {"h1": result.h1, "h2": result.h2, "h3": result.h3}
        self.n_iter_ = result.iterations
        return self

    def predict(self, X):
        """Fitted mean for every observation, stacked in dataset order."""
        if not hasattr(self, "result_"):
            raise RuntimeError("fit must be called before predict")
        if not isinstance(X, LongitudinalDataset):
            raise TypeError("X must be a LongitudinalDataset")
        g = self.curves_["spline_refined"](X.times_all)
        return X.x_all @ self.beta_ + np.einsum("ij,ij->i", X.z_all, g)
