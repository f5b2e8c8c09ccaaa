"""Weighted logistic regression by IRLS, with offsets and fractional responses.

Every working model in the package runs through :func:`fit_logistic`, including
the intercept-free fluctuation regression of the targeting step.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import expit, logit, xlogy

__all__ = ["GlmFit", "fit_logistic", "predict_response", "binomial_deviance", "PRED_EPS"]

PRED_EPS = 1e-6
SCORE_TOL = 1e-8
DEV_TOL = 1e-10
MAX_ITER = 100
_RANK_TOL = 1e-7
_MAX_HALVINGS = 30


@dataclass(frozen=True)
class GlmFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    deviance: float
    intercept: bool = True
    aliased: tuple = ()

    @property
    def rank_deficient(self) -> bool:
        return bool(self.aliased)

    @property
    def n_params(self) -> int:
        return len(self.coefficients) - len(self.aliased)

    @property
    def aic(self) -> float:
        return self.deviance + 2.0 * self.n_params


def binomial_deviance(y, mu, weights=None) -> float:
    """Binomial deviance; valid for fractional responses in [0, 1]."""
    y = np.asarray(y, dtype=float)
    w = 1.0 if weights is None else weights
    d = xlogy(y, y) - xlogy(y, mu) + xlogy(1.0 - y, 1.0 - y) - xlogy(1.0 - y, 1.0 - mu)
    return float(2.0 * np.sum(w * d))


def _design(X, n, intercept):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != n:
        raise ValueError(f"design has {X.shape[0]} rows, expected {n}")
    if intercept:
        X = np.column_stack([np.ones(n), X]) if X.shape[1] else np.ones((n, 1))
    return X


def _independent_columns(X, w):
    """Column indices kept after dropping aliased columns.

    Columns are scanned left to right and a column is dropped when its part
    orthogonal to the kept ones is negligible, so later duplicates go first.
    """
    p = X.shape[1]
    Xw = X[w > 0] * np.sqrt(w[w > 0])[:, None]
    if p == 0 or Xw.shape[0] == 0:
        return np.arange(0)
    basis = np.zeros((Xw.shape[0], 0))
    keep = []
    for j in range(p):
        col = Xw[:, j]
        norm = np.linalg.norm(col)
        if norm == 0.0:
            continue
        r = col - basis @ (basis.T @ col)
        r = r - basis @ (basis.T @ r)  # second pass for stability
        rn = np.linalg.norm(r)
        if rn > _RANK_TOL * norm:
            keep.append(j)
            basis = np.column_stack([basis, r / rn])
    return np.array(keep, dtype=np.int64)


def fit_logistic(X, y, offset=None, weights=None, intercept: bool = True,
                 max_iter: int = MAX_ITER, start=None) -> GlmFit:
    """Maximize the (quasi-)binomial log-likelihood with linear predictor offset + X beta.

    Newton/IRLS steps with step-halving whenever the deviance rises.
    Convergence needs a small score (max abs < 1e-8) or a relative deviance
    change under 1e-10, together with a negligible Newton step; diverging
    coefficients (separation) therefore end with ``converged=False``.
    Aliased columns are dropped and get coefficient 0.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    X = _design(X, n, intercept)
    p = X.shape[1]
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if len(off) != n or len(w) != n:
        raise ValueError("offset/weights length mismatch")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if np.any((y < 0) | (y > 1)):
        raise ValueError("responses must lie in [0, 1]")

    keep = _independent_columns(X, w)
    aliased = tuple(int(j) for j in np.setdiff1d(np.arange(p), keep))
    Xk = X[:, keep]
    beta = np.zeros(len(keep)) if start is None else np.asarray(start, dtype=float)[keep].copy()

    def state(b):
        eta = off + Xk @ b
        mu = expit(eta)
        return mu, binomial_deviance(y, mu, w)

    mu, dev = state(beta)
    converged = False
    it = 0
    rel = np.inf
    for it in range(1, max_iter + 1):
        score = Xk.T @ (w * (y - mu))
        if not np.all(np.isfinite(score)):
            break
        h = w * mu * (1.0 - mu)
        H = (Xk * h[:, None]).T @ Xk
        try:
            with warnings.catch_warnings():
                # a numerically singular Hessian means diverging coefficients
                warnings.simplefilter("error", linalg.LinAlgWarning)
                step = linalg.solve(H, score, assume_a="pos") if len(keep) else np.zeros(0)
        except (linalg.LinAlgError, linalg.LinAlgWarning, ValueError):
            break
        if not np.all(np.isfinite(step)):
            break
        small_step = np.max(np.abs(step), initial=0.0) <= 1e-6 * (1.0 + np.max(np.abs(beta), initial=0.0))
        if small_step and (np.max(np.abs(score), initial=0.0) < SCORE_TOL or rel < DEV_TOL):
            converged = True
            break
        t = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = beta + t * step
            mu_c, dev_c = state(cand)
            if np.isfinite(dev_c) and dev_c <= dev + 1e-12 * abs(dev):
                break
            t *= 0.5
        else:
            break
        rel = abs(dev - dev_c) / (abs(dev_c) + 0.1)
        beta, mu, dev = cand, mu_c, dev_c

    coef = np.zeros(p)
    coef[keep] = beta
    return GlmFit(coefficients=coef, converged=converged, iterations=it, deviance=dev,
                  intercept=intercept, aliased=aliased)


def linear_predictor(fit: GlmFit, X, offset=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    X = _design(X, n, fit.intercept)
    if X.shape[1] != len(fit.coefficients):
        raise ValueError(f"design has {X.shape[1]} columns, fit has {len(fit.coefficients)}")
    eta = X @ fit.coefficients
    if offset is not None:
        eta = eta + np.asarray(offset, dtype=float)
    return eta


def predict_response(fit: GlmFit, X, offset=None) -> np.ndarray:
    """Inverse-logit predictions clipped to [1e-6, 1 - 1e-6]."""
    return np.clip(expit(linear_predictor(fit, X, offset)), PRED_EPS, 1.0 - PRED_EPS)


def safe_logit(p) -> np.ndarray:
    return logit(np.clip(p, PRED_EPS, 1.0 - PRED_EPS))
