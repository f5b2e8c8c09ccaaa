"""TMLE for arm-specific means in a randomized trial.

Initial outcome predictions are updated by a logistic fluctuation along the
two-dimensional clever covariate (h0, h1), so one update targets both arm
means and serves the absolute (ATE) and relative (RR) contrasts alike.
Inference is Wald-type from the influence curve, with cluster-level
aggregation when the independent unit is a cluster.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import stats
from scipy.special import expit

from .data_model import DataError, OutcomeScale, scale_outcome, unscale_effect
from .glm_core import fit_logistic, safe_logit
from .learners import FittedLearner, LearnerSpec, fit_outcome_learner, fit_pscore_learner

__all__ = [
    "CleverCovariates",
    "Fluctuation",
    "TargetedEstimate",
    "clever_covariates",
    "initial_predictions",
    "target",
    "apply_fluctuation",
    "point_estimates",
    "arm_influence_curves",
    "influence_curve",
    "cluster_aggregate",
    "wald_inference",
    "tmle_from_learners",
    "run_tmle",
    "scale_for",
]


@dataclass(frozen=True)
class CleverCovariates:
    h1: np.ndarray
    h0: np.ndarray
    pscore: np.ndarray


def clever_covariates(arm, pscore) -> CleverCovariates:
    arm = np.asarray(arm, dtype=float)
    g = np.asarray(pscore, dtype=float)
    return CleverCovariates(h1=arm / g, h0=(1.0 - arm) / (1.0 - g), pscore=g)


@dataclass(frozen=True)
class Fluctuation:
    eps0: float = 0.0
    eps1: float = 0.0
    converged: bool = True


@dataclass(frozen=True, eq=False)
class TargetedEstimate:
    estimand: str
    psi1: float
    psi0: float
    effect_abs: float
    effect_rel: float
    estimate: float
    se: float
    ci: tuple
    ic: np.ndarray
    ic_cluster: Optional[np.ndarray]
    n_independent_units: int
    alpha: float = 0.05
    fluctuation: Fluctuation = field(default_factory=Fluctuation)
    or_spec: str = ""
    ps_spec: str = ""
    fallbacks: dict = field(default_factory=dict)
    scale: Optional[OutcomeScale] = None
    variance_kind: str = "standard"
    seed: Optional[int] = None

    @property
    def variance(self) -> float:
        """Estimated variance of the estimator (log scale for RR)."""
        return self.se ** 2

    @property
    def null_value(self) -> float:
        return 1.0 if self.estimand == "RR" else 0.0

    @property
    def rejects_null(self) -> bool:
        lo, hi = self.ci
        return not (lo <= self.null_value <= hi)

    def summary(self) -> dict:
        return {
            "estimand": self.estimand,
            "estimate": self.estimate,
            "se": self.se,
            "ci": list(self.ci),
            "psi1": self.psi1,
            "psi0": self.psi0,
            "effect_abs": self.effect_abs,
            "effect_rel": self.effect_rel,
            "variance": self.variance,
            "variance_kind": self.variance_kind,
            "n_independent_units": self.n_independent_units,
            "or_spec": self.or_spec,
            "ps_spec": self.ps_spec,
            "eps0": self.fluctuation.eps0,
            "eps1": self.fluctuation.eps1,
            "fluctuation_converged": self.fluctuation.converged,
            "fallbacks": dict(self.fallbacks),
        }


# ---------------------------------------------------------------------------
# the five steps
# ---------------------------------------------------------------------------

def initial_predictions(or_learner: FittedLearner, data):
    """Predictions under the observed arm, everyone treated, and everyone in control."""
    pred1, pred0 = or_learner.counterfactual(data.W)
    predA = np.where(data.arm == 1, pred1, pred0)
    return predA, pred1, pred0


def target(predA, pred1, pred0, pscore, data):
    """Fluctuate the initial predictions; returns ``(Fluctuation, targ1, targ0)``.

    If the fluctuation regression fails to converge the update is skipped
    (eps = 0, ``converged=False``), which leaves the G-computation estimate.
    """
    cc = clever_covariates(data.arm, pscore)
    X = np.column_stack([cc.h0, cc.h1])
    fit = fit_logistic(X, data.y, offset=safe_logit(predA), intercept=False)
    if fit.converged:
        flu = Fluctuation(float(fit.coefficients[0]), float(fit.coefficients[1]), True)
    else:
        flu = Fluctuation(0.0, 0.0, False)
    targ1, targ0 = apply_fluctuation(pred1, pred0, pscore, flu)
    return flu, targ1, targ0


def apply_fluctuation(pred1, pred0, pscore, flu: Fluctuation):
    g = np.asarray(pscore, dtype=float)
    if flu.eps1 == 0.0 and flu.eps0 == 0.0:
        return np.asarray(pred1, dtype=float), np.asarray(pred0, dtype=float)
    targ1 = expit(safe_logit(pred1) + flu.eps1 / g)
    targ0 = expit(safe_logit(pred0) + flu.eps0 / (1.0 - g))
    return targ1, targ0


def point_estimates(targ1, targ0, estimand: str = "ATE"):
    """Arm means of the targeted predictions and their contrast."""
    psi1 = float(np.mean(targ1))
    psi0 = float(np.mean(targ0))
    if estimand == "RR":
        if psi0 < 1e-12:
            raise DataError("relative effect undefined")
        return psi1, psi0, psi1 / psi0
    return psi1, psi0, psi1 - psi0


def arm_influence_curves(arm, y, targ1, targ0, pscore, psi1, psi0):
    cc = clever_covariates(arm, pscore)
    y = np.asarray(y, dtype=float)
    ic1 = cc.h1 * (y - targ1) + targ1 - psi1
    ic0 = cc.h0 * (y - targ0) + targ0 - psi0
    return ic1, ic0


def influence_curve(data, targ1, targ0, pscore, psi1, psi0, estimand: str = "ATE"):
    """Per-unit influence curve of the ATE, or of log(RR) by the delta method."""
    ic1, ic0 = arm_influence_curves(data.arm, data.y, targ1, targ0, pscore, psi1, psi0)
    if estimand == "RR":
        if psi1 <= 0 or psi0 <= 0:
            raise DataError("relative effect undefined: arm mean must be positive")
        return ic1 / psi1 - ic0 / psi0
    return ic1 - ic0


def cluster_aggregate(ic, data, codes=None, n_clusters=None, n_total=None):
    """Cluster-level influence curve: (J / n) times the within-cluster sum."""
    if codes is None:
        if not data.has_clusters:
            raise DataError("cluster aggregation needs cluster ids")
        codes = data.unit_codes
        n_clusters = data.n_independent
        n_total = data.n
    J = n_clusters
    return (J / n_total) * np.bincount(codes, weights=np.asarray(ic, dtype=float), minlength=J)


def wald_inference(psi: float, ic, n_units: int, alpha: float = 0.05, relative: bool = False):
    """Returns ``(estimate, se, (lo, hi))``; relative estimates are exponentiated."""
    ic = np.asarray(ic, dtype=float)
    if n_units < 2:
        raise DataError("need at least 2 independent units for inference")
    se = float(np.sqrt(np.var(ic, ddof=1) / n_units))
    z = float(stats.norm.ppf(1.0 - alpha / 2.0))
    lo, hi = psi - z * se, psi + z * se
    if relative:
        return float(np.exp(psi)), se, (float(np.exp(lo)), float(np.exp(hi)))
    return float(psi), se, (float(lo), float(hi))


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

def tmle_from_learners(or_learner: FittedLearner, ps_learner: FittedLearner, data,
                       estimand: str = "ATE", alpha: float = 0.05) -> TargetedEstimate:
    """TMLE on unit-scale data with already fitted nuisance learners."""
    predA, pred1, pred0 = initial_predictions(or_learner, data)
    g = ps_learner.predict_pscore(data.W)
    flu, targ1, targ0 = target(predA, pred1, pred0, g, data)
    psi1, psi0, _ = point_estimates(targ1, targ0, estimand)
    ic = influence_curve(data, targ1, targ0, g, psi1, psi0, estimand)
    ic_cluster = None
    units_ic, n_units = ic, data.n
    if data.has_clusters:
        ic_cluster = cluster_aggregate(ic, data)
        units_ic, n_units = ic_cluster, data.n_independent
    relative = estimand == "RR"
    psi = np.log(psi1 / psi0) if relative else psi1 - psi0
    est, se, ci = wald_inference(psi, units_ic, n_units, alpha, relative)
    fallbacks = {}
    if or_learner.fallback:
        fallbacks["outcome_regression"] = or_learner.fallback_reason
    if ps_learner.fallback:
        fallbacks["propensity_score"] = ps_learner.fallback_reason
    if not flu.converged:
        fallbacks["fluctuation"] = "no convergence; update skipped"
    return TargetedEstimate(
        estimand=estimand, psi1=psi1, psi0=psi0, effect_abs=psi1 - psi0,
        effect_rel=psi1 / psi0 if psi0 > 0 else float("nan"), estimate=est, se=se, ci=ci,
        ic=ic, ic_cluster=ic_cluster, n_independent_units=n_units, alpha=alpha, fluctuation=flu,
        or_spec=or_learner.spec.label, ps_spec=ps_learner.spec.label, fallbacks=fallbacks,
    )


def scale_for(config, data):
    """Scale outcomes per the plan. RR on a continuous outcome anchors the lower bound at 0."""
    bounds = config.outcome_bounds
    if config.estimand == "RR":
        if np.any(data.y < 0):
            raise DataError("RR estimand requires a nonnegative outcome")
        is_binary = bool(np.all((data.y == 0) | (data.y == 1)))
        if bounds is None and not is_binary:
            bounds = (0.0, float(np.max(data.y)))
    return scale_outcome(data, bounds)


def run_tmle(or_spec: LearnerSpec, ps_spec: LearnerSpec, config, data, seed: Optional[int] = None) -> TargetedEstimate:
    """Full TMLE with fixed learners on natural-scale data; result on the natural scale."""
    seed = config.seed if seed is None else seed
    scaled, scale = scale_for(config, data)
    or_l = fit_outcome_learner(or_spec, scaled, seed, config.learner_options)
    ps_l = fit_pscore_learner(ps_spec, scaled, seed, config.learner_options)
    est = tmle_from_learners(or_l, ps_l, scaled, config.estimand, config.alpha)
    est = unscale_effect(est, scale, config.estimand)
    return replace(est, seed=seed)
