"""Candidate estimators for the outcome regression and the propensity score.

Outcome learners always carry the arm indicator as a predictor; it is never
penalized or screened out. Any learner whose fit fails falls back to the
unadjusted estimator and says so in ``FittedLearner.fallback``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats
from scipy.special import expit

from . import _kernels
from .glm_core import PRED_EPS, binomial_deviance, fit_logistic, linear_predictor

__all__ = [
    "OUTCOME",
    "PSCORE",
    "LearnerSpec",
    "LearnerOptions",
    "FittedLearner",
    "parse_learner",
    "fit_outcome_learner",
    "fit_pscore_learner",
    "fit_learner",
    "stepwise_fit",
    "lasso_fit",
    "mars_fit",
    "PS_BOUNDS",
]

OUTCOME = "outcome_regression"
PSCORE = "propensity_score"
PS_BOUNDS = (0.01, 0.99)

KINDS = ("unadjusted", "glm", "main_terms", "stepwise", "stepwise_int", "lasso", "mars", "mars_screen")
_SIMPLE = {"unadjusted", "stepwise", "stepwise_int", "lasso", "mars", "mars_screen"}


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    covariate: Optional[str] = None
    role: str = OUTCOME

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.role not in (OUTCOME, PSCORE):
            raise ValueError(f"unknown learner role {self.role!r}")
        if (self.kind == "glm") != (self.covariate is not None):
            raise ValueError("glm(...) takes exactly one covariate; other learners take none")

    @property
    def label(self) -> str:
        if self.kind == "glm":
            return f"glm({self.covariate})"
        if self.kind == "main_terms":
            return "glm(main_terms)"
        return self.kind

    @property
    def is_unadjusted(self) -> bool:
        return self.kind == "unadjusted"

    def with_role(self, role: str) -> "LearnerSpec":
        return LearnerSpec(self.kind, self.covariate, role)

    def __str__(self):
        return self.label


_GLM_RE = re.compile(r"^glm\(\s*([^()]+?)\s*\)$")


def parse_learner(text: str, role: str = OUTCOME) -> LearnerSpec:
    """Parse the learner grammar used in analysis plans.

    ``unadjusted | glm(<covariate>) | glm(main_terms) | stepwise | stepwise_int
    | lasso | mars | mars_screen``
    """
    t = str(text).strip()
    if t in _SIMPLE:
        return LearnerSpec(t, role=role)
    m = _GLM_RE.match(t)
    if m:
        arg = m.group(1)
        if arg == "main_terms":
            return LearnerSpec("main_terms", role=role)
        return LearnerSpec("glm", arg, role=role)
    raise ValueError(f"cannot parse learner {text!r}")


@dataclass(frozen=True)
class LearnerOptions:
    """Tuning constants for the flexible learners (recorded in every report)."""

    screen_p: float = 0.10
    mars_max_terms: int = 21
    mars_penalty: float = 2.0
    mars_thresh: float = 1e-3
    lasso_n_lambda: int = 50
    lasso_min_ratio: float = 1e-3
    lasso_folds: int = 5

    def to_dict(self) -> dict:
        return dict(self.__dict__)


DEFAULT_OPTIONS = LearnerOptions()


@dataclass(eq=False)
class FittedLearner:
    spec: LearnerSpec
    raw_predict: Callable  # (arm or None, W) -> unclipped predictions
    fallback: bool = False
    fallback_reason: str = ""
    info: dict = field(default_factory=dict)
    clip: bool = True  # False only for the closed-form arm means (logits clip separately)

    def predict_outcome(self, arm, W) -> np.ndarray:
        W = np.asarray(W, dtype=float)
        arm = np.broadcast_to(np.asarray(arm, dtype=float), (W.shape[0],))
        pred = self.raw_predict(arm, W)
        return np.clip(pred, PRED_EPS, 1.0 - PRED_EPS) if self.clip else pred

    def predict_pscore(self, W) -> np.ndarray:
        W = np.asarray(W, dtype=float)
        return np.clip(self.raw_predict(None, W), *PS_BOUNDS)

    def counterfactual(self, W):
        """Outcome predictions with everyone treated and everyone in control."""
        return self.predict_outcome(1.0, W), self.predict_outcome(0.0, W)


class LearnerFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# design construction. A term is a tuple of factors: "A" or a W column index;
# the term's column is the product of its factors.
# ---------------------------------------------------------------------------

def _build(terms, arm, W) -> np.ndarray:
    n = W.shape[0]
    cols = []
    for term in terms:
        col = np.ones(n)
        for f in term:
            col = col * (arm if f == "A" else W[:, f])
        cols.append(col)
    return np.column_stack(cols) if cols else np.zeros((n, 0))


def _glm_learner(spec, terms, arm, W, y, info=None) -> FittedLearner:
    fit = fit_logistic(_build(terms, arm, W), y)
    if not fit.converged:
        raise LearnerFailure("logistic fit did not converge")
    terms = list(terms)

    def predict(a, Wn):
        return expit(linear_predictor(fit, _build(terms, a, Wn)))

    info = dict(info or {})
    info["coefficients"] = [float(c) for c in fit.coefficients]
    if fit.aliased:
        info["aliased"] = list(fit.aliased)
    return FittedLearner(spec, predict, info=info)


def _base_terms(role):
    return [("A",)] if role == OUTCOME else []


def _response(data, role):
    return data.y if role == OUTCOME else data.arm.astype(float)


def _unadjusted(spec: LearnerSpec, data) -> FittedLearner:
    if spec.role == OUTCOME:
        # the intercept + arm logistic MLE is the pair of arm means, in closed form
        m1 = float(np.mean(data.y[data.arm == 1]))
        m0 = float(np.mean(data.y[data.arm == 0]))

        def predict(a, W):
            return np.where(a == 1, m1, m0).astype(float)

        # left unclipped so an all-0 or all-1 arm still reproduces its exact mean
        return FittedLearner(spec, predict, info={"arm_means": [m0, m1]}, clip=False)
    p = float(np.mean(data.arm))

    def predict_ps(a, W):
        return np.full(W.shape[0], p)

    return FittedLearner(spec, predict_ps, info={"proportion": p})


def _group_terms(data, name):
    return [(j,) for j in data.columns_for(name)]


def fit_learner(spec: LearnerSpec, data, seed: int = 0, options: LearnerOptions = DEFAULT_OPTIONS) -> FittedLearner:
    """Fit ``spec`` on ``data``; failures fall back to the unadjusted estimator."""
    if spec.is_unadjusted:
        return _unadjusted(spec, data)
    if spec.role == OUTCOME:
        for a in (0, 1):
            if not np.any(data.arm == a):
                raise ValueError("outcome learner needs both arms present")
    try:
        learner = _fit_adjusted(spec, data, seed, options)
    except LearnerFailure as exc:
        fb = _unadjusted(spec, data)
        fb.fallback = True
        fb.fallback_reason = str(exc)
        return fb
    if not np.all(np.isfinite(learner.raw_predict(
            data.arm.astype(float) if spec.role == OUTCOME else None, data.W))):
        fb = _unadjusted(spec, data)
        fb.fallback, fb.fallback_reason = True, "non-finite predictions"
        return fb
    return learner


def _fit_adjusted(spec, data, seed, options) -> FittedLearner:
    role = spec.role
    y = _response(data, role)
    arm = data.arm.astype(float)
    base = _base_terms(role)
    if spec.kind == "glm":
        return _glm_learner(spec, base + _group_terms(data, spec.covariate), arm, data.W, y)
    if spec.kind == "main_terms":
        terms = base + [(j,) for j in range(data.W.shape[1])]
        return _glm_learner(spec, terms, arm, data.W, y)
    if spec.kind in ("stepwise", "stepwise_int"):
        return stepwise_fit(data, spec.kind == "stepwise_int", seed, role=role)
    if spec.kind == "lasso":
        return lasso_fit(data, seed, role=role, options=options)
    if spec.kind in ("mars", "mars_screen"):
        return mars_fit(data, spec.kind == "mars_screen", seed, role=role, options=options)
    raise ValueError(spec.kind)  # pragma: no cover


def fit_outcome_learner(spec: LearnerSpec, data, seed: int = 0, options: LearnerOptions = DEFAULT_OPTIONS):
    if spec.role != OUTCOME:
        spec = spec.with_role(OUTCOME)
    return fit_learner(spec, data, seed, options)


def fit_pscore_learner(spec: LearnerSpec, data, seed: int = 0, options: LearnerOptions = DEFAULT_OPTIONS):
    if spec.role != PSCORE:
        spec = spec.with_role(PSCORE)
    return fit_learner(spec, data, seed, options)


# ---------------------------------------------------------------------------
# forward stepwise AIC
# ---------------------------------------------------------------------------

def _stepwise_candidates(data, interactions: bool, role: str):
    """Candidate blocks in tie-break order: mains, then arm and pairwise interactions."""
    groups = [g for g in data.groups if data.groups[g]]
    cands = [(g, (g,), [(j,) for j in data.groups[g]]) for g in groups]
    if interactions:
        if role == OUTCOME:
            cands += [(f"A:{g}", (g,), [("A", j) for j in data.groups[g]]) for g in groups]
        for i, g in enumerate(groups):
            for h in groups[i + 1:]:
                terms = [(j, k) for j in data.groups[g] for k in data.groups[h]]
                cands.append((f"{g}:{h}", (g, h), terms))
    return cands


def stepwise_select(data, interactions: bool, role: str = OUTCOME):
    """Forward selection on AIC from the mandatory base model.

    Returns ``(terms, path)`` where ``path`` lists the block names added in order.
    """
    y = _response(data, role)
    arm = data.arm.astype(float)
    terms = _base_terms(role)
    fit = fit_logistic(_build(terms, arm, data.W), y)
    if not fit.converged:
        raise LearnerFailure("base model did not converge")
    aic = fit.aic
    remaining = _stepwise_candidates(data, interactions, role)
    entered, path = set(), []
    while remaining:
        best = None
        for idx, (name, needs, block) in enumerate(remaining):
            if len(needs) > 1 or name.startswith("A:"):
                if not all(g in entered for g in needs):
                    continue
            f = fit_logistic(_build(terms + block, arm, data.W), y)
            if not f.converged:
                continue
            if best is None or f.aic < best[0]:
                best = (f.aic, idx)
        if best is None or not best[0] < aic:
            break
        aic, idx = best
        name, needs, block = remaining.pop(idx)
        terms = terms + block
        path.append(name)
        if len(needs) == 1 and not name.startswith("A:"):
            entered.add(name)
    return terms, path


def stepwise_fit(data, interactions: bool = False, seed: int = 0, role: str = OUTCOME) -> FittedLearner:
    kind = "stepwise_int" if interactions else "stepwise"
    spec = LearnerSpec(kind, role=role)
    terms, path = stepwise_select(data, interactions, role)
    return _glm_learner(spec, terms, data.arm.astype(float), data.W, _response(data, role),
                        info={"path": path})


# ---------------------------------------------------------------------------
# L1-penalized logistic regression
# ---------------------------------------------------------------------------

def _penalized_logistic(Z, y, penalized, lam, beta, max_outer=100, tol=1e-8):
    """Proximal Newton: IRLS quadratic approximations solved by coordinate descent."""
    converged = False
    for _ in range(max_outer):
        eta = Z @ beta
        mu = expit(eta)
        w = np.maximum(mu * (1.0 - mu), 1e-5)
        z = eta + (y - mu) / w
        new, _ = _kernels.cd_wls(Z, z, w, lam, penalized, beta)
        delta = np.max(np.abs(new - beta), initial=0.0)
        beta = new
        if delta < tol * (1.0 + np.max(np.abs(beta), initial=0.0)):
            converged = True
            break
    return beta, converged


def _lasso_path(Z, y, penalized, lambdas, beta0):
    betas = []
    beta = beta0.copy()
    ok = True
    for lam in lambdas:
        beta, conv = _penalized_logistic(Z, y, penalized, lam, beta)
        ok = ok and conv
        betas.append(beta.copy())
    return np.array(betas), ok


def lambda_max(Z, y, penalized, beta_null) -> float:
    """Smallest penalty at which every penalized coefficient is exactly zero."""
    mu = expit(Z @ beta_null)
    grad = Z[:, penalized].T @ (y - mu) / len(y)
    return float(np.max(np.abs(grad), initial=0.0))


def _kfold(n, k, rng):
    perm = rng.permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return folds


def lasso_fit(data, seed: int = 0, role: str = OUTCOME, options: LearnerOptions = DEFAULT_OPTIONS) -> FittedLearner:
    """L1 logistic regression; penalty chosen by inner K-fold deviance (lambda_min rule)."""
    spec = LearnerSpec("lasso", role=role)
    y = _response(data, role)
    W = data.W
    n = len(y)
    sd = W.std(axis=0) if W.shape[1] else np.zeros(0)
    usable = np.flatnonzero(sd > 0)
    if usable.size == 0:
        raise LearnerFailure("no non-constant covariates")
    mean = W[:, usable].mean(axis=0)
    scale = sd[usable]
    unpen = 2 if role == OUTCOME else 1

    def design(a, Wn):
        parts = [np.ones(Wn.shape[0])]
        if role == OUTCOME:
            parts.append(np.broadcast_to(a, (Wn.shape[0],)))
        return np.column_stack(parts + [(Wn[:, usable] - mean) / scale])

    Z = design(data.arm.astype(float), W)
    penalized = np.zeros(Z.shape[1], dtype=bool)
    penalized[unpen:] = True

    null = fit_logistic(Z[:, 1:unpen], y)
    if not null.converged:
        raise LearnerFailure("unpenalized base model did not converge")
    beta0 = np.zeros(Z.shape[1])
    beta0[:unpen] = null.coefficients
    lmax = lambda_max(Z, y, penalized, beta0)
    if lmax <= 0.0:
        lambdas = np.array([0.0])
    else:
        lambdas = lmax * np.logspace(0.0, np.log10(options.lasso_min_ratio), options.lasso_n_lambda)

    rng = np.random.default_rng(seed)
    k = min(options.lasso_folds, n)
    folds = _kfold(n, k, rng)
    cv_dev = np.zeros(len(lambdas))
    for v in range(k):
        tr, te = folds != v, folds == v
        null_v = fit_logistic(Z[tr, 1:unpen], y[tr])
        b0 = np.zeros(Z.shape[1])
        b0[:unpen] = null_v.coefficients
        betas, _ = _lasso_path(Z[tr], y[tr], penalized, lambdas, b0)
        mu = np.clip(expit(Z[te] @ betas.T), PRED_EPS, 1.0 - PRED_EPS)
        for li in range(len(lambdas)):
            cv_dev[li] += binomial_deviance(y[te], mu[:, li])
    best = int(np.argmin(cv_dev))  # ties resolve to the larger penalty
    betas, ok = _lasso_path(Z, y, penalized, lambdas[: best + 1], beta0)
    if not ok:
        raise LearnerFailure("penalized fit did not converge")
    beta = betas[-1]

    def predict(a, Wn):
        return expit(design(a, Wn) @ beta)

    coef_orig = np.zeros(W.shape[1])
    coef_orig[usable] = beta[unpen:] / scale
    intercept = float(beta[0] - np.sum(beta[unpen:] * mean / scale))
    info = {
        "lambda": float(lambdas[best]), "lambda_max": lmax,
        "intercept": intercept,
        "coefficients": {data.covariate_names[j]: float(coef_orig[j]) for j in range(W.shape[1]) if coef_orig[j] != 0.0},
    }
    if role == OUTCOME:
        info["arm"] = float(beta[1])
    return FittedLearner(spec, predict, info=info)


# ---------------------------------------------------------------------------
# MARS (degree 1)
# ---------------------------------------------------------------------------

def _screen(W, y, threshold):
    keep = []
    for j in range(W.shape[1]):
        x = W[:, j]
        if np.ptp(x) == 0.0:
            continue
        if np.ptp(y) == 0.0:
            continue
        p = stats.pearsonr(x, y).pvalue
        if p < threshold:
            keep.append(j)
    return keep


def _gcv(rss, n, n_terms, penalty):
    c = n_terms + penalty * (n_terms - 1) / 2.0
    if c >= n:
        return np.inf
    return rss / (n * (1.0 - c / n) ** 2)


def _hinge(x, t, sign):
    return np.maximum(sign * (x - t), 0.0)


def _mars_basis(hinges, fixed, W):
    cols = [fixed] + [_hinge(W[:, j], t, s)[:, None] for j, t, s in hinges]
    return np.hstack(cols)


def mars_forward(X_fixed, W, cols, y, max_terms, thresh):
    """Forward pass: greedily add reflected hinge pairs at observed knots.

    ``X_fixed`` are the always-present columns (intercept, arm); ``max_terms``
    bounds the intercept plus hinge count. Returns the hinge list.
    """
    B = X_fixed.copy()
    hinges = []
    tss = float(np.sum((y - y.mean()) ** 2))
    Q, _ = np.linalg.qr(B)
    r = y - Q @ (Q.T @ y)
    rss = float(r @ r)
    knots = {j: np.unique(W[:, j]) for j in cols}
    while 1 + len(hinges) < max_terms and tss > 0.0 and rss > (1.0 - 0.999) * tss:
        best = None
        for j in cols:
            gains, use_p, use_m = _kernels.knot_gains(W[:, j], knots[j], Q, r)
            if gains.size == 0:
                continue
            k = int(np.argmax(gains))
            if best is None or gains[k] > best[0]:
                best = (float(gains[k]), j, k, bool(use_p[k]), bool(use_m[k]))
        if best is None or best[0] <= thresh * tss:
            break
        gain, j, k, up, um = best
        t = float(knots[j][k])
        new = []
        if up:
            new.append((j, t, 1.0))
        if um:
            new.append((j, t, -1.0))
        room = max_terms - 1 - len(hinges)
        if len(new) > room:
            # one slot left: keep the side that alone explains more
            new = [max(new, key=lambda h: _single_gain(_hinge(W[:, h[0]], h[1], h[2]), Q, r))]
        hinges.extend(new)
        B = _mars_basis(hinges, X_fixed, W)
        Q, _ = np.linalg.qr(B)
        r = y - Q @ (Q.T @ y)
        rss = float(r @ r)
    return hinges


def _single_gain(h, Q, r):
    a = h - Q @ (Q.T @ h)
    aa = float(a @ a)
    return float(h @ r) ** 2 / aa if aa > 0.0 else 0.0


def _lstsq_rss(B, y):
    coef, *_ = np.linalg.lstsq(B, y, rcond=None)
    res = y - B @ coef
    return float(res @ res), coef


def mars_prune(X_fixed, W, hinges, y, penalty):
    """Backward elimination of hinges, keeping the subset with the lowest GCV."""
    n = len(y)
    n_fixed = X_fixed.shape[1]
    current = list(range(len(hinges)))
    rss, _ = _lstsq_rss(_mars_basis([hinges[i] for i in current], X_fixed, W), y)
    best_gcv = _gcv(rss, n, n_fixed + len(current), penalty)
    best_set = list(current)
    while current:
        trial = None
        for i in current:
            keep = [h for h in current if h != i]
            rss_i, _ = _lstsq_rss(_mars_basis([hinges[h] for h in keep], X_fixed, W), y)
            if trial is None or rss_i < trial[0]:
                trial = (rss_i, keep)
        rss, current = trial
        g = _gcv(rss, n, n_fixed + len(current), penalty)
        if g <= best_gcv:
            best_gcv, best_set = g, list(current)
    return [hinges[i] for i in best_set]


def mars_fit(data, screening: bool = False, seed: int = 0, role: str = OUTCOME,
             options: LearnerOptions = DEFAULT_OPTIONS) -> FittedLearner:
    """Additive hinge-basis regression fitted by least squares on the scaled response."""
    spec = LearnerSpec("mars_screen" if screening else "mars", role=role)
    y = _response(data, role)
    W = data.W
    cols = [j for j in range(W.shape[1]) if np.ptp(W[:, j]) > 0.0]
    if screening:
        cols = [j for j in _screen(W, y, options.screen_p) if j in cols]

    def fixed(a, n):
        parts = [np.ones(n)]
        if role == OUTCOME:
            parts.append(np.broadcast_to(a, (n,)).astype(float))
        return np.column_stack(parts)

    X_fixed = fixed(data.arm.astype(float), len(y))
    hinges = mars_forward(X_fixed, W, cols, y, options.mars_max_terms, options.mars_thresh) if cols else []
    hinges = mars_prune(X_fixed, W, hinges, y, options.mars_penalty) if hinges else []
    _, coef = _lstsq_rss(_mars_basis(hinges, X_fixed, W), y)

    def predict(a, Wn):
        return _mars_basis(hinges, fixed(a, Wn.shape[0]), Wn) @ coef

    info = {
        "hinges": [[data.covariate_names[j], t, "+" if s > 0 else "-"] for j, t, s in hinges],
        "screened_in": [data.covariate_names[j] for j in cols] if screening else None,
        "coefficients": [float(c) for c in coef],
    }
    return FittedLearner(spec, predict, info=info)
