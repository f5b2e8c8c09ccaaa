"""Cross-validated two-stage selection of the outcome regression and propensity score.

Stage 1 scores every outcome-regression candidate (with the unadjusted
propensity score) by the cross-validated mean of squared influence-curve
values; stage 2 keeps the winner and scores the propensity candidates the
same way. The chosen pair defines the final TMLE on the full data.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .config import CvScheme, SapConfig
from .data_model import DataError, unscale_effect
from .glm_core import PRED_EPS
from .learners import OUTCOME, PSCORE, LearnerSpec, fit_outcome_learner, fit_pscore_learner
from .tmle_engine import (
    TargetedEstimate,
    apply_fluctuation,
    arm_influence_curves,
    cluster_aggregate,
    initial_predictions,
    point_estimates,
    scale_for,
    target,
    tmle_from_learners,
    wald_inference,
)

__all__ = [
    "FoldAssignment",
    "CandidateScore",
    "Selection",
    "make_folds",
    "cv_score",
    "cv_score_or_candidate",
    "select_outcome_regression",
    "select_pscore",
    "run_adaptive_prespec",
    "precision_gain",
    "derive_seed",
]

UNADJ_OR = LearnerSpec("unadjusted", role=OUTCOME)
UNADJ_PS = LearnerSpec("unadjusted", role=PSCORE)


def derive_seed(master: int, *keys: int) -> int:
    """Deterministic child seed from a master seed and integer keys."""
    return int(np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold_of_unit: np.ndarray  # fold index per independent unit
    unit_of_row: np.ndarray  # independent-unit index per row
    V_effective: int
    scheme: CvScheme

    def rows_in(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_unit[self.unit_of_row] == v)

    def rows_out(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_unit[self.unit_of_row] != v)


def make_folds(data, scheme: CvScheme, seed: int) -> FoldAssignment:
    """Assign independent units to folds.

    Units are shuffled within arm (seeded) and dealt round-robin, so per-fold
    arm counts differ by at most one. Clusters always move together.
    """
    scheme = scheme.resolve(data)
    if scheme.unit == "cluster":
        unit_of_row = data.unit_codes
        n_units = data.n_independent
        unit_arm = data.unit_arm()
    else:
        unit_of_row = np.arange(data.n)
        n_units = data.n
        unit_arm = data.arm
    V = n_units if scheme.kind == "loo" else scheme.V
    if n_units < max(V, 2):
        raise DataError(f"{n_units} independent units cannot fill {V} folds")
    for a in (0, 1):
        if np.sum(unit_arm == a) < 2:
            raise DataError(f"arm {a} has fewer than 2 independent units")

    rng = np.random.default_rng(seed)
    fold = np.empty(n_units, dtype=np.int64)
    if scheme.kind == "loo":
        fold[:] = np.arange(n_units)
    elif scheme.stratify_by_arm:
        offset = 0
        for a in (1, 0):
            members = np.flatnonzero(unit_arm == a)
            members = members[rng.permutation(len(members))]
            fold[members] = (offset + np.arange(len(members))) % V
            offset = (offset + len(members)) % V
    else:
        fold[rng.permutation(n_units)] = np.arange(n_units) % V

    folds = FoldAssignment(fold, unit_of_row, V, scheme)
    arm = data.arm
    for v in range(V):
        train = folds.rows_out(v)
        if not (np.any(arm[train] == 1) and np.any(arm[train] == 0)):
            raise DataError(f"fold {v} lacks arm support in its training set; reduce the number of folds V")
    return folds


@dataclass(eq=False)
class CandidateScore:
    spec: LearnerSpec
    cv_variance: float
    cv_ic: np.ndarray  # validation IC per independent unit (cluster-aggregated if clustered)
    fallback_count: int = 0
    ps_spec: Optional[LearnerSpec] = None

    def to_dict(self) -> dict:
        return {"spec": self.spec.label, "cv_variance": self.cv_variance, "fallback_count": self.fallback_count}


def _unit_ic(row_ic, data, folds):
    """Aggregate row-level validation ICs to independent units (J/n weighting for clusters)."""
    if data.has_clusters:
        return cluster_aggregate(row_ic, data)
    return row_ic


def cv_score(or_spec: LearnerSpec, ps_spec: LearnerSpec, data, folds: FoldAssignment,
             config: SapConfig, scored: str = "or") -> CandidateScore:
    """Cross-validated IC-squared loss of the (outcome regression, propensity score) pair.

    ``data`` must already be on the unit scale. In each fold the learners and
    the fluctuation are fitted on the training rows; validation rows get
    targeted predictions and ICs centred at the training estimates.
    """
    estimand = config.estimand
    row_ic = np.empty(data.n)
    fallbacks = 0
    for v in range(folds.V_effective):
        tr, va = folds.rows_out(v), folds.rows_in(v)
        train, valid = data.subset(tr), data.subset(va)
        fold_seed = derive_seed(config.seed, v)
        or_l = fit_outcome_learner(or_spec, train, fold_seed, config.learner_options)
        ps_l = fit_pscore_learner(ps_spec, train, fold_seed, config.learner_options)
        fallbacks += int((or_l.fallback and scored == "or") or (ps_l.fallback and scored == "ps"))
        predA, pred1, pred0 = initial_predictions(or_l, train)
        g = ps_l.predict_pscore(train.W)
        flu, targ1, targ0 = target(predA, pred1, pred0, g, train)
        psi1, psi0, _ = point_estimates(targ1, targ0)

        p1v, p0v = or_l.counterfactual(valid.W)
        gv = ps_l.predict_pscore(valid.W)
        t1v, t0v = apply_fluctuation(p1v, p0v, gv, flu)
        ic1, ic0 = arm_influence_curves(valid.arm, valid.y, t1v, t0v, gv, psi1, psi0)
        if estimand == "RR":
            # a training fold without events in one arm: floor the mean so the loss stays finite
            row_ic[va] = ic1 / max(psi1, PRED_EPS) - ic0 / max(psi0, PRED_EPS)
        else:
            row_ic[va] = ic1 - ic0
    unit_ic = _unit_ic(row_ic, data, folds)
    cv_var = float(np.sum(unit_ic ** 2) / len(unit_ic))
    spec = or_spec if scored == "or" else ps_spec
    return CandidateScore(spec, cv_var, unit_ic, fallbacks, ps_spec=ps_spec)


def cv_score_or_candidate(spec: LearnerSpec, data, folds: FoldAssignment, config: SapConfig) -> CandidateScore:
    return cv_score(spec.with_role(OUTCOME), UNADJ_PS, data, folds, config, scored="or")


def _argmin(scores):
    """Index of the smallest CV variance; ties go to unadjusted, then list order."""
    best = min(s.cv_variance for s in scores)
    tied = [i for i, s in enumerate(scores) if s.cv_variance == best]
    for i in tied:
        if scores[i].spec.is_unadjusted:
            return i
    return tied[0]


def select_outcome_regression(candidates, data, folds, config):
    scores = [cv_score_or_candidate(s, data, folds, config) for s in candidates]
    return scores[_argmin(scores)].spec, scores


def select_pscore(or_spec, candidates, data, folds, config, cached=None):
    """Stage 2. ``cached`` may hold the already computed (or_spec, unadjusted PS) score."""
    scores = []
    for s in candidates:
        s = s.with_role(PSCORE)
        if cached is not None and s.is_unadjusted:
            scores.append(CandidateScore(s, cached.cv_variance, cached.cv_ic, 0, ps_spec=s))
        else:
            scores.append(cv_score(or_spec, s, data, folds, config, scored="ps"))
    return scores[_argmin(scores)].spec, scores


@dataclass(eq=False)
class Selection:
    or_spec: LearnerSpec
    ps_spec: LearnerSpec
    or_scores: list
    ps_scores: list
    final: TargetedEstimate
    variance_kind_used: str
    unadjusted: Optional[TargetedEstimate] = None
    precision_gain: float = float("nan")
    folds: Optional[FoldAssignment] = None
    learner_info: dict = field(default_factory=dict)

    def score_of(self, label: str, stage: str = "or") -> float:
        table = self.or_scores if stage == "or" else self.ps_scores
        for s in table:
            if s.spec.label == label:
                return s.cv_variance
        raise KeyError(label)


def _with_cv_variance(est: TargetedEstimate, unit_ic, alpha) -> TargetedEstimate:
    relative = est.estimand == "RR"
    psi = np.log(est.psi1 / est.psi0) if relative else est.psi1 - est.psi0
    value, se, ci = wald_inference(psi, unit_ic, len(unit_ic), alpha, relative)
    return replace(est, estimate=value, se=se, ci=ci, variance_kind="cross_validated")


def run_adaptive_prespec(config: SapConfig, data, folds: Optional[FoldAssignment] = None) -> Selection:
    """Select the candidate pair by cross-validation and run the final TMLE.

    ``data`` is on the natural outcome scale; estimates are returned on it too.
    """
    scaled, scale = scale_for(config, data)
    if folds is None:
        folds = make_folds(scaled, config.cv_scheme, derive_seed(config.seed, 2 ** 32))
    or_spec, or_scores = select_outcome_regression(config.or_candidates, scaled, folds, config)
    chosen = next(s for s in or_scores if s.spec == or_spec)
    ps_spec, ps_scores = select_pscore(or_spec, config.ps_candidates, scaled, folds, config, cached=chosen)

    final_seed = derive_seed(config.seed, 2 ** 32 + 1)
    opts = config.learner_options
    or_l = fit_outcome_learner(or_spec, scaled, final_seed, opts)
    ps_l = fit_pscore_learner(ps_spec, scaled, final_seed, opts)
    final = tmle_from_learners(or_l, ps_l, scaled, config.estimand, config.alpha)
    unadj = tmle_from_learners(fit_outcome_learner(UNADJ_OR, scaled), fit_pscore_learner(UNADJ_PS, scaled),
                               scaled, config.estimand, config.alpha)
    if config.variance_kind == "cross_validated":
        pair = next(s for s in ps_scores if s.spec == ps_spec)
        unadj_or = next(s for s in or_scores if s.spec.is_unadjusted)
        final = _with_cv_variance(final, pair.cv_ic, config.alpha)
        unadj = _with_cv_variance(unadj, unadj_or.cv_ic, config.alpha)
    final = replace(unscale_effect(final, scale, config.estimand), seed=config.seed)
    unadj = replace(unscale_effect(unadj, scale, config.estimand), seed=config.seed)
    gain = precision_gain(unadj, final)
    return Selection(
        or_spec=or_spec, ps_spec=ps_spec, or_scores=or_scores, ps_scores=ps_scores, final=final,
        variance_kind_used=config.variance_kind, unadjusted=unadj, precision_gain=gain, folds=folds,
        learner_info={"outcome_regression": or_l.info, "propensity_score": ps_l.info},
    )


def precision_gain(est_unadjusted, est_selected) -> float:
    """Estimated variance of the unadjusted estimator over that of the selected one."""
    v_u = getattr(est_unadjusted, "variance", est_unadjusted)
    v_s = getattr(est_selected, "variance", est_selected)
    if v_s == 0.0:
        raise ZeroDivisionError("selected estimator has zero estimated variance")
    return float(v_u / v_s)
