"""Acceptance suite: one test per criterion, each printed as PASS/FAIL in the
terminal summary. Criteria 7-9 are Monte-Carlo runs and take a few minutes."""
import json
import math

import numpy as np
import pytest
from scipy import optimize, stats
from scipy.special import expit, logit

from aptmle import _kernels
from aptmle.adaptive_prespec import UNADJ_PS, cv_score, run_adaptive_prespec
from aptmle.cli import cmd_analyze
from aptmle.config import parse_config
from aptmle.data_model import TrialDataset
from aptmle.glm_core import fit_logistic, linear_predictor
from aptmle.learners import (
    OUTCOME,
    PSCORE,
    FittedLearner,
    LearnerSpec,
    fit_outcome_learner,
    fit_pscore_learner,
    mars_fit,
    parse_learner,
    stepwise_select,
)
from aptmle.simulation import (
    CovariateGen,
    DgpSpec,
    generate,
    run_parametric_sim,
    run_permutation_check,
)
from aptmle.tmle_engine import (
    influence_curve,
    initial_predictions,
    point_estimates,
    run_tmle,
    scale_for,
    target,
    tmle_from_learners,
)

UNADJ_ONLY = parse_config({})


def _trial(rng, n, binary, positive=False, p=3):
    W = rng.normal(size=(n, p))
    arm = np.zeros(n, dtype=int)
    arm[rng.permutation(n)[: rng.integers(2, n - 1)]] = 1
    lp = rng.normal() + rng.normal() * arm + W @ rng.normal(size=p)
    if binary:
        y = (rng.random(n) < expit(lp)).astype(float)
        if y[arm == 0].sum() == 0:  # keep the control mean positive for RR
            y[np.flatnonzero(arm == 0)[0]] = 1.0
    else:
        y = lp + rng.normal(size=n)
        if positive:
            y = np.exp(y)
    return TrialDataset.from_arrays(arm, y, W)


# ---------------------------------------------------------------------------

@pytest.mark.criterion(1, "unadjusted reduction: ATE/RR equal arm-mean contrasts to 1e-12 on 50 datasets")
def test_c01_unadjusted_reduction(record_property):
    rng = np.random.default_rng(101)
    worst = 0.0
    for i in range(50):
        d = _trial(rng, int(rng.integers(8, 200)), binary=i % 2 == 0, positive=True)
        m1, m0 = d.y[d.arm == 1].mean(), d.y[d.arm == 0].mean()
        ate = run_adaptive_prespec(UNADJ_ONLY.replace(seed=i), d).final
        rr = run_adaptive_prespec(UNADJ_ONLY.replace(seed=i, estimand="RR"), d).final
        worst = max(worst, abs(ate.estimate - (m1 - m0)), abs(rr.estimate - m1 / m0))
    record_property("detail", f"max abs error {worst:.2e}")
    assert worst <= 1e-12


@pytest.mark.criterion(2, "no-update: intercept+arm logistic OR and empirical PS give |eps| < 1e-6")
def test_c02_no_update(record_property):
    rng = np.random.default_rng(202)
    worst_eps = worst_pt = 0.0
    for i in range(30):
        d = _trial(rng, int(rng.integers(10, 300)), binary=i % 2 == 0)
        d, _ = scale_for(UNADJ_ONLY, d)
        fit = fit_logistic(d.arm.astype(float), d.y)
        assert fit.converged
        or_l = FittedLearner(LearnerSpec("glm", "arm"), lambda a, W: expit(linear_predictor(fit, np.asarray(a)[:, None])))
        ps_l = fit_pscore_learner(UNADJ_PS, d)
        est = tmle_from_learners(or_l, ps_l, d)
        flu = est.fluctuation
        worst_eps = max(worst_eps, abs(flu.eps0), abs(flu.eps1))
        unadj = d.y[d.arm == 1].mean() - d.y[d.arm == 0].mean()
        worst_pt = max(worst_pt, abs(est.estimate - unadj))
    record_property("detail", f"max |eps| {worst_eps:.1e}, max point diff {worst_pt:.1e}")
    assert worst_eps < 1e-6 and worst_pt < 1e-8


@pytest.mark.criterion(3, "EIC solved: |mean IC| < 1e-8 and score equations to 1e-6 over 200 fuzzed datasets")
def test_c03_eic_solved(record_property):
    rng = np.random.default_rng(303)
    ors = ["glm(W1)", "glm(W2)", "glm(main_terms)", "stepwise", "stepwise_int", "lasso", "mars", "mars_screen"]
    pss = ["unadjusted", "glm(W1)", "glm(main_terms)", "lasso"]
    checked = worst_ic = worst_score = 0.0
    for i in range(200):
        estimand = "RR" if i % 3 == 2 else "ATE"
        d = _trial(rng, int(rng.integers(30, 160)), binary=i % 2 == 0, positive=True)
        d, _ = scale_for(parse_config({"estimand": estimand}), d)
        or_l = fit_outcome_learner(parse_learner(ors[i % len(ors)]), d, i)
        ps_l = fit_pscore_learner(parse_learner(pss[i % len(pss)], PSCORE), d, i)
        predA, p1, p0 = initial_predictions(or_l, d)
        g = ps_l.predict_pscore(d.W)
        flu, t1, t0 = target(predA, p1, p0, g, d)
        if not flu.converged:
            continue
        psi1, psi0, _ = point_estimates(t1, t0, estimand)
        ic = influence_curve(d, t1, t0, g, psi1, psi0, estimand)
        h1, h0 = d.arm / g, (1 - d.arm) / (1 - g)
        worst_ic = max(worst_ic, abs(ic.mean()))
        worst_score = max(worst_score, abs(np.mean(h1 * (d.y - t1))), abs(np.mean(h0 * (d.y - t0))))
        checked += 1
    record_property("detail", f"{int(checked)} targeted fits, max |mean IC| {worst_ic:.1e}, "
                              f"max score {worst_score:.1e}")
    assert checked >= 190
    assert worst_ic < 1e-8 and worst_score < 1e-6


def _brute_force_eps(y, off, h0, h1):
    """Grid search then finite-difference Newton on the offset binomial log-likelihood."""
    def ll(e):
        eta = off + e[0] * h0 + e[1] * h1
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    grid = np.linspace(-6, 6, 121)
    vals = np.array([[ll((a, b)) for b in grid] for a in grid])
    ia, ib = np.unravel_index(np.argmax(vals), vals.shape)
    e = np.array([grid[ia], grid[ib]])
    step = 1e-4
    I = np.eye(2) * step
    for _ in range(100):
        grad = np.array([(ll(e + I[k]) - ll(e - I[k])) / (2 * step) for k in range(2)])
        H = np.empty((2, 2))
        for j in range(2):
            for k in range(2):
                H[j, k] = (ll(e + I[j] + I[k]) - ll(e + I[j] - I[k]) - ll(e - I[j] + I[k])
                           + ll(e - I[j] - I[k])) / (4 * step * step)
        delta = np.linalg.solve(H, -grad)
        e = e + delta
        if np.max(np.abs(delta)) < 1e-12:
            break
    return e


@pytest.mark.criterion(4, "fluctuation oracle: IRLS eps equals grid+Newton maximizer within 1e-6 (20 datasets, n<=12)")
def test_c04_fluctuation_oracle(record_property):
    rng = np.random.default_rng(404)
    worst = 0.0
    for i in range(20):
        n = int(rng.integers(6, 13))
        arm = np.zeros(n, dtype=int)
        arm[rng.permutation(n)[: n // 2]] = 1
        if i % 2:
            y = rng.uniform(0.05, 0.95, n)
        else:  # binary, both outcome values present in each arm
            y = (rng.random(n) < 0.5).astype(float)
            for a in (0, 1):
                idx = np.flatnonzero(arm == a)
                y[idx[0]], y[idx[1]] = 0.0, 1.0
        p1, p0 = rng.uniform(0.15, 0.85, n), rng.uniform(0.15, 0.85, n)
        g = rng.uniform(0.3, 0.7, n)
        d = TrialDataset.from_arrays(arm, y)
        flu, _, _ = target(np.where(arm == 1, p1, p0), p1, p0, g, d)
        assert flu.converged
        ref = _brute_force_eps(y, logit(np.where(arm == 1, p1, p0)), (1 - arm) / (1 - g), arm / g)
        worst = max(worst, abs(flu.eps0 - ref[0]), abs(flu.eps1 - ref[1]))
    record_property("detail", f"max |eps - oracle| {worst:.1e}")
    assert worst < 1e-6


@pytest.mark.criterion(5, "variance oracle: unadjusted TMLE variance = n/(n-1)(s1^2/n1 + s0^2/n0) within 1e-10")
def test_c05_variance_oracle(record_property):
    rng = np.random.default_rng(505)
    worst = 0.0
    un_or, un_ps = parse_learner("unadjusted"), parse_learner("unadjusted", PSCORE)
    for i in range(50):
        d = _trial(rng, int(rng.integers(8, 300)), binary=i % 2 == 0)
        est = run_tmle(un_or, un_ps, UNADJ_ONLY, d)
        n = d.n
        y1, y0 = d.y[d.arm == 1], d.y[d.arm == 0]
        # ddof=0 arm variances; the n/(n-1) factor comes from the ddof=1 IC variance
        oracle = n / (n - 1) * (y1.var() / len(y1) + y0.var() / len(y0))
        worst = max(worst, abs(est.variance - oracle))
    record_property("detail", f"max abs diff {worst:.1e}")
    assert worst <= 1e-10


@pytest.mark.criterion(6, "argmin guarantee: zero violations over 100 datasets/seeds")
def test_c06_argmin_guarantee(record_property):
    rng = np.random.default_rng(606)
    plan = parse_config({
        "or_candidates": ["unadjusted", "glm(W1)", "glm(W2)", "glm(main_terms)", "stepwise", "mars_screen"],
        "ps_candidates": ["unadjusted", "glm(W1)", "glm(W2)"],
    })
    violations = 0
    adjusted = 0
    for i in range(100):
        binary = i % 2 == 0
        d = _trial(rng, int(rng.integers(24, 140)), binary=binary)
        cfg = plan.replace(seed=int(rng.integers(0, 2 ** 63)))
        sel = run_adaptive_prespec(cfg, d)
        best_or = sel.score_of(sel.or_spec.label)
        unadj_or = sel.score_of("unadjusted")
        pair = sel.score_of(sel.ps_spec.label, "ps")
        scaled, _ = scale_for(cfg, d)
        baseline = cv_score(sel.or_spec, UNADJ_PS, scaled, sel.folds, cfg).cv_variance
        violations += int(not best_or <= unadj_or) + int(not pair <= baseline)
        violations += int(baseline != sel.score_of("unadjusted", "ps"))
        violations += int(any(best_or > s.cv_variance for s in sel.or_scores))
        violations += int(any(pair > s.cv_variance for s in sel.ps_scores))
        adjusted += int(not sel.or_spec.is_unadjusted)
    record_property("detail", f"{violations} violations; adjusted OR chosen in {adjusted}/100")
    assert violations == 0


def _prognostic_dgp(n):
    covs = (CovariateGen("W1", "normal", 0, 1), CovariateGen("W2", "bernoulli", 0.5),
            CovariateGen("W3", "uniform", -1, 1))
    # Var(W1) = 1 = Var(Uniform(-sqrt3, sqrt3)): W1 explains half the outcome variance
    return DgpSpec(n, covs, "continuous", 0.0, 0.3, (1.0, 0.0, 0.0), noise=math.sqrt(3))


@pytest.mark.criterion(7, "selector power: prognostic covariate chosen in >= 90% of 200 seeds; precision ratio > 1.2")
@pytest.mark.slow
def test_c07_selector_power(record_property):
    plan = parse_config({"or_candidates": ["unadjusted", "glm(W1)", "glm(W2)", "glm(W3)", "glm(main_terms)"],
                         "ps_candidates": ["unadjusted", "glm(W1)"], "seed": 7})
    res = run_parametric_sim(_prognostic_dgp(500), plan, reps=200, seed=7)
    nesting = {"glm(W1)", "glm(main_terms)"}
    hits = sum(1 for r in res.records if r["or"] in nesting)
    rate = hits / len(res.records)
    record_property("detail", f"W1-nesting OR chosen {rate:.3f}; MSE ratio {res.relative_precision:.2f}; "
                              f"mean est. gain {res.mean_precision_gain:.2f}; failed {res.n_failed}")
    assert res.n_failed == 0
    assert rate >= 0.90
    assert res.relative_precision > 1.2 and res.mean_precision_gain > 1.2


def _binary_dgp(arm_coef):
    covs = (CovariateGen("W1", "normal", 0, 1), CovariateGen("W2", "bernoulli", 0.5),
            CovariateGen("W3", "uniform", -1, 1))
    return DgpSpec(200, covs, "binary", -0.5, arm_coef, (1.0, 0.5, 0.0))


GLM_LIBRARY = parse_config({
    "or_candidates": ["unadjusted", "glm(W1)", "glm(W2)", "glm(W3)", "glm(main_terms)"],
    "ps_candidates": ["unadjusted", "glm(W1)", "glm(W2)"],
    "seed": 2024,
})


@pytest.mark.criterion(8, "Type-I error: null DGP rejection in exact binomial band; permutation rate CI covers <= 0.05")
@pytest.mark.slow
def test_c08_type_one_error(record_property):
    res = run_parametric_sim(_binary_dgp(0.0), GLM_LIBRARY, reps=1000, seed=8)
    m = res.metrics["adaptive"]
    n_ok = res.reps - res.n_failed
    lo_k = stats.binom.ppf(0.025, n_ok, 0.05)
    hi_k = stats.binom.isf(0.025, n_ok, 0.05)
    k = round(m.rejection_rate * n_ok)

    data = generate(_binary_dgp(0.6), np.random.default_rng(88))
    perm = run_permutation_check(data, GLM_LIBRARY, reps=500, seed=88)
    record_property("detail", f"rejection {m.rejection_rate:.3f} (band [{lo_k / n_ok:.3f}, {hi_k / n_ok:.3f}]); "
                              f"permutation rate {perm.rate:.3f} CI ({perm.ci[0]:.3f}, {perm.ci[1]:.3f})")
    assert res.n_failed == 0
    assert lo_k <= k <= hi_k
    assert perm.reps == 500 and perm.ci[0] <= 0.05


@pytest.mark.criterion(9, "coverage: effectful DGP (truth from 1e7 draws), 1000 reps, coverage in [0.93, 0.975]")
@pytest.mark.slow
def test_c09_coverage(record_property):
    res = run_parametric_sim(_binary_dgp(0.6), GLM_LIBRARY, reps=1000, seed=9)
    cov = res.metrics["adaptive"].coverage
    record_property("detail", f"coverage {cov:.3f}; truth {res.true_effect:.5f} via {res.true_effect_method}; "
                              f"MSE ratio {res.relative_precision:.2f}")
    assert res.true_effect_method == "monte_carlo(10000000 draws)"
    assert res.n_failed == 0
    assert 0.93 <= cov <= 0.975


@pytest.mark.criterion(10, "clusters: leave-one-cluster-out folds, 16 cluster ICs, size-1 clusters = individual analysis")
def test_c10_cluster_handling(record_property):
    rng = np.random.default_rng(1010)
    sizes = rng.integers(3, 9, 16)
    code = np.repeat(np.arange(16), sizes)
    arm_c = np.zeros(16, dtype=int)
    arm_c[rng.permutation(16)[:8]] = 1
    n = len(code)
    W = rng.normal(size=(n, 2))
    u = rng.normal(scale=0.5, size=16)[code]
    y = 2.0 + 0.5 * arm_c[code] + W[:, 0] + u + rng.normal(size=n)
    d = TrialDataset.from_arrays(arm_c[code], y, W, cluster_ids=[f"v{c}" for c in code])
    plan = parse_config({"or_candidates": ["unadjusted", "glm(W1)", "glm(W2)"],
                         "ps_candidates": ["unadjusted", "glm(W1)"], "cv": "loo", "seed": 3})
    sel = run_adaptive_prespec(plan, d)
    folds = sel.folds
    fold_of_row = folds.fold_of_unit[folds.unit_of_row]
    spans = sum(len(set(fold_of_row[code == c])) != 1 for c in range(16))
    assert folds.V_effective == 16 and sorted(folds.fold_of_unit) == list(range(16))
    assert spans == 0
    f = sel.final
    assert f.n_independent_units == 16 and len(f.ic_cluster) == 16
    assert f.se == pytest.approx(np.sqrt(np.var(f.ic_cluster, ddof=1) / 16), rel=1e-12)

    # clusters of size one reproduce the individual-level analysis exactly
    m = 40
    W1 = rng.normal(size=(m, 2))
    arm1 = np.tile([0, 1], m // 2)
    y1 = W1[:, 0] + 0.3 * arm1 + rng.normal(size=m)
    ind = TrialDataset.from_arrays(arm1, y1, W1)
    clu = TrialDataset.from_arrays(arm1, y1, W1, cluster_ids=[f"c{i}" for i in range(m)])
    a, b = run_adaptive_prespec(plan, ind), run_adaptive_prespec(plan, clu)
    same = (a.final.estimate == b.final.estimate and a.final.se == b.final.se and a.final.ci == b.final.ci
            and [s.cv_variance for s in a.or_scores] == [s.cv_variance for s in b.or_scores]
            and [s.cv_variance for s in a.ps_scores] == [s.cv_variance for s in b.ps_scores])
    record_property("detail", f"16 folds, 0 spanning clusters; size-1 identical: {same}")
    assert same


@pytest.mark.criterion(11, "learner oracles: lasso soft-threshold (1e-8), stepwise first step, MARS linear fit (1e-6)")
def test_c11_learner_oracles(record_property):
    rng = np.random.default_rng(1111)
    # lasso coordinate update on an orthonormal design, both kernel backends
    n, p = 50, 4
    Q, _ = np.linalg.qr(rng.normal(size=(n, p)))
    X = Q * np.sqrt(n)
    z = 2 * rng.normal(size=n)
    lam = 0.3
    rho = X.T @ z / n
    expected = np.sign(rho) * np.maximum(np.abs(rho) - lam, 0.0)
    pen = np.ones(p, dtype=bool)
    lasso_err = 0.0
    impls = [_kernels._cd_wls_numpy] + ([_kernels._cd_wls_numba] if _kernels.USE_NUMBA else [])
    for impl in impls:
        beta, _ = impl(X, z, np.ones(n), lam, pen, np.zeros(p), 10_000, 1e-14)
        lasso_err = max(lasso_err, np.max(np.abs(beta - expected)))
    assert lasso_err < 1e-8

    # stepwise first addition equals exhaustive single-term AIC search (independent optimizer)
    def aic(cols, y):
        Xd = np.column_stack([np.ones(len(y))] + cols)
        nll = lambda b: float(np.sum(np.logaddexp(0, Xd @ b) - y * (Xd @ b)))
        jac = lambda b: Xd.T @ (expit(Xd @ b) - y)
        r = optimize.minimize(nll, np.zeros(Xd.shape[1]), jac=jac, method="BFGS", options={"gtol": 1e-10})
        return 2 * r.fun + 2 * Xd.shape[1]

    matches = 0
    for _ in range(10):
        d = _trial(rng, 150, binary=True, p=4)
        arm = d.arm.astype(float)
        base = aic([arm], d.y)
        scores = [aic([arm, d.W[:, j]], d.y) for j in range(4)]
        order = np.argsort(scores)
        _, path = stepwise_select(d, interactions=False)
        if scores[order[0]] < base:
            matches += int(path[:1] == [f"W{order[0] + 1}"])
        else:
            matches += int(path == [])
    assert matches == 10

    # MARS reproduces a noiseless linear function at the observed points
    m = 120
    W = rng.uniform(-1, 1, size=(m, 2))
    arm = np.tile([0, 1], m // 2)
    y = 0.45 + 0.2 * W[:, 0] - 0.1 * W[:, 1] + 0.05 * arm
    fl = mars_fit(TrialDataset.from_arrays(arm, y, W))
    mars_err = float(np.max(np.abs(fl.predict_outcome(arm, W) - y)))
    record_property("detail", f"lasso err {lasso_err:.1e}; stepwise {matches}/10; MARS err {mars_err:.1e}")
    assert mars_err < 1e-6


@pytest.mark.criterion(12, "reproducibility: two cmd_analyze runs are byte-identical except the timestamp")
def test_c12_reproducible_reports(tmp_path, record_property):
    rng = np.random.default_rng(1212)
    n = 90
    rows = ["pid,A,Y,age,site"]
    arm = rng.permutation(np.r_[np.ones(45), np.zeros(45)]).astype(int)
    for i in range(n):
        age = rng.normal(40, 10)
        rows.append(f"p{i},{arm[i]},{0.1 * age + arm[i] + rng.normal():.4f},{age:.2f},{'abc'[i % 3]}")
    (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
    (tmp_path / "plan.yaml").write_text(
        "or_candidates: [unadjusted, glm(age), glm(site), glm(main_terms), stepwise, lasso, mars]\n"
        "ps_candidates: [unadjusted, glm(age), lasso]\n"
        "seed: 31337\n"
        "data: {id: pid, arm: A, outcome: Y, covariates: [age, site], categorical: [site]}\n")
    bodies = []
    for k in (1, 2):
        cmd_analyze(tmp_path / "plan.yaml", tmp_path / "d.csv", tmp_path / f"r{k}.json")
        js = json.loads((tmp_path / f"r{k}.json").read_text())
        assert "timestamp" in js
        text = (tmp_path / f"r{k}.json").read_bytes().splitlines()
        md = (tmp_path / f"r{k}.md").read_bytes().splitlines()
        bodies.append(([l for l in text if b'"timestamp"' not in l], [l for l in md if b"generated:" not in l]))
    record_property("detail", f"{len(bodies[0][0])} JSON lines compared")
    assert bodies[0] == bodies[1]
