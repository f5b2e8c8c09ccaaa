"""Monte-Carlo checks: parametric data-generating processes, arm-label
permutation tests of Type-I error, and estimator comparison metrics."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from scipy import stats
from scipy.special import expit

from .adaptive_prespec import derive_seed, run_adaptive_prespec
from .config import ConfigError
from .data_model import DataError, TrialDataset

__all__ = [
    "CovariateGen",
    "DgpSpec",
    "EstimatorMetrics",
    "SimResult",
    "PermutationResult",
    "DgpError",
    "generate",
    "true_effect",
    "run_parametric_sim",
    "run_permutation_check",
    "sample_size_savings",
    "binomial_ci",
    "parse_dgp",
    "load_dgp",
]

TRUTH_DRAWS = 10_000_000
_TRUTH_CHUNK = 1_000_000
_TRUTH_SEED = 20_161_016
_truth_cache: dict = {}

# failures a replicate may raise without stopping the whole simulation
_REP_ERRORS = (DataError, ValueError, ArithmeticError, np.linalg.LinAlgError)


class DgpError(ConfigError):
    pass


@dataclass(frozen=True)
class CovariateGen:
    name: str
    dist: str  # normal | uniform | bernoulli
    a: float = 0.0  # mean | low | p
    b: float = 1.0  # sd | high | (unused)

    def __post_init__(self):
        if self.dist == "normal" and not self.b > 0:
            raise DgpError(f"covariate {self.name}: sd must be positive")
        if self.dist == "uniform" and not self.a < self.b:
            raise DgpError(f"covariate {self.name}: need low < high")
        if self.dist == "bernoulli" and not 0.0 <= self.a <= 1.0:
            raise DgpError(f"covariate {self.name}: p must lie in [0, 1]")
        if self.dist not in ("normal", "uniform", "bernoulli"):
            raise DgpError(f"covariate {self.name}: unknown distribution {self.dist!r}")

    def draw(self, rng, size):
        if self.dist == "normal":
            return rng.normal(self.a, self.b, size)
        if self.dist == "uniform":
            return rng.uniform(self.a, self.b, size)
        return (rng.random(size) < self.a).astype(float)

    @property
    def mean(self) -> float:
        return {"normal": self.a, "uniform": 0.5 * (self.a + self.b), "bernoulli": self.a}[self.dist]

    @property
    def var(self) -> float:
        if self.dist == "normal":
            return self.b ** 2
        if self.dist == "uniform":
            return (self.b - self.a) ** 2 / 12.0
        return self.a * (1.0 - self.a)


@dataclass(frozen=True)
class DgpSpec:
    """Parametric trial generator.

    Linear predictor: intercept + arm_coef*A + sum coef_j W_j
    + sum arm_interaction_j A W_j + sum c W_i W_k (+ cluster effect).
    Binary outcomes are Bernoulli(expit(lp)); continuous outcomes are
    lp + Uniform(-noise, noise). Treatment is completely randomized:
    round(p_treat * units) of the randomized units are treated.
    """

    n_units: int
    covariates: tuple = ()
    outcome: str = "binary"  # binary | continuous
    intercept: float = 0.0
    arm_coef: float = 0.0
    coefficients: tuple = ()  # one per covariate
    arm_interactions: tuple = ()  # one per covariate, or empty
    interactions: tuple = ()  # (i, k, coef) index triples
    noise: float = 1.0
    p_treat: float = 0.5
    n_clusters: Optional[int] = None
    cluster_sd: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        p = len(self.covariates)
        coefs = tuple(float(c) for c in self.coefficients) or (0.0,) * p
        arm_int = tuple(float(c) for c in self.arm_interactions) or (0.0,) * p
        object.__setattr__(self, "coefficients", coefs)
        object.__setattr__(self, "arm_interactions", arm_int)
        object.__setattr__(self, "interactions", tuple((int(i), int(k), float(c)) for i, k, c in self.interactions))
        if len(coefs) != p or len(arm_int) != p:
            raise DgpError("coefficients and arm_interactions need one entry per covariate")
        if not 0.0 < self.p_treat < 1.0:
            raise DgpError("p_treat must lie in (0, 1)")
        if self.outcome not in ("binary", "continuous"):
            raise DgpError(f"outcome must be binary or continuous, got {self.outcome!r}")
        if self.outcome == "continuous" and not self.noise >= 0:
            raise DgpError("noise half-width must be nonnegative")
        if self.cluster_sd < 0:
            raise DgpError("cluster_sd must be nonnegative")
        for i, k, _ in self.interactions:
            if not (0 <= i < p and 0 <= k < p):
                raise DgpError("interaction refers to an unknown covariate")
        units = self.n_clusters if self.n_clusters is not None else self.n_units
        if self.n_clusters is not None and not 4 <= self.n_clusters <= self.n_units:
            raise DgpError("n_clusters must lie in [4, n_units]")
        n1 = round(self.p_treat * units)
        if min(n1, units - n1) < 2:
            raise DgpError("each arm needs at least 2 randomized units")

    @property
    def names(self) -> tuple:
        return tuple(c.name for c in self.covariates)

    def linear_predictor(self, arm, W, u=0.0):
        lp = self.intercept + self.arm_coef * arm + u
        for j in range(len(self.covariates)):
            lp = lp + (self.coefficients[j] + self.arm_interactions[j] * arm) * W[:, j]
        for i, k, c in self.interactions:
            lp = lp + c * W[:, i] * W[:, k]
        return lp


def generate(dgp: DgpSpec, rng) -> TrialDataset:
    n = dgp.n_units
    W = np.column_stack([c.draw(rng, n) for c in dgp.covariates]) if dgp.covariates else np.zeros((n, 0))
    if dgp.n_clusters is None:
        n1 = round(dgp.p_treat * n)
        arm = np.zeros(n, dtype=np.int64)
        arm[rng.permutation(n)[:n1]] = 1
        u = 0.0
        clusters = None
    else:
        J = dgp.n_clusters
        code = np.repeat(np.arange(J), [len(s) for s in np.array_split(np.arange(n), J)])
        arm_c = np.zeros(J, dtype=np.int64)
        arm_c[rng.permutation(J)[:round(dgp.p_treat * J)]] = 1
        arm = arm_c[code]
        u = rng.normal(0.0, dgp.cluster_sd, J)[code] if dgp.cluster_sd > 0 else 0.0
        clusters = [f"c{c}" for c in code]
    lp = dgp.linear_predictor(arm, W, u)
    if dgp.outcome == "binary":
        y = (rng.random(n) < expit(lp)).astype(float)
    else:
        y = lp + rng.uniform(-dgp.noise, dgp.noise, n)
    return TrialDataset.from_arrays(arm, y, W, covariate_names=dgp.names, cluster_ids=clusters)


def _analytic_means(dgp: DgpSpec):
    """Counterfactual arm means of the linear predictor (independent covariates)."""
    mu = np.array([c.mean for c in dgp.covariates])
    second = {}
    for i, k, _ in dgp.interactions:
        second[(i, k)] = mu[i] * mu[k] if i != k else dgp.covariates[i].var + mu[i] ** 2
    out = []
    for a in (1, 0):
        m = dgp.intercept + dgp.arm_coef * a
        m += sum((dgp.coefficients[j] + dgp.arm_interactions[j] * a) * mu[j] for j in range(len(mu)))
        m += sum(c * second[(i, k)] for i, k, c in dgp.interactions)
        out.append(float(m))
    return tuple(out)


def _mc_means(dgp: DgpSpec, draws: int):
    rng = np.random.default_rng(_TRUTH_SEED)
    s1 = s0 = 0.0
    done = 0
    while done < draws:
        m = min(_TRUTH_CHUNK, draws - done)
        W = np.column_stack([c.draw(rng, m) for c in dgp.covariates]) if dgp.covariates else np.zeros((m, 0))
        u = rng.normal(0.0, dgp.cluster_sd, m) if dgp.cluster_sd > 0 else 0.0
        s1 += float(np.sum(expit(dgp.linear_predictor(1, W, u))))
        s0 += float(np.sum(expit(dgp.linear_predictor(0, W, u))))
        done += m
    return s1 / draws, s0 / draws


def true_effect(dgp: DgpSpec, estimand: str = "ATE", draws: int = TRUTH_DRAWS):
    """``(effect, psi1, psi0, method)``; RR is the ratio of counterfactual means.

    Continuous outcomes have closed-form means. Binary outcomes are
    evaluated by Monte Carlo over ``draws`` covariate draws unless no
    covariate or cluster term enters the model. Results are cached.
    """
    key = (dgp, draws)
    if key not in _truth_cache:
        no_covariate_terms = not any(dgp.coefficients) and not any(dgp.arm_interactions) \
            and not any(c for _, _, c in dgp.interactions) and dgp.cluster_sd == 0
        if dgp.outcome == "continuous":
            _truth_cache[key] = (*_analytic_means(dgp), "analytic")
        elif no_covariate_terms:
            _truth_cache[key] = (float(expit(dgp.intercept + dgp.arm_coef)), float(expit(dgp.intercept)), "analytic")
        else:
            _truth_cache[key] = (*_mc_means(dgp, draws), f"monte_carlo({draws} draws)")
    psi1, psi0, method = _truth_cache[key]
    effect = psi1 / psi0 if estimand == "RR" else psi1 - psi0
    return effect, psi1, psi0, method


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def binomial_ci(k: int, n: int, level: float = 0.95):
    """Exact (Clopper-Pearson) interval for a binomial proportion."""
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="exact")
    return float(ci.low), float(ci.high)


def sample_size_savings(mse_adjusted: float, mse_unadjusted: float) -> float:
    """Fractional reduction in sample size for equal power: 1 - adjusted/unadjusted."""
    if mse_unadjusted == 0:
        raise ZeroDivisionError("unadjusted MSE is zero")
    if mse_adjusted < 0 or mse_unadjusted < 0:
        raise ValueError("MSE values must be positive")
    return 1.0 - mse_adjusted / mse_unadjusted


@dataclass(frozen=True)
class EstimatorMetrics:
    bias: float
    empirical_variance: float  # ddof=0, so mse == bias**2 + empirical_variance
    mean_estimated_variance: float
    mse: float
    coverage: float
    rejection_rate: float
    rejection_ci: tuple

    @classmethod
    def from_draws(cls, est, var, lo, hi, truth, null, level=0.95):
        est = np.asarray(est, dtype=float)
        lo, hi = np.asarray(lo), np.asarray(hi)
        err = est - truth
        k = int(np.sum((lo > null) | (hi < null)))
        return cls(
            bias=float(np.mean(err)),
            empirical_variance=float(np.var(est)),
            mean_estimated_variance=float(np.mean(var)),
            mse=float(np.mean(err ** 2)),
            coverage=float(np.mean((lo <= truth) & (truth <= hi))),
            rejection_rate=k / len(est),
            rejection_ci=binomial_ci(k, len(est), level),
        )

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["rejection_ci"] = list(self.rejection_ci)
        return d


@dataclass(eq=False)
class SimResult:
    reps: int
    n_failed: int
    estimand: str
    true_effect: float
    true_effect_method: str
    metrics: dict  # estimator name -> EstimatorMetrics
    relative_precision: float  # MSE(unadjusted) / MSE(adaptive)
    mean_precision_gain: float
    sample_size_savings: float
    selection_counts: dict
    seeds: list
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "reps": self.reps,
            "n_failed": self.n_failed,
            "estimand": self.estimand,
            "true_effect": self.true_effect,
            "true_effect_method": self.true_effect_method,
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
            "relative_precision": self.relative_precision,
            "mean_precision_gain": self.mean_precision_gain,
            "sample_size_savings": self.sample_size_savings,
            "selection_counts": dict(self.selection_counts),
            "seeds": [int(s) for s in self.seeds],
            "records": self.records,
            "failures": self.failures,
        }


def _effect_scale(est, estimand):
    """Point estimate and CI on the scale the variance refers to (log for RR)."""
    if estimand == "RR":
        return math.log(est.estimate), math.log(est.ci[0]), math.log(est.ci[1])
    return est.estimate, est.ci[0], est.ci[1]


def run_parametric_sim(dgp: DgpSpec, config, reps: int, seed: int, truth_draws: int = TRUTH_DRAWS,
                       progress=None) -> SimResult:
    """Repeat (generate, analyse) ``reps`` times; compare adaptive TMLE to the unadjusted estimator.

    Replicate r uses the child seed ``derive_seed(seed, r)`` both to generate
    its data and as the analysis seed. For RR, bias/variance/MSE are on the
    log scale. Failed replicates are counted and excluded.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    estimand = config.estimand
    truth, _, _, method = true_effect(dgp, estimand, truth_draws)
    t_scale = math.log(truth) if estimand == "RR" else truth
    null = 0.0

    seeds = [derive_seed(seed, r) for r in range(reps)]
    rows = {"adaptive": [], "unadjusted": []}
    records, failures, gains, counts = [], [], [], {}
    for r, s in enumerate(seeds):
        try:
            data = generate(dgp, np.random.default_rng(s))
            sel = run_adaptive_prespec(config.replace(seed=s), data)
            pair = []
            for name, est in (("adaptive", sel.final), ("unadjusted", sel.unadjusted)):
                e, lo, hi = _effect_scale(est, estimand)
                pair.append((name, (e, est.variance, lo, hi)))
        except _REP_ERRORS as exc:
            failures.append({"rep": r, "seed": s, "error": f"{type(exc).__name__}: {exc}"})
            continue
        for name, row in pair:
            rows[name].append(row)
        gains.append(sel.precision_gain)
        label = f"{sel.or_spec.label} | {sel.ps_spec.label}"
        counts[label] = counts.get(label, 0) + 1
        records.append({"rep": r, "seed": s, "or": sel.or_spec.label, "ps": sel.ps_spec.label,
                        "estimate": sel.final.estimate, "ci": list(sel.final.ci),
                        "unadjusted_estimate": sel.unadjusted.estimate, "precision_gain": sel.precision_gain})
        if progress is not None:
            progress(r + 1, reps)

    if not records:
        raise DataError(f"all {reps} replicates failed; first error: {failures[0]['error']}")
    metrics = {}
    for name, rs in rows.items():
        a = np.array(rs)
        metrics[name] = EstimatorMetrics.from_draws(a[:, 0], a[:, 1], a[:, 2], a[:, 3], t_scale, null)
    mse_a, mse_u = metrics["adaptive"].mse, metrics["unadjusted"].mse
    return SimResult(
        reps=reps, n_failed=len(failures), estimand=estimand, true_effect=truth, true_effect_method=method,
        metrics=metrics,
        relative_precision=mse_u / mse_a if mse_a > 0 else float("inf"),
        mean_precision_gain=float(np.mean(gains)),
        sample_size_savings=sample_size_savings(mse_a, mse_u) if mse_u > 0 else float("nan"),
        selection_counts=dict(sorted(counts.items())), seeds=seeds, records=records, failures=failures,
    )


# ---------------------------------------------------------------------------
# permutation check
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PermutationResult:
    reps: int
    rejections: int
    rate: float
    ci: tuple
    exhaustive: bool
    level: str  # "cluster" | "individual"
    n_failed: int = 0
    estimates: list = field(default_factory=list)
    unadjusted_estimates: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "reps": self.reps, "rejections": self.rejections, "rate": self.rate, "ci": list(self.ci),
            "exhaustive": self.exhaustive, "level": self.level, "n_failed": self.n_failed,
            "estimates": list(self.estimates), "unadjusted_estimates": list(self.unadjusted_estimates),
        }


def _assignments(unit_arm, reps, rng):
    """Yield arm vectors over independent units: all distinct ones if there are at most ``reps``."""
    J, J1 = len(unit_arm), int(unit_arm.sum())
    total = math.comb(J, J1)
    if total <= reps:
        def gen():
            for treated in itertools.combinations(range(J), J1):
                a = np.zeros(J, dtype=np.int64)
                a[list(treated)] = 1
                yield a
        return gen(), total, True
    return (unit_arm[rng.permutation(J)] for _ in range(reps)), reps, False


def run_permutation_check(data: TrialDataset, config, reps: int, seed: int, level: float = 0.95,
                          progress=None) -> PermutationResult:
    """Treatment-blind Type-I error check.

    Arm labels are permuted across independent units (whole clusters when
    the trial is cluster-randomized), keeping arm sizes, and the full
    adaptive analysis is rerun each time. Since covariates and outcomes are
    untouched, the null of no effect holds by construction.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if data.cluster_randomized:
        lvl, unit_arm, expand = "cluster", data.unit_arm(), data.unit_codes
    else:
        lvl, unit_arm, expand = "individual", np.asarray(data.arm), np.arange(data.n)
    rng = np.random.default_rng(seed)
    assignments, total, exhaustive = _assignments(unit_arm, reps, rng)

    rejections, failed = 0, 0
    estimates, unadj = [], []
    for i, a in enumerate(assignments):
        try:
            sel = run_adaptive_prespec(config, data.with_arm(a[expand]))
        except _REP_ERRORS:
            failed += 1
            continue
        rejections += int(sel.final.rejects_null)
        estimates.append(sel.final.estimate)
        unadj.append(sel.unadjusted.estimate)
        if progress is not None:
            progress(i + 1, total)
    done = total - failed
    if done == 0:
        raise DataError("every permutation replicate failed")
    return PermutationResult(
        reps=done, rejections=rejections, rate=rejections / done, ci=binomial_ci(rejections, done, level),
        exhaustive=exhaustive, level=lvl, n_failed=failed, estimates=estimates, unadjusted_estimates=unadj,
    )


# ---------------------------------------------------------------------------
# DGP files
# ---------------------------------------------------------------------------

_DGP_KEYS = {"n_units", "n_clusters", "cluster_sd", "covariates", "outcome", "intercept", "arm_coef",
             "coefficients", "arm_interactions", "interactions", "noise", "p_treat"}


def _key_lines(text):
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def parse_dgp(text: str, source: str = "<dgp>") -> DgpSpec:
    """Parse a YAML DGP description.

    Example::

        n_units: 200
        outcome: continuous
        covariates:
          - {name: W1, dist: normal, mean: 0, sd: 1}
          - {name: W2, dist: bernoulli, p: 0.4}
        coefficients: {W1: 1.0}
        arm_coef: 0.3
        noise: 1.7
    """
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}" if mark is not None else ""
        raise DgpError(f"{source}{where}: malformed YAML ({getattr(exc, 'problem', exc)})") from None
    if not isinstance(d, dict):
        raise DgpError(f"{source}: DGP file must be a key/value mapping")
    lines = _key_lines(text)

    def fail(key, msg):
        ln = lines.get(key)
        raise DgpError(f"{source}{f' line {ln}' if ln else ''}: field {key!r}: {msg}")

    for key in d:
        if key not in _DGP_KEYS:
            fail(key, "unknown field")
    if "n_units" not in d:
        raise DgpError(f"{source}: missing required field 'n_units'")

    covs = []
    for j, c in enumerate(d.get("covariates") or []):
        if not isinstance(c, dict) or "name" not in c or "dist" not in c:
            fail("covariates", f"entry {j} needs name and dist")
        dist = str(c["dist"])
        params = {"normal": ("mean", "sd", 0.0, 1.0), "uniform": ("low", "high", 0.0, 1.0),
                  "bernoulli": ("p", None, 0.5, 0.0)}.get(dist)
        if params is None:
            fail("covariates", f"entry {j}: unknown distribution {dist!r}")
        ka, kb, da, db = params
        extra = set(c) - {"name", "dist", ka, kb}
        if extra:
            fail("covariates", f"entry {j}: unknown parameter(s) {sorted(extra)}")
        try:
            covs.append(CovariateGen(str(c["name"]), dist, float(c.get(ka, da)),
                                     float(c.get(kb, db)) if kb else 0.0))
        except (DgpError, TypeError, ValueError) as exc:
            fail("covariates", str(exc))
    names = [c.name for c in covs]
    if len(set(names)) != len(names):
        fail("covariates", "duplicate covariate names")

    def per_cov(key):
        m = d.get(key) or {}
        if not isinstance(m, dict):
            fail(key, "must map covariate names to numbers")
        bad = sorted(set(m) - set(names))
        if bad:
            fail(key, f"unknown covariate(s) {bad}")
        try:
            return tuple(float(m.get(n, 0.0)) for n in names)
        except (TypeError, ValueError):
            fail(key, "values must be numbers")

    inter = []
    for t in d.get("interactions") or []:
        if not (isinstance(t, list) and len(t) == 3 and t[0] in names and t[1] in names):
            fail("interactions", "entries must be [covariate, covariate, coefficient]")
        inter.append((names.index(t[0]), names.index(t[1]), t[2]))

    kwargs = {}
    for key, typ in (("n_units", int), ("intercept", float), ("arm_coef", float), ("noise", float),
                     ("p_treat", float), ("cluster_sd", float), ("outcome", str)):
        if key in d:
            try:
                kwargs[key] = typ(d[key])
            except (TypeError, ValueError):
                fail(key, f"expected {typ.__name__}, got {d[key]!r}")
    if d.get("n_clusters") is not None:
        try:
            kwargs["n_clusters"] = int(d["n_clusters"])
        except (TypeError, ValueError):
            fail("n_clusters", f"expected int, got {d['n_clusters']!r}")
    try:
        return DgpSpec(covariates=tuple(covs), coefficients=per_cov("coefficients"),
                       arm_interactions=per_cov("arm_interactions"), interactions=tuple(inter), **kwargs)
    except DgpError as exc:
        msg = str(exc)
        key = next((k for k in sorted(d, key=len, reverse=True) if k in msg), None)
        if key is not None:
            fail(key, msg)
        raise DgpError(f"{source}: {msg}") from None


def load_dgp(path) -> DgpSpec:
    path = Path(path)
    return parse_dgp(path.read_text(encoding="utf-8"), source=str(path))
