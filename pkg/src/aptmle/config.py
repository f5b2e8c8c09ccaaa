"""The locked analysis plan: estimand, candidate learners, CV scheme, seed.

Plans are stored as flat YAML files::

    estimand: ATE                 # ATE | RR
    or_candidates: [unadjusted, glm(age), glm(main_terms), stepwise, mars]
    ps_candidates: [unadjusted, glm(age)]
    cv: auto                      # auto | loo | <V>-fold
    cv_unit: auto                 # auto | individual | cluster
    stratify: true
    variance: standard            # standard | cross_validated
    seed: 20240417
    alpha: 0.05
    outcome_bounds: [0, 40]       # optional; observed range when omitted
    learner_options: {screen_p: 0.1}
    data: {id: pid, arm: A, outcome: Y, cluster: village,
           covariates: [age, sex], categorical: [sex]}
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data_model import CsvSchema
from .learners import OUTCOME, PSCORE, LearnerOptions, LearnerSpec, parse_learner

__all__ = ["ConfigError", "CvScheme", "SapConfig", "load_config", "parse_config", "dump_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CvScheme:
    kind: str = "auto"  # auto | v_fold | loo
    V: int = 10
    stratify_by_arm: bool = True
    unit: str = "auto"  # auto | individual | cluster

    def __post_init__(self):
        if self.kind not in ("auto", "v_fold", "loo"):
            raise ConfigError(f"unknown cv kind {self.kind!r}")
        if self.unit not in ("auto", "individual", "cluster"):
            raise ConfigError(f"unknown cv unit {self.unit!r}")
        if self.kind == "v_fold" and self.V < 2:
            raise ConfigError("V-fold cross-validation needs V >= 2")

    @property
    def text(self) -> str:
        return {"auto": "auto", "loo": "loo"}.get(self.kind, f"{self.V}-fold")

    def resolve(self, data) -> "CvScheme":
        """Fill in ``auto`` fields for a concrete dataset."""
        unit = self.unit
        if unit == "auto":
            unit = "cluster" if data.has_clusters else "individual"
        if data.cluster_randomized:
            unit = "cluster"
        n_units = data.n_independent if unit == "cluster" else data.n
        kind, V = self.kind, self.V
        if kind == "auto":
            kind, V = ("loo", n_units) if n_units <= 40 else ("v_fold", 10)
        if kind == "loo":
            V = n_units
        return CvScheme(kind, V, self.stratify_by_arm, unit)

    @classmethod
    def from_text(cls, text: str, unit: str = "auto", stratify: bool = True) -> "CvScheme":
        t = str(text).strip().lower()
        if t == "auto":
            return cls("auto", 10, stratify, unit)
        if t in ("loo", "leave_one_out", "leave-one-out"):
            return cls("loo", 10, stratify, unit)
        m = re.fullmatch(r"(\d+)[-_ ]?fold", t)
        if m:
            return cls("v_fold", int(m.group(1)), stratify, unit)
        raise ConfigError(f"cannot parse cv scheme {text!r}")


@dataclass(frozen=True)
class SapConfig:
    estimand: str = "ATE"
    or_candidates: tuple = (LearnerSpec("unadjusted", role=OUTCOME),)
    ps_candidates: tuple = (LearnerSpec("unadjusted", role=PSCORE),)
    cv_scheme: CvScheme = field(default_factory=CvScheme)
    variance_kind: str = "standard"
    seed: int = 0
    outcome_bounds: Optional[tuple] = None
    alpha: float = 0.05
    learner_options: LearnerOptions = field(default_factory=LearnerOptions)
    data_schema: Optional[CsvSchema] = None

    def __post_init__(self):
        object.__setattr__(self, "or_candidates", tuple(
            s if isinstance(s, LearnerSpec) else parse_learner(s, OUTCOME) for s in self.or_candidates))
        object.__setattr__(self, "ps_candidates", tuple(
            s if isinstance(s, LearnerSpec) else parse_learner(s, PSCORE) for s in self.ps_candidates))
        object.__setattr__(self, "or_candidates", tuple(s.with_role(OUTCOME) for s in self.or_candidates))
        object.__setattr__(self, "ps_candidates", tuple(s.with_role(PSCORE) for s in self.ps_candidates))
        if self.outcome_bounds is not None:
            object.__setattr__(self, "outcome_bounds", tuple(float(b) for b in self.outcome_bounds))
        self.validate()

    def validate(self):
        if self.estimand not in ("ATE", "RR"):
            raise ConfigError(f"estimand must be ATE or RR, got {self.estimand!r}")
        if self.variance_kind not in ("standard", "cross_validated"):
            raise ConfigError(f"variance must be standard or cross_validated, got {self.variance_kind!r}")
        if not any(s.is_unadjusted for s in self.or_candidates):
            raise ConfigError(
                "or_candidates must include 'unadjusted': the unadjusted estimator must be a candidate "
                "for the outcome regression so it can be selected when no adjustment improves precision")
        if not any(s.is_unadjusted for s in self.ps_candidates):
            raise ConfigError(
                "ps_candidates must include 'unadjusted': the unadjusted estimator must be a candidate "
                "for the propensity score")
        if len(set(self.or_candidates)) != len(self.or_candidates) or \
                len(set(self.ps_candidates)) != len(self.ps_candidates):
            raise ConfigError("duplicate candidate learners")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.outcome_bounds is not None:
            if len(self.outcome_bounds) != 2 or not self.outcome_bounds[0] < self.outcome_bounds[1]:
                raise ConfigError("outcome_bounds must be [lower, upper] with lower < upper")
            if self.estimand == "RR" and self.outcome_bounds[0] != 0.0:
                raise ConfigError("RR estimand requires outcome lower bound 0")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def replace(self, **changes) -> "SapConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = {
            "estimand": self.estimand,
            "or_candidates": [s.label for s in self.or_candidates],
            "ps_candidates": [s.label for s in self.ps_candidates],
            "cv": self.cv_scheme.text,
            "cv_unit": self.cv_scheme.unit,
            "stratify": self.cv_scheme.stratify_by_arm,
            "variance": self.variance_kind,
            "seed": int(self.seed),
            "alpha": float(self.alpha),
            "outcome_bounds": None if self.outcome_bounds is None else list(self.outcome_bounds),
            "learner_options": self.learner_options.to_dict(),
        }
        if self.data_schema is not None:
            d["data"] = self.data_schema.to_dict()
        return d


_KEYS = {"estimand", "or_candidates", "ps_candidates", "cv", "cv_unit", "stratify", "variance",
         "seed", "alpha", "outcome_bounds", "learner_options", "data"}


def parse_config(d: dict) -> SapConfig:
    if not isinstance(d, dict):
        raise ConfigError("analysis plan must be a key/value mapping")
    unknown = sorted(set(d) - _KEYS)
    if unknown:
        raise ConfigError(f"unknown field(s) in analysis plan: {unknown}")
    try:
        opts = d.get("learner_options") or {}
        bad = sorted(set(opts) - set(LearnerOptions().to_dict()))
        if bad:
            raise ConfigError(f"unknown learner_options field(s): {bad}")
        schema = CsvSchema.from_dict(d["data"]) if d.get("data") else None
        cv = CvScheme.from_text(d.get("cv", "auto"), unit=d.get("cv_unit", "auto"),
                                stratify=bool(d.get("stratify", True)))
        return SapConfig(
            estimand=str(d.get("estimand", "ATE")).upper(),
            or_candidates=tuple(parse_learner(s, OUTCOME) for s in _as_list(d, "or_candidates")),
            ps_candidates=tuple(parse_learner(s, PSCORE) for s in _as_list(d, "ps_candidates")),
            cv_scheme=cv,
            variance_kind=str(d.get("variance", "standard")),
            seed=int(d.get("seed", 0)),
            alpha=float(d.get("alpha", 0.05)),
            outcome_bounds=d.get("outcome_bounds"),
            learner_options=LearnerOptions(**opts),
            data_schema=schema,
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _as_list(d, key):
    v = d.get(key, ["unadjusted"])
    if isinstance(v, str):
        v = [v]
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{key} must be a non-empty list")
    return v


def load_config(path) -> SapConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(d)


def dump_config(config: SapConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=None)
