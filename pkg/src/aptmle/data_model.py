"""Trial data ingestion, validation, covariate encoding and outcome scaling."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .glm_core import PRED_EPS

__all__ = [
    "DataError",
    "Unit",
    "TrialDataset",
    "CsvSchema",
    "OutcomeScale",
    "load_csv",
    "scale_outcome",
    "unscale_effect",
    "clip_unit",
]


class DataError(ValueError):
    """Raised when trial data violate an ingestion or validation rule."""


@dataclass(frozen=True)
class Unit:
    id: str
    cluster_id: Optional[str]
    arm: int
    outcome: float
    covariates: tuple


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Column-oriented trial records.

    ``W`` holds the encoded covariate matrix (one column per name in
    ``covariate_names``). ``groups`` maps each original covariate to the
    columns it expanded into, so a categorical variable can be adjusted for
    as a block.
    """

    ids: np.ndarray
    arm: np.ndarray
    y: np.ndarray
    W: np.ndarray
    covariate_names: tuple
    cluster_ids: Optional[np.ndarray] = None
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.arm)
        W = np.asarray(self.W, dtype=float)
        if W.ndim == 1:
            W = W.reshape(n, -1) if n else W.reshape(0, 0)
        object.__setattr__(self, "W", _frozen(W, float))
        object.__setattr__(self, "arm", _frozen(self.arm, np.int64))
        object.__setattr__(self, "y", _frozen(self.y, float))
        object.__setattr__(self, "ids", _frozen([str(i) for i in self.ids], object))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if self.cluster_ids is not None:
            object.__setattr__(self, "cluster_ids", _frozen([str(c) for c in self.cluster_ids], object))
        if not self.groups:
            object.__setattr__(self, "groups", {c: (j,) for j, c in enumerate(self.covariate_names)})
        else:
            object.__setattr__(self, "groups", {k: tuple(v) for k, v in self.groups.items()})
        self._validate()
        if self.cluster_ids is not None:
            _, first, codes = np.unique(self.cluster_ids, return_index=True, return_inverse=True)
            # relabel clusters in order of first appearance
            order = np.argsort(first, kind="stable")
            relabel = np.empty_like(order)
            relabel[order] = np.arange(len(order))
            codes = relabel[codes]
        else:
            codes = np.arange(n)
        object.__setattr__(self, "_unit_codes", _frozen(codes, np.int64))

    def _validate(self):
        n = len(self.arm)
        if len(self.y) != n or len(self.ids) != n or self.W.shape[0] != n:
            raise DataError("column lengths disagree")
        if self.W.shape[1] != len(self.covariate_names):
            raise DataError("covariate matrix width does not match covariate_names")
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise DataError("duplicate covariate names")
        if not np.all((self.arm == 0) | (self.arm == 1)):
            raise DataError("arm not in {0,1}")
        if not np.all(np.isfinite(self.y)):
            raise DataError("outcome must be finite")
        if not np.all(np.isfinite(self.W)):
            raise DataError("covariates must be finite")
        if len(set(self.ids.tolist())) != n:
            raise DataError("duplicate unit id")
        for a in (0, 1):
            if np.sum(self.arm == a) < 2:
                raise DataError(f"arm {a} has fewer than 2 units")
        if self.cluster_ids is not None and len(self.cluster_ids) != n:
            raise DataError("cluster column length disagrees")

    # -- convenience -------------------------------------------------------

    @classmethod
    def from_arrays(cls, arm, y, W=None, covariate_names=None, ids=None, cluster_ids=None, groups=None):
        arm = np.asarray(arm)
        n = len(arm)
        if W is None:
            W = np.zeros((n, 0))
        W = np.asarray(W, dtype=float)
        if W.ndim == 1:
            W = W[:, None]
        if covariate_names is None:
            covariate_names = [f"W{j + 1}" for j in range(W.shape[1])]
        if ids is None:
            ids = [str(i) for i in range(n)]
        return cls(ids=ids, arm=arm, y=y, W=W, covariate_names=covariate_names,
                   cluster_ids=cluster_ids, groups=groups or {})

    @property
    def n(self) -> int:
        return len(self.arm)

    @property
    def has_clusters(self) -> bool:
        return self.cluster_ids is not None

    @property
    def unit_codes(self) -> np.ndarray:
        """Index of the independent unit (cluster, or the row itself) for each row."""
        return self._unit_codes

    @property
    def n_independent(self) -> int:
        return int(self._unit_codes.max()) + 1 if self.n else 0

    @property
    def cluster_randomized(self) -> bool:
        """True when clustered and every cluster lies entirely in one arm."""
        if not self.has_clusters:
            return False
        codes = self._unit_codes
        lo = np.full(self.n_independent, 2)
        hi = np.full(self.n_independent, -1)
        np.minimum.at(lo, codes, self.arm)
        np.maximum.at(hi, codes, self.arm)
        return bool(np.all(lo == hi))

    def unit_arm(self) -> np.ndarray:
        """Arm of each independent unit (majority arm for mixed clusters)."""
        counts = np.bincount(self._unit_codes, minlength=self.n_independent)
        treated = np.bincount(self._unit_codes, weights=self.arm, minlength=self.n_independent)
        return (treated / counts >= 0.5).astype(np.int64)

    @property
    def units(self) -> list:
        cl = self.cluster_ids if self.has_clusters else [None] * self.n
        return [
            Unit(str(i), None if c is None else str(c), int(a), float(y), tuple(float(v) for v in w))
            for i, c, a, y, w in zip(self.ids, cl, self.arm, self.y, self.W)
        ]

    def subset(self, rows) -> "TrialDataset":
        rows = np.asarray(rows)
        return _subset(self, rows)

    def with_outcome(self, y) -> "TrialDataset":
        return dataclasses.replace(self, y=np.asarray(y, dtype=float))

    def with_arm(self, arm) -> "TrialDataset":
        return dataclasses.replace(self, arm=np.asarray(arm))

    def columns_for(self, name: str) -> tuple:
        """Columns of ``W`` belonging to covariate ``name`` (original or encoded name)."""
        if name in self.groups:
            return self.groups[name]
        if name in self.covariate_names:
            return (self.covariate_names.index(name),)
        raise DataError(f"unknown covariate {name!r}")


def _subset(data: TrialDataset, rows: np.ndarray) -> TrialDataset:
    # bypasses the >= 2 per arm check: fold subsets are validated by the fold logic
    new = object.__new__(TrialDataset)
    for f in ("ids", "arm", "y"):
        object.__setattr__(new, f, _frozen(getattr(data, f)[rows], getattr(data, f).dtype))
    object.__setattr__(new, "W", _frozen(data.W[rows], float))
    object.__setattr__(new, "covariate_names", data.covariate_names)
    object.__setattr__(new, "groups", data.groups)
    cl = None if data.cluster_ids is None else _frozen(data.cluster_ids[rows], object)
    object.__setattr__(new, "cluster_ids", cl)
    object.__setattr__(new, "_unit_codes", data.unit_codes[rows])
    return new


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    id: str
    arm: str
    outcome: str
    covariates: tuple = ()
    categorical: tuple = ()
    cluster: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "categorical", tuple(self.categorical))
        stray = set(self.categorical) - set(self.covariates)
        if stray:
            raise DataError(f"categorical columns not listed as covariates: {sorted(stray)}")

    def to_dict(self) -> dict:
        return {
            "id": self.id, "arm": self.arm, "outcome": self.outcome, "cluster": self.cluster,
            "covariates": list(self.covariates), "categorical": list(self.categorical),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        known = {"id", "arm", "outcome", "cluster", "covariates", "categorical"}
        extra = set(d) - known
        if extra:
            raise DataError(f"unknown data schema field(s): {sorted(extra)}")
        for k in ("id", "arm", "outcome"):
            if k not in d:
                raise DataError(f"data schema missing field {k!r}")
        return cls(id=d["id"], arm=d["arm"], outcome=d["outcome"], cluster=d.get("cluster"),
                   covariates=tuple(d.get("covariates") or ()), categorical=tuple(d.get("categorical") or ()))


def _numeric(col: pd.Series, what: str) -> np.ndarray:
    try:
        return pd.to_numeric(col, errors="raise").to_numpy(dtype=float)
    except (ValueError, TypeError):
        raise DataError(f"non-numeric {what} column {col.name!r}") from None


def load_csv(path, schema: CsvSchema) -> TrialDataset:
    """Read a trial CSV (header row, UTF-8) into a validated dataset.

    Categorical covariates are one-hot encoded with levels sorted
    lexicographically; the first level is the dropped reference.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    df.columns = [c.strip() for c in df.columns]
    needed = [schema.id, schema.arm, schema.outcome, *schema.covariates]
    if schema.cluster:
        needed.append(schema.cluster)
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise DataError(f"missing column(s): {missing}")
    df = df.apply(lambda s: s.str.strip())
    blank = [c for c in needed if (df[c] == "").any()]
    if blank:
        raise DataError(f"missing values in column(s): {blank}")

    arm_raw = _numeric(df[schema.arm], "arm")
    if not np.all((arm_raw == 0) | (arm_raw == 1)):
        raise DataError("arm not in {0,1}")
    y = _numeric(df[schema.outcome], "outcome")

    cols, names, groups = [], [], {}
    for cov in schema.covariates:
        if cov in schema.categorical:
            levels = sorted(set(df[cov]))
            members = []
            for lev in levels[1:]:
                members.append(len(names))
                names.append(f"{cov}={lev}")
                cols.append((df[cov] == lev).to_numpy(dtype=float))
            groups[cov] = tuple(members)
        else:
            groups[cov] = (len(names),)
            names.append(cov)
            cols.append(_numeric(df[cov], "covariate"))
    W = np.column_stack(cols) if cols else np.zeros((len(df), 0))
    clusters = df[schema.cluster].tolist() if schema.cluster else None
    return TrialDataset(ids=df[schema.id].tolist(), arm=arm_raw.astype(np.int64), y=y, W=W,
                        covariate_names=names, cluster_ids=clusters, groups=groups)


# ---------------------------------------------------------------------------
# outcome scaling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OutcomeScale:
    lower: float
    upper: float
    kind: str  # "binary" | "bounded_continuous"

    def __post_init__(self):
        if self.kind not in ("binary", "bounded_continuous"):
            raise DataError(f"unknown outcome kind {self.kind!r}")
        if not self.lower < self.upper:
            raise DataError("outcome bounds must satisfy lower < upper")
        if self.kind == "binary" and (self.lower, self.upper) != (0.0, 1.0):
            raise DataError("binary outcomes use bounds (0, 1)")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_unit(self, y):
        return (np.asarray(y, dtype=float) - self.lower) / self.width

    def from_unit(self, u):
        return self.lower + self.width * np.asarray(u, dtype=float)


IDENTITY_SCALE = OutcomeScale(0.0, 1.0, "binary")


def clip_unit(u, eps: float = PRED_EPS):
    """Clip unit-interval values into [eps, 1 - eps] so their logit is finite."""
    return np.clip(u, eps, 1.0 - eps)


def scale_outcome(data: TrialDataset, bounds=None, clip: bool = False):
    """Map outcomes onto [0, 1]. Returns ``(scaled_dataset, OutcomeScale)``.

    Binary 0/1 outcomes pass through unchanged. Otherwise ``bounds`` default
    to the observed range. Scaled values are left unclipped unless ``clip``;
    every logit downstream is taken of clipped predictions instead.
    """
    y = data.y
    is_binary = bool(np.all((y == 0) | (y == 1)))
    if is_binary and (bounds is None or tuple(map(float, bounds)) == (0.0, 1.0)):
        return data, IDENTITY_SCALE
    if bounds is None:
        lower, upper = float(np.min(y)), float(np.max(y))
    else:
        lower, upper = map(float, bounds)
    if upper == lower:
        raise DataError("constant outcome")
    if upper < lower:
        raise DataError("outcome bounds must satisfy lower < upper")
    if np.min(y) < lower or np.max(y) > upper:
        raise DataError(f"outcomes fall outside the bounds ({lower}, {upper})")
    scale = OutcomeScale(lower, upper, "bounded_continuous")
    u = scale.to_unit(y)
    if clip:
        u = clip_unit(u)
    return data.with_outcome(u), scale


def unscale_effect(estimate, scale: OutcomeScale, estimand: Optional[str] = None):
    """Return a copy of a unit-scale estimate expressed on the natural outcome scale."""
    estimand = estimand or estimate.estimand
    if scale.kind == "binary" or (scale.lower == 0.0 and scale.upper == 1.0):
        return dataclasses.replace(estimate, scale=scale)
    if estimand == "RR" and scale.lower != 0.0:
        raise DataError("relative effect requires the outcome lower bound to be 0")
    s = scale.width
    psi1 = scale.lower + s * estimate.psi1
    psi0 = scale.lower + s * estimate.psi0
    changes = dict(psi1=psi1, psi0=psi0, effect_abs=s * estimate.effect_abs,
                   effect_rel=psi1 / psi0 if psi0 != 0 else float("nan"), scale=scale)
    if estimand == "ATE":
        lo, hi = estimate.ci
        changes.update(
            estimate=s * estimate.estimate, se=s * estimate.se, ci=(s * lo, s * hi),
            ic=s * estimate.ic,
            ic_cluster=None if estimate.ic_cluster is None else s * estimate.ic_cluster,
        )
    return dataclasses.replace(estimate, **changes)
