"""Cohort data model, delimited-text ingestion, missingness handling and imputation.

Missing cells are NaN throughout; NaN never compares equal to a valid number
and propagates through arithmetic, so no magic numeric sentinel is needed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import stats
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

MISSING_TOKENS = ("", "NA", "NaN")
TASK_TYPES = ("classification", "regression")
ROLE_KEYS = ("id", "target", "task_type", "demographic", "subgroup", "group",
             "exclude", "feature", "composites")


@dataclass(frozen=True)
class FeatureMeta:
    name: str
    kind: str = "raw"  # raw | composite | excluded
    components: tuple = ()
    missing_fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in ("raw", "composite", "excluded"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if (self.kind == "composite") != bool(self.components):
            raise ValueError(f"{self.name}: components must be non-empty iff kind is composite")


@dataclass(frozen=True)
class ColumnRoles:
    """Column-name to role mapping; unlisted columns become features."""

    target: str
    id: str | None = None
    task_type: str = "regression"
    demographic: tuple = ()
    subgroup: tuple = ()
    group: str | None = None
    exclude: tuple = ()
    feature: tuple = ()
    composites: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, m: dict) -> "ColumnRoles":
        unknown = set(m) - set(ROLE_KEYS)
        if unknown:
            raise ConfigError(f"unknown role keys: {sorted(unknown)}")
        if "target" not in m:
            raise ConfigError("roles: 'target' is required")

        def tup(v):
            if v is None:
                return ()
            return (v,) if isinstance(v, str) else tuple(v)

        task = m.get("task_type", "regression")
        if task not in TASK_TYPES:
            raise ConfigError(f"task_type must be one of {TASK_TYPES}")
        return cls(target=m["target"], id=m.get("id"), task_type=task,
                   demographic=tup(m.get("demographic")), subgroup=tup(m.get("subgroup")),
                   group=m.get("group"), exclude=tup(m.get("exclude")),
                   feature=tup(m.get("feature")),
                   composites={k: tuple(v) for k, v in (m.get("composites") or {}).items()})

    def named_columns(self):
        cols = [self.target, *self.demographic, *self.subgroup, *self.exclude,
                *self.feature, *self.composites]
        cols += [c for comps in self.composites.values() for c in comps]
        if self.id:
            cols.append(self.id)
        if self.group:
            cols.append(self.group)
        return cols


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    """Immutable column-oriented cohort table.

    ``features`` holds every numeric feature column including excluded proxies;
    ``candidate_names()`` is the only sanctioned way to enumerate candidates and
    never yields a column whose meta kind is ``excluded``.
    """

    features: dict
    target: np.ndarray
    task_type: str
    participant_id: np.ndarray
    meta: dict
    target_name: str = "target"
    demographics: dict = field(default_factory=dict)
    subgroups: dict = field(default_factory=dict)
    group: np.ndarray | None = None
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.target)
        object.__setattr__(self, "target", _freeze(np.asarray(self.target, dtype=float)))
        object.__setattr__(self, "participant_id", _freeze(np.asarray(self.participant_id)))
        for attr in ("features", "demographics", "subgroups"):
            cols = {k: _freeze(v) for k, v in getattr(self, attr).items()}
            object.__setattr__(self, attr, cols)
        if self.group is not None:
            object.__setattr__(self, "group", _freeze(np.asarray(self.group)))
        if self.task_type not in TASK_TYPES:
            raise ValueError(f"task_type must be one of {TASK_TYPES}")
        for name, col in [("participant_id", self.participant_id)] + \
                [(k, v) for d in (self.features, self.demographics, self.subgroups) for k, v in d.items()] + \
                ([("group", self.group)] if self.group is not None else []):
            if len(col) != n:
                raise ValueError(f"column {name!r} has {len(col)} entries, expected {n}")
        if np.isnan(self.target).any():
            raise ValueError("target has missing values")
        if self.task_type == "classification" and n and np.unique(self.target).size != 2:
            raise ValueError("classification target must take exactly two values")
        for k in self.features:
            if k not in self.meta:
                raise ValueError(f"feature {k!r} has no FeatureMeta")

    @property
    def n_rows(self) -> int:
        return int(self.target.size)

    @property
    def n_participants(self) -> int:
        return int(np.unique(self.participant_id).size)

    def candidate_names(self) -> list:
        return [k for k in self.features if self.meta[k].kind != "excluded"]

    def excluded_names(self) -> list:
        return [k for k in self.features if self.meta[k].kind == "excluded"]

    def missing_fraction(self, name: str) -> float:
        col = self.features[name]
        return float(np.isnan(col).mean()) if col.size else 0.0

    def demographic_matrix(self) -> np.ndarray:
        if not self.demographics:
            return np.empty((self.n_rows, 0))
        return np.column_stack([self.demographics[k] for k in sorted(self.demographics)])

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return replace(
            self,
            features={k: v[rows] for k, v in self.features.items()},
            target=self.target[rows],
            participant_id=self.participant_id[rows],
            demographics={k: v[rows] for k, v in self.demographics.items()},
            subgroups={k: v[rows] for k, v in self.subgroups.items()},
            group=None if self.group is None else self.group[rows],
        )

    def with_features(self, updates: dict) -> "Dataset":
        feats = dict(self.features)
        feats.update(updates)
        return replace(self, features=feats)

    def with_notes(self, **kw) -> "Dataset":
        notes = dict(self.notes)
        notes.update(kw)
        return replace(self, notes=notes)


# =============================================================================
# Ingestion
# =============================================================================
def _numeric(col: pd.Series) -> np.ndarray:
    return pd.to_numeric(col.where(~col.isin(MISSING_TOKENS)), errors="coerce").to_numpy(dtype=float)


def _encode_demographic(name: str, raw: pd.Series) -> dict:
    """Numeric columns pass through (median-filled); categoricals are one-hot, first level dropped."""
    missing = raw.isin(MISSING_TOKENS)
    num = pd.to_numeric(raw.where(~missing), errors="coerce")
    if num[~missing].notna().all() and (~missing).any():
        vals = num.to_numpy(dtype=float)
        return {name: np.where(np.isnan(vals), np.nanmedian(vals), vals)}
    cats = raw.where(~missing, "missing").astype(str)
    levels = sorted(cats.unique())
    return {f"{name}={lv}": (cats == lv).to_numpy(dtype=float) for lv in levels[1:]}


def load_table(path, roles: ColumnRoles, delimiter: str = ",") -> Dataset:
    """Read a delimited file with a header row into a ``Dataset``.

    Unparseable numeric cells become missing. Rows with a missing target are
    dropped and counted in ``notes['n_target_missing_dropped']``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    df = pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False, encoding="utf-8")
    absent = [c for c in roles.named_columns() if c not in df.columns]
    if absent:
        raise ConfigError(f"columns named in role config are absent from the header: {absent}")

    target = _numeric(df[roles.target])
    keep = ~np.isnan(target)
    if not keep.any():
        raise DataError(f"target column {roles.target!r} is entirely missing")
    n_dropped = int((~keep).sum())
    df = df.loc[keep].reset_index(drop=True)
    target = target[keep]
    if roles.task_type == "classification":
        levels = np.unique(target)
        if levels.size != 2:
            raise DataError(f"classification target has {levels.size} distinct values, expected 2")
        target = (target == levels[1]).astype(float)

    pid = df[roles.id].to_numpy(dtype=str) if roles.id else np.arange(len(df)).astype(str)
    demographics = {}
    for c in roles.demographic:
        demographics.update(_encode_demographic(c, df[c]))
    subgroups = {c: df[c].to_numpy(dtype=str) for c in roles.subgroup}
    group = df[roles.group].to_numpy(dtype=str) if roles.group else None

    reserved = {roles.target, roles.id, roles.group, *roles.demographic, *roles.subgroup}
    if roles.feature:
        feat_cols = [c for c in df.columns if c in set(roles.feature) | set(roles.exclude)
                     | set(roles.composites)
                     | {x for comps in roles.composites.values() for x in comps}]
    else:
        feat_cols = [c for c in df.columns if c not in reserved]
    features = {}
    meta = {}
    for c in feat_cols:
        col = _numeric(df[c])
        features[c] = col
        frac = float(np.isnan(col).mean()) if col.size else 0.0
        if c in roles.exclude:
            kind, comps = "excluded", ()
        elif c in roles.composites:
            kind, comps = "composite", tuple(roles.composites[c])
        else:
            kind, comps = "raw", ()
        meta[c] = FeatureMeta(c, kind, comps, frac)
    return Dataset(features=features, target=target, task_type=roles.task_type,
                   participant_id=pid, meta=meta, target_name=roles.target,
                   demographics=demographics, subgroups=subgroups, group=group,
                   notes={"n_target_missing_dropped": n_dropped, "n_rows_loaded": n_dropped + len(df)})


# =============================================================================
# Missingness
# =============================================================================
def drop_high_missingness(ds: Dataset, threshold: float = 0.70) -> Dataset:
    """Drop features whose missing fraction strictly exceeds ``threshold``."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    dropped = [k for k in ds.features if ds.missing_fraction(k) > threshold]
    if not dropped:
        return ds
    feats = {k: v for k, v in ds.features.items() if k not in dropped}
    meta = {k: v for k, v in ds.meta.items() if k in feats}
    prior = tuple(ds.notes.get("dropped_missingness", ()))
    out = replace(ds, features=feats, meta=meta)
    return out.with_notes(dropped_missingness=prior + tuple(dropped))


def _impute_columns(ds: Dataset, columns):
    cols = ds.candidate_names() if columns is None else list(columns)
    return [c for c in cols if np.isnan(ds.features[c]).any()], cols


def _median_fill(col: np.ndarray, group, name: str) -> np.ndarray:
    obs = ~np.isnan(col)
    if not obs.any():
        raise DataError(f"column {name!r} is missing in every row; cannot impute")
    out = col.copy()
    global_med = np.median(col[obs])
    if group is None:
        out[~obs] = global_med
        return out
    for g in np.unique(group):
        rows = group == g
        gobs = rows & obs
        med = np.median(col[gobs]) if gobs.any() else global_med
        out[rows & ~obs] = med
    return out


def impute_median(ds: Dataset, columns=None) -> Dataset:
    """Per-group median fill (per ``ds.group`` when present, else global)."""
    todo, _ = _impute_columns(ds, columns)
    return ds.with_features({c: _median_fill(ds.features[c], ds.group, c) for c in todo})


def _knn_fill(M: np.ndarray, k: int) -> np.ndarray:
    n, p = M.shape
    obs = ~np.isnan(M)
    mu = np.nanmean(np.where(obs, M, np.nan), axis=0)
    sd = np.nanstd(np.where(obs, M, np.nan), axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = np.where(obs, (M - mu) / sd, 0.0)
    m = obs.astype(float)
    # squared distance over mutually observed columns, rescaled by p / #mutual
    sq = (Z ** 2) @ m.T
    d2 = sq + sq.T - 2.0 * Z @ Z.T
    cnt = m @ m.T
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.sqrt(np.clip(d2, 0, None) * p / cnt)
    dist[cnt == 0] = np.inf
    np.fill_diagonal(dist, np.inf)
    out = M.copy()
    for i, j in zip(*np.nonzero(~obs)):
        donors = np.flatnonzero(obs[:, j] & np.isfinite(dist[i]))
        if donors.size == 0:
            log.info("impute_knn: no donor for row %d column %d, using median", i, j)
            out[i, j] = np.median(M[obs[:, j], j])
            continue
        order = np.lexsort((donors, dist[i, donors]))
        out[i, j] = M[donors[order[:k]], j].mean()
    return out


def impute_knn(ds: Dataset, k: int = 5, columns=None) -> Dataset:
    """Fill each missing cell with the mean of its column over the k nearest donor rows.

    Distance is Euclidean on column-standardized values over the columns both
    rows observe. Ties in distance are broken by row index.
    """
    todo, cols = _impute_columns(ds, columns)
    if not todo:
        return ds
    M = np.column_stack([ds.features[c] for c in cols])
    for j, c in enumerate(cols):
        if np.isnan(M[:, j]).all():
            raise DataError(f"column {c!r} is missing in every row; cannot impute")
    filled = _knn_fill(M, k)
    return ds.with_features({c: filled[:, j] for j, c in enumerate(cols) if c in todo})


def impute_iterative(ds: Dataset, rounds: int = 10, tol: float = 1e-6, columns=None) -> Dataset:
    """Round-robin least-squares imputation started from median fill.

    Each incomplete column is regressed on all other columns (current values)
    and its imputed cells are overwritten with fitted values. Stops after
    ``rounds`` or when the largest cell change falls below ``tol``.
    """
    todo, cols = _impute_columns(ds, columns)
    if not todo:
        return ds
    if len(cols) < 2:
        raise ValueError("impute_iterative needs at least two columns")
    M = np.column_stack([ds.features[c] for c in cols])
    miss = np.isnan(M)
    X = np.column_stack([_median_fill(M[:, j], ds.group, c) for j, c in enumerate(cols)])
    n = X.shape[0]
    for _ in range(rounds):
        change = 0.0
        for j in range(len(cols)):
            if not miss[:, j].any():
                continue
            design = np.column_stack([np.ones(n), np.delete(X, j, axis=1)])
            obs = ~miss[:, j]
            D = design[obs]
            if np.linalg.matrix_rank(D) < D.shape[1]:
                log.info("impute_iterative: singular design for %s, ridge fallback", cols[j])
                beta = stats.ridge_fit(D, X[obs, j], 1e-6)
            else:
                beta = stats.ols_fit(D, X[obs, j])
            new = design[~obs] @ beta
            change = max(change, float(np.max(np.abs(new - X[~obs, j]))))
            X[~obs, j] = new
        if change < tol:
            break
    return ds.with_features({c: X[:, j] for j, c in enumerate(cols) if c in todo})


IMPUTERS = {"median": impute_median, "knn": impute_knn, "iterative": impute_iterative}


# =============================================================================
# Repeated measures
# =============================================================================
def dedup_one_per_participant(ds: Dataset, seed: int) -> Dataset:
    """Keep one seeded-random row per participant, in original row order."""
    _, code = np.unique(ds.participant_id, return_inverse=True)
    if code.size == np.unique(code).size:
        return ds
    u = stats.stream(seed, "dedup").random(ds.n_rows)
    order = np.lexsort((u, code))
    first = np.r_[True, code[order][1:] != code[order][:-1]]
    rows = np.sort(order[first])
    return ds.take(rows)
