"""Leakage guardrail: target/proxy exclusion, construct-overlap scanning,
participant-level discovery/confirmation split, stratified participant folds
and intra-cluster deduplication."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import stats, tabular
from .errors import DataError, UndefinedCorrelation

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LeakageConfig:
    target_name: str = "target"
    excluded_proxies: tuple = ()
    overlap_threshold: float = 0.85
    confirmation_fraction: float = 0.30
    min_confirmation_n: int = 20
    warn_band_low: float = 0.80

    def __post_init__(self):
        if not 0 < self.overlap_threshold <= 1:
            raise ValueError("overlap_threshold must be in (0, 1]")
        if self.min_confirmation_n < 2:
            raise ValueError("min_confirmation_n must be >= 2")
        if not 0 < self.confirmation_fraction < 1:
            raise ValueError("confirmation_fraction must be in (0, 1)")


@dataclass(frozen=True)
class FoldAssignment:
    fold_index: np.ndarray
    k: int
    seed: int


@dataclass(frozen=True)
class OverlapFlag:
    feature: str
    excluded: str
    rho: float


def exclude_target_and_proxies(ds: tabular.Dataset, cfg: LeakageConfig) -> tabular.Dataset:
    """Mark listed proxies as excluded; the target is held apart from features already."""
    meta = dict(ds.meta)
    for p in cfg.excluded_proxies:
        if p not in ds.features:
            log.warning("proxy %r not present in dataset; skipped", p)
            continue
        m = meta[p]
        meta[p] = tabular.FeatureMeta(p, "excluded", (), m.missing_fraction)
    return replace(ds, meta=meta)


def _excluded_vectors(ds: tabular.Dataset) -> dict:
    out = {ds.target_name: ds.target}
    for name in ds.excluded_names():
        out[name] = ds.features[name]
    return out


def _pairwise_rho(a: np.ndarray, b: np.ndarray) -> float:
    obs = ~(np.isnan(a) | np.isnan(b))
    try:
        return stats.spearman(a[obs], b[obs]).estimate
    except UndefinedCorrelation:
        return 0.0


def construct_overlap_scan(ds: tabular.Dataset, candidates, cfg: LeakageConfig):
    """Remove candidates with |Spearman| strictly above the threshold against any excluded variable.

    Returns (retained names, flags, near-threshold warnings).
    """
    excluded = _excluded_vectors(ds)
    retained, flagged, warnings = [], [], []
    for c in candidates:
        worst = None
        for name, vec in excluded.items():
            r = _pairwise_rho(ds.features[c], vec)
            if worst is None or abs(r) > abs(worst[1]):
                worst = (name, r)
        if worst is not None and abs(worst[1]) > cfg.overlap_threshold:
            flagged.append(OverlapFlag(c, worst[0], float(worst[1])))
            continue
        retained.append(c)
        if worst is not None and abs(worst[1]) >= cfg.warn_band_low:
            warnings.append(OverlapFlag(c, worst[0], float(worst[1])))
    return retained, flagged, warnings


def discovery_confirmation_split(ds: tabular.Dataset, cfg: LeakageConfig, seed: int):
    """Participant-level split; confirmation keeps one row per participant."""
    ids = np.unique(ds.participant_id)
    n_conf = math.ceil(cfg.confirmation_fraction * ids.size)
    if n_conf < cfg.min_confirmation_n:
        raise DataError(
            f"only {ids.size} participants: confirmation set would have {n_conf} < "
            f"{cfg.min_confirmation_n}; the replication check is inapplicable")
    rng = stats.stream(seed, "confirmation_split")
    conf_ids = rng.permutation(ids)[:n_conf]
    in_conf = np.isin(ds.participant_id, conf_ids)
    discovery = ds.take(np.flatnonzero(~in_conf))
    confirmation = tabular.dedup_one_per_participant(ds.take(np.flatnonzero(in_conf)), seed)
    return discovery, confirmation


def participant_strata(ds: tabular.Dataset):
    """(participant ids, stratum label per participant).

    Classification: the participant's majority class. Regression: quartile bin
    of the participant's mean target.
    """
    ids, code = np.unique(ds.participant_id, return_inverse=True)
    counts = np.bincount(code)
    means = np.bincount(code, weights=ds.target) / counts
    if ds.task_type == "classification":
        return ids, (means > 0.5).astype(int)
    edges = np.quantile(means, [0.25, 0.5, 0.75])
    return ids, np.searchsorted(edges, means, side="right")


def stratified_participant_kfold(ds: tabular.Dataset, k: int = 5, seed: int = 0) -> FoldAssignment:
    """Deal shuffled participants round-robin into k folds within each stratum.

    The dealing position carries over between strata so fold sizes differ by
    at most one participant. All rows of a participant share its fold.
    """
    ids, strata = participant_strata(ds)
    if ids.size < k:
        raise DataError(f"{ids.size} participants cannot fill {k} folds")
    rng = stats.stream(seed, "kfold")
    fold_of = np.empty(ids.size, dtype=int)
    pos = 0
    for s in np.unique(strata):
        members = np.flatnonzero(strata == s)
        if members.size < k:
            log.warning("stratum %s has %d participants (< k=%d); best-effort stratification",
                        s, members.size, k)
        members = rng.permutation(members)
        fold_of[members] = (pos + np.arange(members.size)) % k
        pos = (pos + members.size) % k
    _, code = np.unique(ds.participant_id, return_inverse=True)
    return FoldAssignment(fold_of[code], k, seed)


def intra_cluster_dedup(candidates, threshold: float = 0.85):
    """Greedy clustering in descending |effect| (ties by name).

    ``candidates`` is an iterable of (name, effect, values). Returns
    (representative names, {name: representative}).
    """
    items = sorted(candidates, key=lambda c: (-abs(c[1]), c[0]))
    reps = []
    cluster = {}
    for name, _, values in items:
        home = None
        for rep_name, rep_values in reps:
            if abs(_pairwise_rho(np.asarray(values, float), np.asarray(rep_values, float))) > threshold:
                home = rep_name
                break
        if home is None:
            reps.append((name, values))
            cluster[name] = name
        else:
            cluster[name] = home
    return [r for r, _ in reps], cluster
