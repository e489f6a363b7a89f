"""
Held-out robustness experiment for the confounder and subgroup checks.

For each seed the cohort is split 70/30 by participant (stratified by outcome
quartile). The two checks prune features on the training part only; a random
pruning control keeps the same number of features. Four metrics are then
computed on the test part for the checked, random-pruned and unpruned
(baseline) sets.

The test-side confounder-survival metric uses the same partial Spearman
procedure as the training-side check, so an improvement on it is partly
expected by construction; replication rate and subgroup consistency are the
less circular evidence.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import stats, tabular
from .errors import DataError
from .screening import bh_fdr, spearman_many

METRICS = ("confounder_survival", "subgroup_consistency", "replication_rate", "holdout_r2")
CONDITIONS = ("checked", "random_pruned", "baseline")
TRAIN_FRACTION = 0.70
RIDGE_PENALTY = 1.0
ALPHA = 0.05


@dataclass
class RobustnessReport:
    """Per-seed metric values, deltas against baseline and their tests.

    ``values[condition][metric]`` and ``deltas[condition][metric]`` are arrays
    over seeds; ``seed_ci[condition][metric]`` is an (n_seeds, 2) array of
    test-set bootstrap intervals; ``delta_ci`` is a bootstrap interval for the
    mean delta over seeds.
    """

    dataset: str
    seeds: tuple
    n_features: int
    n_kept: np.ndarray
    values: dict
    seed_ci: dict
    deltas: dict
    delta_ci: dict
    p_values: dict
    q_values: dict
    family_size: int
    notes: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, np.ndarray):
                return clean(v.tolist())
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v

        return clean({
            "dataset": self.dataset, "seeds": list(self.seeds), "n_features": self.n_features,
            "n_kept": self.n_kept, "values": self.values, "seed_ci": self.seed_ci,
            "deltas": self.deltas, "delta_ci": self.delta_ci, "p_values": self.p_values,
            "q_values": self.q_values, "family_size": self.family_size, "notes": list(self.notes),
        })


# -----------------------------------------------------------------------------
# Vectorized kernels
# -----------------------------------------------------------------------------
def partial_spearman_many(X: np.ndarray, y: np.ndarray, Z: np.ndarray):
    """Partial Spearman (rho, p) of every column of X with y given Z (no NaNs)."""
    n = y.size
    D = np.column_stack([np.ones(n), Z])
    D = D[:, stats._independent_columns(D)]
    k = D.shape[1] - 1
    Q, _ = np.linalg.qr(D)
    R = sps.rankdata(np.column_stack([y, X]), axis=0)
    E = R - Q @ (Q.T @ R)
    ey, EX = E[:, 0], E[:, 1:]
    den = np.sqrt((EX ** 2).sum(axis=0) * (ey @ ey))
    df = n - 2 - k
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.clip((ey @ EX) / den, -1.0, 1.0)
        t = rho * np.sqrt(df / np.clip(1.0 - rho ** 2, 1e-300, None))
        p = np.where(np.abs(rho) >= 1.0, 0.0, 2.0 * sps.t.sf(np.abs(t), df))
    rho = np.where(np.isfinite(rho), rho, 0.0)
    p = np.where(np.isfinite(p), p, 1.0)
    return rho, p


def _subgroup_signs(X, y, labels, levels):
    a = labels == levels[0]
    ra, _ = spearman_many(X[a], y[a])
    rb, _ = spearman_many(X[~a], y[~a])
    return np.nan_to_num(np.sign(ra)), np.nan_to_num(np.sign(rb))


def _feature_metrics(X, y, Z, labels, levels):
    """Per-feature indicators on one sample: (partial p<alpha, same sign, p<alpha)."""
    _, pp = partial_spearman_many(X, y, Z)
    sa, sb = _subgroup_signs(X, y, labels, levels)
    _, p = spearman_many(X, y)
    return pp < ALPHA, (sa * sb) > 0, np.nan_to_num(p, nan=1.0) < ALPHA


def _fraction(mask, cols):
    return float(mask[cols].mean()) if len(cols) else 0.0


def _holdout_predictions(Xtr, ytr, Xte, cols):
    """Ridge (penalty 1) fit on train-standardized columns; empty sets predict the train mean."""
    if not len(cols):
        return np.full(Xte.shape[0], ytr.mean())
    Ztr, Zte = stats._standardize(Xtr[:, cols], Xte[:, cols])
    beta = stats.ridge_fit(stats._design(Ztr), ytr, RIDGE_PENALTY)
    return stats._design(Zte) @ beta


# -----------------------------------------------------------------------------
# Splitting
# -----------------------------------------------------------------------------
def holdout_split(ds: tabular.Dataset, seed: int, fraction: float = TRAIN_FRACTION):
    """Participant-level train/test row masks stratified by outcome quartile."""
    ids, code = np.unique(ds.participant_id, return_inverse=True)
    means = np.bincount(code, weights=ds.target) / np.bincount(code)
    edges = np.unique(np.quantile(means, [0.25, 0.5, 0.75]))
    strata = np.searchsorted(edges, means, side="right")
    if np.unique(strata).size < 2:
        raise DataError("outcome has fewer than 2 quartile strata; cannot stratify the split")
    rng = stats.stream(seed, "harness_split")
    train_p = np.zeros(ids.size, dtype=bool)
    for s in np.unique(strata):
        members = rng.permutation(np.flatnonzero(strata == s))
        train_p[members[:int(round(fraction * members.size))]] = True
    return train_p[code], ~train_p[code]


# -----------------------------------------------------------------------------
# One seed
# -----------------------------------------------------------------------------
def _run_seed(X, y, Z, labels, levels, pid_ds, seed, n_boot):
    tr, te = holdout_split(pid_ds, seed)
    Xtr, ytr, Ztr, ltr = X[tr], y[tr], Z[tr], labels[tr]
    Xte, yte, Zte, lte = X[te], y[te], Z[te], labels[te]
    p = X.shape[1]

    conf_ok, _, _ = _feature_metrics(Xtr, ytr, Ztr, ltr, levels)
    sa, sb = _subgroup_signs(Xtr, ytr, ltr, levels)
    keep = conf_ok & ~((sa * sb) < 0)
    checked = np.flatnonzero(keep)
    rng = stats.stream(seed + 1000, "random_prune")
    random_cols = np.sort(rng.choice(p, size=checked.size, replace=False))
    sets = {"checked": checked, "random_pruned": random_cols, "baseline": np.arange(p)}

    preds = {c: _holdout_predictions(Xtr, ytr, Xte, cols) for c, cols in sets.items()}

    def metrics_on(rows):
        ind = _feature_metrics(Xte[rows], yte[rows], Zte[rows], lte[rows], levels)
        out = {}
        for c, cols in sets.items():
            out[c] = [_fraction(m, cols) for m in ind] + [stats.r_squared(yte[rows], preds[c][rows])]
        return out

    point = metrics_on(np.arange(yte.size))
    boot_rng = stats.stream(seed, "harness_bootstrap")
    draws = {c: [] for c in sets}
    done = 0
    while done < n_boot:
        rows = boot_rng.integers(0, yte.size, yte.size)
        if np.unique(lte[rows]).size < 2 or np.ptp(yte[rows]) == 0:
            continue
        for c, v in metrics_on(rows).items():
            draws[c].append(v)
        done += 1
    ci = {c: np.quantile(np.asarray(draws[c]), [0.025, 0.975], axis=0).T for c in sets}
    # participant disjointness is a hard invariant of the split
    assert not set(pid_ds.participant_id[tr]) & set(pid_ds.participant_id[te])
    return point, ci, checked.size


# -----------------------------------------------------------------------------
# Driver
# -----------------------------------------------------------------------------
def _paired_p(cond: np.ndarray, base: np.ndarray) -> float:
    d = cond - base
    if np.allclose(d, d[0]):
        return 1.0 if d[0] == 0 else 0.0
    return float(sps.ttest_rel(cond, base).pvalue)


def _mean_ci(d: np.ndarray, seed: int, key, n_boot: int):
    rng = stats.stream(seed, "harness_delta_ci", *key)
    idx = rng.integers(0, d.size, (n_boot, d.size))
    lo, hi = np.quantile(d[idx].mean(axis=1), [0.025, 0.975])
    return [float(lo), float(hi)]


def robustness_harness(ds: tabular.Dataset, demographics=None, subgroup: str = "sex",
                       n_seeds: int = 10, seed: int = 0, n_boot: int = 100, threads: int = 1,
                       name: str = "dataset", family_datasets: int = 1) -> RobustnessReport:
    """Run the held-out robustness experiment on ``ds``.

    Parameters
    ----------
    ds : Dataset
        Cohort; missing feature values are median-filled beforehand.
    demographics : list of str, optional
        Demographic matrix columns to control for (default: all).
    subgroup : str
        Name of a binary subgroup column.
    n_seeds : int
        Number of split seeds; seed ``i`` uses ``seed + i``.
    family_datasets : int
        Number of datasets in the multiple-testing family. Use
        :func:`adjust_family` to correct jointly across several reports.
    """
    if subgroup not in ds.subgroups:
        raise DataError(f"subgroup column {subgroup!r} not present")
    labels = np.asarray(ds.subgroups[subgroup]).astype(str)
    levels = np.unique(labels)
    if levels.size != 2:
        raise DataError(f"subgroup column {subgroup!r} must be binary, found {levels.size} levels")
    names = ds.candidate_names()
    if any(np.isnan(ds.features[c]).any() for c in names):
        ds = tabular.impute_median(ds, names)
    X = np.column_stack([ds.features[c] for c in names]) if names else np.empty((ds.n_rows, 0))
    demo = list(ds.demographics) if demographics is None else list(demographics)
    Z = np.column_stack([ds.demographics[d] for d in demo]) if demo else np.empty((ds.n_rows, 0))
    y = np.asarray(ds.target, dtype=float)

    seeds = tuple(seed + i for i in range(n_seeds))
    work = lambda s: _run_seed(X, y, Z, labels, levels, ds, s, n_boot)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, seeds))
    else:
        results = [work(s) for s in seeds]

    values = {c: {m: np.array([r[0][c][i] for r in results]) for i, m in enumerate(METRICS)}
              for c in CONDITIONS}
    seed_ci = {c: {m: np.array([r[1][c][i] for r in results]) for i, m in enumerate(METRICS)}
               for c in CONDITIONS}
    deltas, delta_ci, p_values = {}, {}, {}
    for c in ("checked", "random_pruned"):
        deltas[c], delta_ci[c], p_values[c] = {}, {}, {}
        for m in METRICS:
            d = values[c][m] - values["baseline"][m]
            deltas[c][m] = d
            delta_ci[c][m] = _mean_ci(d, seed, (c, m), n_boot)
            p_values[c][m] = _paired_p(values[c][m], values["baseline"][m])
    report = RobustnessReport(
        dataset=name, seeds=seeds, n_features=len(names),
        n_kept=np.array([r[2] for r in results]), values=values, seed_ci=seed_ci,
        deltas=deltas, delta_ci=delta_ci, p_values=p_values, q_values={},
        family_size=len(METRICS) * 2 * family_datasets,
        notes=("confounder_survival shares its partial Spearman procedure with the training-side "
               "confounder check, so its improvement is partly definitional",))
    if family_datasets == 1:
        adjust_family([report])
    return report


def adjust_family(reports) -> None:
    """Benjamini-Hochberg across every (dataset, condition, metric) test, in place."""
    keys = [(i, c, m) for i, r in enumerate(reports) for c in ("checked", "random_pruned")
            for m in METRICS]
    p = np.array([reports[i].p_values[c][m] for i, c, m in keys])
    q, _ = bh_fdr(p, ALPHA)
    for r in reports:
        r.q_values = {c: {} for c in ("checked", "random_pruned")}
        r.family_size = len(keys)
        r.notes = tuple(n for n in r.notes if not n.startswith("family")) + (
            f"family of {len(keys)} tests: {len(METRICS)} metrics x 2 conditions x "
            f"{len(reports)} dataset(s)",)
    for (i, c, m), qv in zip(keys, q):
        reports[i].q_values[c][m] = float(qv)
