"""Round-based univariate screening with Benjamini-Hochberg control, plus
threshold and imputation sensitivity analyses."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats as sps

from . import stats, tabular
from .errors import LeakageError

CONSTANT_VARIANCE = 1e-12


@dataclass(frozen=True)
class ScreeningConfig:
    p_threshold: float = 0.05
    effect_threshold: float = 0.20
    fdr_alpha: float = 0.05
    round_id: int = 1

    def __post_init__(self):
        if not 0 < self.p_threshold < 1 or not 0 < self.fdr_alpha < 1:
            raise ValueError("p_threshold and fdr_alpha must lie in (0, 1)")
        if not 0 <= self.effect_threshold < 1:
            raise ValueError("effect_threshold must lie in [0, 1)")


LENIENT = ScreeningConfig(p_threshold=0.10, effect_threshold=0.10, fdr_alpha=0.10)


@dataclass(frozen=True)
class ScreenedCandidate:
    feature: str
    rho: float
    raw_p: float
    adjusted_p: float
    survived: bool
    round_id: int
    reason: str = ""
    n: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def bh_fdr(p_values, alpha: float = 0.05):
    """Benjamini-Hochberg step-up adjustment.

    Returns (adjusted p-values in input order, boolean rejection mask).
    """
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        return p.copy(), np.zeros(0, dtype=bool)
    if ((p < 0) | (p > 1) | np.isnan(p)).any():
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="mergesort")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    adj = np.empty(m)
    adj[order] = adj_sorted
    return adj, adj <= alpha


def spearman_many(X: np.ndarray, y: np.ndarray):
    """Spearman rho and t-approximation p for each column of X against y (no NaNs)."""
    n = y.size
    rx = sps.rankdata(X, axis=0)
    ry = stats.rank_with_ties(y)
    rx = rx - rx.mean(axis=0)
    ry = ry - ry.mean()
    den = np.sqrt((rx ** 2).sum(axis=0) * (ry @ ry))
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.clip((ry @ rx) / den, -1.0, 1.0)
        t = rho * np.sqrt((n - 2) / np.clip(1.0 - rho ** 2, 1e-300, None))
    p = np.where(np.abs(rho) >= 1.0, 0.0, np.minimum(1.0, 2.0 * sps.t.sf(np.abs(t), n - 2)))
    return rho, p


def _check_candidates(ds: tabular.Dataset, candidates):
    for c in candidates:
        if c not in ds.features:
            raise KeyError(f"candidate {c!r} not in dataset")
        if ds.meta[c].kind == "excluded":
            raise LeakageError(f"candidate {c!r} is an excluded column")


def screen_round(ds: tabular.Dataset, candidates, cfg: ScreeningConfig = ScreeningConfig()):
    """Spearman screen of ``candidates`` against the target with per-round BH.

    The BH family is exactly the testable candidates of this call. Constant
    features fail with reason ``constant`` and stay out of the family.
    """
    candidates = list(candidates)
    _check_candidates(ds, candidates)
    y = ds.target
    rows = {}
    tested = []
    complete = [c for c in candidates if not np.isnan(ds.features[c]).any()]
    ok = [c for c in complete if np.var(ds.features[c]) >= CONSTANT_VARIANCE]
    if ok and np.var(y) >= CONSTANT_VARIANCE:
        rho, p = spearman_many(np.column_stack([ds.features[c] for c in ok]), y)
        for c, r, pv in zip(ok, rho, p):
            rows[c] = (float(r), float(pv), y.size)
            tested.append(c)
    for c in candidates:
        if c in rows:
            continue
        col = ds.features[c]
        obs = ~np.isnan(col)
        if obs.sum() < 3 or np.var(col[obs]) < CONSTANT_VARIANCE or np.var(y[obs]) < CONSTANT_VARIANCE:
            continue
        res = stats.spearman(col[obs], y[obs])
        rows[c] = (res.estimate, res.p_value, res.n)
        tested.append(c)
    tested.sort(key=candidates.index)
    adj, rej = bh_fdr([rows[c][1] for c in tested], cfg.fdr_alpha)
    adj_map = dict(zip(tested, adj))
    out = []
    for c in candidates:
        if c not in rows:
            out.append(ScreenedCandidate(c, float("nan"), float("nan"), float("nan"),
                                         False, cfg.round_id, "constant", 0))
            continue
        r, p, n = rows[c]
        a = float(adj_map[c])
        reasons = []
        if a > cfg.fdr_alpha:
            reasons.append("fdr")
        if not p < cfg.p_threshold:
            reasons.append("raw_p")
        if abs(r) < cfg.effect_threshold:
            reasons.append("effect")
        out.append(ScreenedCandidate(c, r, p, a, not reasons, cfg.round_id, ",".join(reasons), n))
    return out


def survivors(screened) -> list:
    return [s.feature for s in screened if s.survived]


def threshold_sensitivity(ds: tabular.Dataset, candidates,
                          default: ScreeningConfig = ScreeningConfig(),
                          lenient: ScreeningConfig = LENIENT) -> dict:
    a = set(survivors(screen_round(ds, candidates, default)))
    b = set(survivors(screen_round(ds, candidates, lenient)))
    return {"both": sorted(a & b), "default_only": sorted(a - b), "lenient_only": sorted(b - a),
            "identical": a == b}


def imputation_sensitivity(ds: tabular.Dataset, candidates, bound: float = 0.01,
                           strategies=("median", "knn", "iterative")) -> list:
    """Max pairwise |delta rho| across imputation strategies, most unstable first.

    ``ds`` must still carry its missing cells. Each strategy imputes only the
    candidate columns.
    """
    candidates = list(candidates)
    if not candidates:
        return []
    _check_candidates(ds, candidates)
    rhos = {}
    for s in strategies:
        imp = tabular.IMPUTERS[s]
        if s == "iterative" and len(candidates) < 2:
            filled = tabular.impute_median(ds, columns=candidates)
        else:
            filled = imp(ds, columns=candidates)
        rhos[s] = {}
        for c in candidates:
            try:
                rhos[s][c] = stats.spearman(filled.features[c], ds.target).estimate
            except Exception:
                rhos[s][c] = float("nan")
    out = []
    for c in candidates:
        vals = [rhos[s][c] for s in strategies]
        delta = max((abs(a - b) for a, b in itertools.combinations(vals, 2)), default=0.0)
        out.append({"feature": c, "max_delta_rho": float(delta), "unstable": bool(delta > bound),
                    **{f"rho_{s}": float(rhos[s][c]) for s in strategies}})
    out.sort(key=lambda r: (-r["max_delta_rho"], r["feature"]))
    return out
