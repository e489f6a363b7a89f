"""
Validation battery
==================

Eleven checks across replication, stability, robustness and discriminative
power, followed by verdict assignment:

==  ========================  =========
id  check                     role
==  ========================  =========
1   replication               core
2   permutation               core
3   bootstrap                 core
4   leave-one-out influence
5   subgroup consistency
6   method triangulation
7   construct validity        hard gate
8   causal robustness
9   construct independence    hard gate
10  CI consistency            core, hard gate
11  discriminative power
==  ========================  =========

Check 1 runs on the held-out confirmation set; checks 2-11 run on the full
analysis dataset. Every sign-dependent check compares against the sign of the
discovery-split estimate. Randomness is keyed by (seed, candidate, check id).
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import stats, tabular
from .errors import UndefinedCorrelation

log = logging.getLogger(__name__)

CHECK_NAMES = {
    1: "replication", 2: "permutation", 3: "bootstrap", 4: "loo_influence",
    5: "subgroup_consistency", 6: "triangulation", 7: "construct_validity",
    8: "causal_robustness", 9: "construct_independence", 10: "ci_consistency",
    11: "discriminative_power",
}
CORE = (1, 2, 3, 10)
HARD_GATES = (7, 9, 10)
VALIDATED, CONDITIONAL, REJECTED = "VALIDATED", "CONDITIONAL", "REJECTED"
_ORDER = {REJECTED: 0, CONDITIONAL: 1, VALIDATED: 2}


@dataclass(frozen=True)
class BatteryConfig:
    seed: int = 0
    n_resamples: int = 1000
    alpha: float = 0.05
    construct_threshold: float = 0.85
    small_n_construct_threshold: float = 0.90
    small_n: int = 30
    proxy_threshold: float = 0.85
    compositional_margin: float = 0.05
    auc_threshold: float = 0.55
    marginal_effect_bound: float = 0.10
    min_confirmation_n: int = 20
    loo_exact_max: int = 5000
    loo_subset: int = 200
    subgroup_column: str | None = None


@dataclass(frozen=True)
class CandidateBiomarker:
    name: str
    task_type: str
    discovery_rho: float
    components: tuple = ()
    values: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def sign(self) -> int:
        return int(np.sign(self.discovery_rho))


@dataclass(frozen=True)
class CheckResult:
    check_id: int
    applicable: bool
    passed: bool | None
    statistic: float = float("nan")
    detail: str = ""
    label: str = ""

    @property
    def name(self) -> str:
        return CHECK_NAMES[self.check_id]

    def to_dict(self) -> dict:
        return {"check_id": self.check_id, "name": self.name, "applicable": self.applicable,
                "passed": self.passed, "statistic": self.statistic, "detail": self.detail,
                "label": self.label}


@dataclass(frozen=True)
class Verdict:
    status: str
    pass_count: int
    applicable_count: int
    hard_gate_failures: tuple = ()
    core_failures: tuple = ()
    reason: str = ""

    def to_dict(self) -> dict:
        return {"status": self.status, "pass_count": self.pass_count,
                "applicable_count": self.applicable_count,
                "hard_gate_failures": list(self.hard_gate_failures),
                "core_failures": list(self.core_failures), "reason": self.reason}


@dataclass(frozen=True)
class BatteryRecord:
    candidate: CandidateBiomarker
    results: tuple
    verdict: Verdict
    bootstrap: stats.ResampleSummary | None = None
    order: int = 0

    @property
    def disclosure(self) -> bool:
        return self.results[8].label == "compositional"

    def to_dict(self) -> dict:
        b = self.bootstrap
        return {"name": self.candidate.name, "discovery_rho": self.candidate.discovery_rho,
                "components": list(self.candidate.components), "order": self.order,
                "ci_low": b.ci_low if b else None, "ci_high": b.ci_high if b else None,
                "disclosure": self.disclosure, "verdict": self.verdict.to_dict(),
                "checks": [r.to_dict() for r in self.results]}


def _na(check_id, detail) -> CheckResult:
    return CheckResult(check_id, False, None, float("nan"), detail)


def _fail(check_id, detail, statistic=float("nan")) -> CheckResult:
    return CheckResult(check_id, True, False, statistic, detail)


def _xy(ds: tabular.Dataset, name: str):
    x = ds.features[name]
    keep = ~np.isnan(x)
    return x[keep], ds.target[keep], keep


def _sign_ok(estimate: float, sign: int) -> bool:
    return sign != 0 and int(np.sign(estimate)) == sign


# =============================================================================
# Checks
# =============================================================================
def check_replication(c: CandidateBiomarker, confirmation: tabular.Dataset,
                      cfg: BatteryConfig = BatteryConfig()) -> CheckResult:
    if confirmation is None or confirmation.n_rows < cfg.min_confirmation_n:
        n = 0 if confirmation is None else confirmation.n_rows
        return _na(1, f"confirmation N={n} < {cfg.min_confirmation_n}")
    x, y, _ = _xy(confirmation, c.name)
    try:
        r = stats.spearman(x, y)
    except UndefinedCorrelation as e:
        return _fail(1, f"confirmation: {e}")
    ok = r.p_value < cfg.alpha and _sign_ok(r.estimate, c.sign)
    return CheckResult(1, True, ok, r.estimate,
                       f"rho={r.estimate:.4f} p={r.p_value:.3g} n={r.n}")


def check_permutation(c, ds, cfg: BatteryConfig = BatteryConfig()) -> CheckResult:
    x, y, _ = _xy(ds, c.name)
    p = stats.permutation_pvalue(x, y, "spearman", cfg.n_resamples, cfg.seed, key=(c.name, 2))
    return CheckResult(2, True, p < cfg.alpha, p, f"permutation p={p:.4g} B={cfg.n_resamples}")


def bootstrap_summary(c, ds, cfg: BatteryConfig = BatteryConfig()) -> stats.ResampleSummary:
    x, y, _ = _xy(ds, c.name)
    return stats.bootstrap_ci(x, y, "spearman", cfg.n_resamples, cfg.seed, key=(c.name, 3))


def check_bootstrap(c, ds, cfg: BatteryConfig = BatteryConfig(), summary=None) -> CheckResult:
    s = summary if summary is not None else bootstrap_summary(c, ds, cfg)
    ok = (s.ci_low > 0 and s.ci_high > 0) or (s.ci_low < 0 and s.ci_high < 0)
    return CheckResult(3, True, ok, s.point_estimate,
                       f"95% CI [{s.ci_low:.4f}, {s.ci_high:.4f}]")


def _loo_targets(pid: np.ndarray, x: np.ndarray, y: np.ndarray, rho: float, cfg: BatteryConfig):
    ids, code = np.unique(pid, return_inverse=True)
    if ids.size <= cfg.loo_exact_max:
        return ids, code, "exact"
    # rank-residual leverage: how far each row sits from the fitted rank line
    rx = stats.rank_with_ties(x)
    ry = stats.rank_with_ties(y)
    zx = (rx - rx.mean()) / rx.std()
    zy = (ry - ry.mean()) / ry.std()
    lev = np.bincount(code, weights=np.abs(zy - rho * zx) * np.abs(zx))
    top = np.argsort(-lev, kind="mergesort")[:cfg.loo_subset]
    rest = np.setdiff1d(np.arange(ids.size), top)
    rng = stats.stream(cfg.seed, "loo_subset", pid.size)
    extra = rng.choice(rest, size=min(cfg.loo_subset, rest.size), replace=False)
    chosen = np.sort(np.concatenate([top, extra]))
    return ids[chosen], code, f"subset: {cfg.loo_subset} highest-leverage + {extra.size} random"


def check_loo_influence(c, ds, cfg: BatteryConfig = BatteryConfig()) -> CheckResult:
    """Participant-level leave-one-out; any sign flip fails. Statistic is min |rho|."""
    x, y, keep = _xy(ds, c.name)
    pid = ds.participant_id[keep]
    try:
        full = stats.spearman(x, y).estimate
    except UndefinedCorrelation as e:
        return _fail(4, str(e))
    sign = int(np.sign(full))
    if sign == 0:
        return _fail(4, "full-sample rho is exactly zero", 0.0)
    targets, code, mode = _loo_targets(pid, x, y, full, cfg)
    ids = np.unique(pid)
    lookup = np.searchsorted(ids, targets)
    smallest = abs(full)
    for t, tid in zip(lookup, targets):
        mask = code != t
        try:
            r = stats.spearman(x[mask], y[mask]).estimate
        except UndefinedCorrelation:
            return _fail(4, f"degenerate (constant) after removing participant {tid}", 0.0)
        if int(np.sign(r)) != sign:
            return _fail(4, f"sign flips when participant {tid} is removed ({mode})", abs(r))
        smallest = min(smallest, abs(r))
    return CheckResult(4, True, True, smallest, f"no sign flip over {len(targets)} exclusions ({mode})")


def check_subgroup_consistency(c, ds, cfg: BatteryConfig = BatteryConfig()) -> CheckResult:
    """Same-sign association within each half of the cohort.

    Regression: halves split at the target median. Classification: the target
    is constant within a class, so halves come from ``cfg.subgroup_column``.
    """
    x, y, keep = _xy(ds, c.name)
    if ds.task_type == "regression":
        med = np.median(y)
        parts = {"below_median": y <= med, "above_median": y > med}
    else:
        col = cfg.subgroup_column
        if col is None or col not in ds.subgroups:
            return _na(5, "classification task without a subgroup column")
        g = ds.subgroups[col][keep]
        parts = {f"{col}={lv}": g == lv for lv in np.unique(g)}
    estimates = {}
    for label, m in parts.items():
        if m.sum() < 3 or np.ptp(y[m]) == 0:
            return _na(5, f"half {label} too small or target constant")
        try:
            estimates[label] = stats.spearman(x[m], y[m]).estimate
        except UndefinedCorrelation:
            return _fail(5, f"feature constant within {label}")
    ok = all(_sign_ok(r, c.sign) for r in estimates.values())
    stat = min(c.sign * r for r in estimates.values()) if c.sign else 0.0
    detail = " ".join(f"{k}:{v:.4f}" for k, v in estimates.items())
    return CheckResult(5, True, ok, stat, detail)


def check_triangulation(c, ds, cfg: BatteryConfig = BatteryConfig()) -> CheckResult:
    x, y, _ = _xy(ds, c.name)
    try:
        pr = stats.pearson(x, y)
        kt = stats.kendall_tau_b(x, y)
    except UndefinedCorrelation as e:
        return _fail(6, str(e))
    ok = all(r.p_value < cfg.alpha and _sign_ok(r.estimate, c.sign) for r in (pr, kt))
    return CheckResult(6, True, ok, max(pr.p_value, kt.p_value),
                       f"pearson r={pr.estimate:.4f} p={pr.p_value:.3g}; "
                       f"kendall tau_b={kt.estimate:.4f} p={kt.p_value:.3g}")


def construct_threshold(n: int, cfg: BatteryConfig = BatteryConfig()) -> float:
    return cfg.construct_threshold if n > cfg.small_n else cfg.small_n_construct_threshold


def check_construct_validity(c, ds, cfg: BatteryConfig = BatteryConfig()) -> CheckResult:
    x, y, _ = _xy(ds, c.name)
    r = stats.spearman(x, y).estimate
    thr = construct_threshold(x.size, cfg)
    return CheckResult(7, True, abs(r) <= thr, abs(r), f"|rho|={abs(r):.4f} threshold={thr}")


def check_causal_robustness(c, ds, confounders=None, prior_validated=(),
                            cfg: BatteryConfig = BatteryConfig()) -> CheckResult:
    """Partial Spearman on demographics plus previously validated candidates."""
    x, y, keep = _xy(ds, c.name)
    blocks = []
    if confounders is not None and np.asarray(confounders).size:
        z = np.asarray(confounders, dtype=float)
        blocks.append(z[:, None] if z.ndim == 1 else z)
    names = []
    for name, vals in prior_validated:
        blocks.append(np.asarray(vals, dtype=float)[:, None])
        names.append(name)
    if not blocks:
        return _na(8, "no confounders or prior validated candidates")
    Z = np.column_stack(blocks)[keep]
    rows = ~np.isnan(Z).any(axis=1)
    try:
        r = stats.partial_spearman(x[rows], y[rows], Z[rows])
    except UndefinedCorrelation as e:
        return _fail(8, str(e))
    ok = r.p_value < cfg.alpha and _sign_ok(r.estimate, c.sign)
    ctrl = f"{Z.shape[1]} controls" + (f" incl. prior {names}" if names else "")
    return CheckResult(8, True, ok, r.estimate, f"partial rho={r.estimate:.4f} p={r.p_value:.3g} ({ctrl})")


def check_construct_independence(c, ds, cfg: BatteryConfig = BatteryConfig()) -> CheckResult:
    """Classify as proxy, compositional or independent; only proxy fails."""
    x, y, _ = _xy(ds, c.name)
    rc = abs(stats.spearman(x, y).estimate)
    comp_rho = {}
    for comp in c.components:
        if comp not in ds.features:
            continue
        cx, cy, _ = _xy(ds, comp)
        try:
            comp_rho[comp] = abs(stats.spearman(cx, cy).estimate)
        except UndefinedCorrelation:
            comp_rho[comp] = 0.0
    detail = f"|rho|={rc:.4f}" + "".join(f" {k}:{v:.4f}" for k, v in comp_rho.items())
    if rc > cfg.proxy_threshold:
        return CheckResult(9, True, False, rc, detail + " (candidate exceeds overlap rule)", "proxy")
    if comp_rho and max(comp_rho.values()) > cfg.proxy_threshold:
        return CheckResult(9, True, False, max(comp_rho.values()),
                           detail + " (component exceeds overlap rule)", "proxy")
    if c.components and comp_rho and max(comp_rho.values()) >= rc - cfg.compositional_margin:
        return CheckResult(9, True, True, max(comp_rho.values()),
                           detail + " (disclosure required)", "compositional")
    return CheckResult(9, True, True, rc, detail, "independent")


def check_ci_consistency(c, summary: stats.ResampleSummary) -> CheckResult:
    mid = (summary.ci_low + summary.ci_high) / 2
    point = summary.point_estimate
    ok = point != 0 and mid != 0 and np.sign(point) == np.sign(mid)
    return CheckResult(10, True, bool(ok), mid, f"point={point:.4f} midpoint={mid:.4f}")


def check_discriminative_power(c, ds, cfg: BatteryConfig = BatteryConfig()) -> CheckResult:
    x, y, _ = _xy(ds, c.name)
    labels = y if ds.task_type == "classification" else (y > np.median(y)).astype(float)
    if np.unique(labels).size < 2:
        return _na(11, "binarized target has a single class")
    a = stats.auc(x, labels)
    a = max(a, 1 - a)
    return CheckResult(11, True, a >= cfg.auc_threshold, a, f"oriented AUC={a:.4f}")


# =============================================================================
# Verdict
# =============================================================================
def status_for_rate(rate, core_ok: bool, rho: float, marginal_effect_bound: float = 0.10) -> str:
    """Rubric applied after the hard-gate and checks-1-3 rejections."""
    rate = Fraction(rate).limit_denominator(10_000)
    if rate >= Fraction(7, 10) and core_ok:
        return CONDITIONAL if abs(rho) < marginal_effect_bound else VALIDATED
    if rate >= Fraction(4, 10):
        return CONDITIONAL
    return REJECTED


def assign_verdict(results, rho: float, marginal_effect_bound: float = 0.10) -> Verdict:
    by_id = {r.check_id: r for r in results}
    if sorted(by_id) != list(range(1, 12)):
        raise ValueError("assign_verdict needs exactly checks 1..11")
    applicable = [r for r in by_id.values() if r.applicable]
    passed = sum(1 for r in applicable if r.passed)
    hard = tuple(i for i in HARD_GATES if by_id[i].applicable and not by_id[i].passed)
    core = tuple(i for i in CORE if not (by_id[i].applicable and by_id[i].passed))
    n_app = len(applicable)
    if hard:
        return Verdict(REJECTED, passed, n_app, hard, core, "hard gate failure")
    first3 = [by_id[i] for i in (1, 2, 3) if by_id[i].applicable]
    if first3 and not any(r.passed for r in first3):
        return Verdict(REJECTED, passed, n_app, hard, core, "checks 1-3 all failed")
    if n_app == 0:
        return Verdict(REJECTED, 0, 0, hard, core, "no applicable checks")
    status = status_for_rate(Fraction(passed, n_app), not core, rho, marginal_effect_bound)
    rate_ok = Fraction(passed, n_app) >= Fraction(7, 10)
    if status == CONDITIONAL and rate_ok and not core:
        reason = "downgraded: marginal effect size"
    elif status == CONDITIONAL:
        reason = "pass rate 40-70% or core check failed"
    else:
        reason = "pass rate" if status == REJECTED else "all core checks passed"
    return Verdict(status, passed, n_app, hard, core, reason)


def verdict_rank(status: str) -> int:
    return _ORDER[status]


# =============================================================================
# Driver
# =============================================================================
def make_candidate(name: str, ds: tabular.Dataset, discovery: tabular.Dataset) -> CandidateBiomarker:
    x, y, _ = _xy(discovery, name)
    try:
        rho = stats.spearman(x, y).estimate
    except UndefinedCorrelation:
        rho = 0.0
    return CandidateBiomarker(name, ds.task_type, float(rho), tuple(ds.meta[name].components),
                              ds.features[name])


def _guard(check_id, fn, *args, **kw) -> CheckResult:
    try:
        return fn(*args, **kw)
    except Exception as e:  # a failing check never aborts the battery
        log.info("check %d raised %s", check_id, e)
        return _fail(check_id, f"error: {e}")


def _independent_checks(c, ds, confirmation, cfg):
    """Checks other than 8, which depends on the processing order."""
    out = {}
    try:
        summary = bootstrap_summary(c, ds, cfg)
    except Exception as e:
        summary = None
        out[3] = _fail(3, f"error: {e}")
        out[10] = _fail(10, f"error: {e}")
    out[1] = _guard(1, check_replication, c, confirmation, cfg)
    out[2] = _guard(2, check_permutation, c, ds, cfg)
    if summary is not None:
        out[3] = check_bootstrap(c, ds, cfg, summary)
        out[10] = check_ci_consistency(c, summary)
    out[4] = _guard(4, check_loo_influence, c, ds, cfg)
    out[5] = _guard(5, check_subgroup_consistency, c, ds, cfg)
    out[6] = _guard(6, check_triangulation, c, ds, cfg)
    out[7] = _guard(7, check_construct_validity, c, ds, cfg)
    out[9] = _guard(9, check_construct_independence, c, ds, cfg)
    out[11] = _guard(11, check_discriminative_power, c, ds, cfg)
    return out, summary


def _finish(c, partial, summary, ds, prior, cfg, order=0) -> BatteryRecord:
    conf = ds.demographic_matrix()
    partial = dict(partial)
    partial[8] = _guard(8, check_causal_robustness, c, ds, conf, prior, cfg)
    results = tuple(partial[i] for i in range(1, 12))
    return BatteryRecord(c, results, assign_verdict(results, c.discovery_rho, cfg.marginal_effect_bound),
                         summary, order)


def run_battery(name: str, ds: tabular.Dataset, discovery: tabular.Dataset,
                confirmation: tabular.Dataset | None, cfg: BatteryConfig = BatteryConfig(),
                prior_validated=()) -> BatteryRecord:
    """All eleven checks for one candidate plus its verdict."""
    c = make_candidate(name, ds, discovery)
    partial, summary = _independent_checks(c, ds, confirmation, cfg)
    return _finish(c, partial, summary, ds, prior_validated, cfg)


def run_batteries(names, ds, discovery, confirmation, cfg: BatteryConfig = BatteryConfig(),
                  threads: int = 1) -> list:
    """Battery for every candidate in descending |discovery rho| order (ties by name).

    Check 8 controls for candidates already validated earlier in that order,
    so it runs sequentially after the other checks (which may run in parallel).
    """
    cands = [make_candidate(n, ds, discovery) for n in names]
    cands.sort(key=lambda c: (-abs(c.discovery_rho), c.name))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partials = list(pool.map(lambda c: _independent_checks(c, ds, confirmation, cfg), cands))
    else:
        partials = [_independent_checks(c, ds, confirmation, cfg) for c in cands]
    records = []
    prior = []
    for i, (c, (partial, summary)) in enumerate(zip(cands, partials)):
        rec = _finish(c, partial, summary, ds, tuple(prior), cfg, order=i)
        records.append(rec)
        if rec.verdict.status == VALIDATED:
            prior.append((c.name, ds.features[c.name]))
    return records
