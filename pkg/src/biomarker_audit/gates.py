"""Deterministic quality gates that suppress report artifacts.

All boundaries are strict inequalities: a value sitting exactly on a
threshold does not trigger.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from . import stats

VIF_LIMIT = 50.0
AUC_FLOOR = 0.55
R2_FLOOR = 0.0
OVERFIT_RATIO = 5.0
CHANCE_BAND = 0.02
FAMILY_CAP = 2


@dataclass(frozen=True)
class QualityGateReport:
    gate_id: str
    triggered: bool
    measured_value: float
    threshold: float
    suppressed_artifact: str

    def notice(self) -> str:
        return (f"[{self.suppressed_artifact} suppressed by {self.gate_id} gate: "
                f"measured {self.measured_value:.4g} vs threshold {self.threshold:g}]")

    def to_dict(self) -> dict:
        d = asdict(self)
        if not math.isfinite(d["measured_value"]):
            d["measured_value"] = "inf" if d["measured_value"] > 0 else "nan"
        return d


def gate_multicollinearity(X, names=None) -> QualityGateReport:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        return QualityGateReport("multicollinearity", False, 1.0, VIF_LIMIT, "coefficient_table")
    worst = float(np.max(stats.vif(X, names)))
    return QualityGateReport("multicollinearity", worst > VIF_LIMIT, worst, VIF_LIMIT,
                             "coefficient_table")


def gate_performance(ev: stats.ModelEval) -> QualityGateReport:
    if ev.metric_kind == "auc":
        return QualityGateReport("performance", ev.cv_metric < AUC_FLOOR, ev.cv_metric, AUC_FLOOR,
                                 "ml_results_table")
    return QualityGateReport("performance", ev.cv_metric < R2_FLOOR, ev.cv_metric, R2_FLOOR,
                             "ml_results_table")


def gate_overfitting(ev: stats.ModelEval) -> QualityGateReport:
    """Train/CV ratio above 5 triggers; cv <= 0 with positive train is treated as unbounded."""
    if ev.cv_metric <= 0:
        ratio = math.inf if ev.train_metric > 0 else 0.0
    else:
        ratio = ev.train_metric / ev.cv_metric
    return QualityGateReport("overfitting", ratio > OVERFIT_RATIO, ratio, OVERFIT_RATIO,
                             "model_results")


def _at_chance(ev: stats.ModelEval) -> bool:
    if ev.metric_kind == "auc":
        return abs(ev.cv_metric - 0.5) <= CHANCE_BAND
    return ev.cv_metric <= 0


def gate_ablation(model_evals) -> QualityGateReport:
    evals = list(model_evals)
    chance = [_at_chance(e) for e in evals]
    best = max((e.cv_metric for e in evals), default=float("nan"))
    return QualityGateReport("ablation", bool(evals) and all(chance), best, CHANCE_BAND,
                             "feature_importance_table")


def default_family(name: str) -> str:
    """Family label: the snake_case name without its last token."""
    head, sep, _ = name.rpartition("_")
    return head if sep else name


def gate_forest_dedup(candidates, families=None):
    """Keep at most two highest-|rho| members per family for plotting.

    ``candidates`` is an iterable of (name, rho). Returns (report, kept names,
    not-plotted names). Ties on |rho| are broken by name.
    """
    families = families or {}
    groups = defaultdict(list)
    for name, rho in candidates:
        groups[families.get(name, default_family(name))].append((name, rho))
    kept, dropped = [], []
    for fam in sorted(groups):
        members = sorted(groups[fam], key=lambda t: (-abs(t[1]), t[0]))
        kept += [m[0] for m in members[:FAMILY_CAP]]
        dropped += [m[0] for m in members[FAMILY_CAP:]]
    largest = max((len(v) for v in groups.values()), default=0)
    report = QualityGateReport("forest_dedup", bool(dropped), float(largest), float(FAMILY_CAP),
                               "forest_plot_rows")
    return report, kept, dropped
