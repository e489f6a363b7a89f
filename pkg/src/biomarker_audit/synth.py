"""
Synthetic cohorts with planted, manifest-recorded effects.

Planted Spearman correlations are hit by rank targeting: the target is mapped
to normal scores, each feature mixes those scores with fixed noise, and the
mixing weight is bisected until the empirical rank correlation matches.
Repeated measures share a participant-level latent so that participant-level
splitting matters.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from scipy import stats as sps

from . import stats, tabular
from .errors import ConfigError

KINDS = ("linear_signal", "monotone_tautology", "composite", "confounded",
         "outlier_driven", "subgroup_inconsistent")


@dataclass(frozen=True)
class PlantedEffect:
    name: str
    kind: str
    target_rho: float = 0.3
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CohortSpec:
    """Shape of a synthetic cohort.

    Rows per participant: ``n_rows`` total rows (default one per participant);
    rows beyond ``n_participants`` go to randomly chosen participants, at most
    ``max_rows_per_participant`` each. ``missingness`` is either one ratio for
    every feature (jittered by +/- ``missingness_spread``) or a name -> ratio map.
    """

    n_participants: int = 500
    task_type: str = "regression"
    n_noise_features: int = 20
    planted: tuple = ()
    missingness: float | dict = 0.0
    missingness_spread: float = 0.0
    n_rows: int | None = None
    max_rows_per_participant: int = 4
    confounder_strength: float = 0.5
    within_participant_sd: float = 0.5
    seed: int = 0

    @classmethod
    def from_mapping(cls, m: dict) -> "CohortSpec":
        m = dict(m)
        planted = tuple(PlantedEffect(p["name"], p["kind"], float(p.get("target_rho", 0.3)),
                                      dict(p.get("params", {}))) for p in m.pop("planted", []))
        unknown = set(m) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown cohort spec fields: {sorted(unknown)}")
        return cls(planted=planted, **m)

    def to_mapping(self) -> dict:
        d = asdict(self)
        d["planted"] = [asdict(p) for p in self.planted]
        return d


def validate_spec(spec: CohortSpec) -> None:
    names = [p.name for p in spec.planted]
    if len(set(names)) != len(names):
        raise ConfigError("planted effect names must be unique")
    if spec.task_type not in tabular.TASK_TYPES:
        raise ConfigError(f"task_type must be one of {tabular.TASK_TYPES}")
    if spec.n_participants < 10:
        raise ConfigError("need at least 10 participants")
    if spec.n_rows is not None and not (
            spec.n_participants <= spec.n_rows <= spec.n_participants * spec.max_rows_per_participant):
        raise ConfigError("n_rows must lie between n_participants and n_participants * max_rows")
    ratios = spec.missingness.values() if isinstance(spec.missingness, dict) else [spec.missingness]
    if any(not 0 <= r <= 1 for r in ratios) or not 0 <= spec.missingness_spread <= 1:
        raise ConfigError("missingness ratios must lie in [0, 1]")
    if not 0 <= spec.confounder_strength < 1:
        raise ConfigError("confounder_strength must lie in [0, 1)")
    for p in spec.planted:
        if p.kind not in KINDS:
            raise ConfigError(f"{p.name}: unknown kind {p.kind!r}")
        if not -1 < p.target_rho < 1:
            raise ConfigError(f"{p.name}: target_rho must lie in (-1, 1)")
        if p.kind == "subgroup_inconsistent" and abs(p.target_rho) > 0.5:
            raise ConfigError(f"{p.name}: |target_rho| > 0.5 cannot coexist with opposite-sign halves")
        if p.kind == "confounded" and abs(p.target_rho) >= 0.9 * spec.confounder_strength:
            raise ConfigError(f"{p.name}: |target_rho| must stay below 0.9 * confounder_strength "
                              f"({spec.confounder_strength}) for a confounder-only association")
        if p.kind == "linear_signal" and spec.task_type == "classification" and abs(p.target_rho) > 0.8:
            raise ConfigError(f"{p.name}: |target_rho| > 0.8 unattainable against a binary target")


def _normal_scores(v: np.ndarray) -> np.ndarray:
    r = stats.rank_with_ties(v)
    return sps.norm.ppf((r - 0.5) / v.size)


class _RankTarget:
    """Fast Spearman against a fixed target (ranks cached)."""

    def __init__(self, y):
        ry = stats.rank_with_ties(y)
        self.ry = ry - ry.mean()
        self.ss = self.ry @ self.ry

    def rho(self, x) -> float:
        rx = stats.rank_with_ties(x)
        rx = rx - rx.mean()
        den = math.sqrt((rx @ rx) * self.ss)
        return float(rx @ self.ry / den) if den else 0.0


def _bisect(make, rho_of, target, lo, hi, iters=60):
    """Bisect a parameter whose rho(make(param)) increases with the parameter."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if rho_of(make(mid)) < target:
            lo = mid
        else:
            hi = mid
    return make(0.5 * (lo + hi))


def _allocate_rows(spec: CohortSpec, rng) -> np.ndarray:
    counts = np.ones(spec.n_participants, dtype=int)
    extra = (spec.n_rows or spec.n_participants) - spec.n_participants
    for _ in range(extra):
        open_ = np.flatnonzero(counts < spec.max_rows_per_participant)
        counts[rng.choice(open_)] += 1
    return counts


def generate(spec: CohortSpec):
    """Build a ``Dataset`` and its ground-truth manifest from ``spec``."""
    validate_spec(spec)

    def rng(*keys):
        return stats.stream(spec.seed, "synth", *keys)

    P = spec.n_participants
    counts = _allocate_rows(spec, rng("rows"))
    code = np.repeat(np.arange(P), counts)
    n = code.size
    repeated = n > P
    width = len(str(P))
    pids = np.array([f"P{i:0{width}d}" for i in range(P)])
    wave = np.concatenate([np.arange(c) + 1 for c in counts])

    demo_rng = rng("demographics")
    age_z = demo_rng.standard_normal(P)
    sex = np.where(demo_rng.random(P) < 0.5, "F", "M")
    w = spec.within_participant_sd if repeated else 0.0

    def latent(*keys):
        g = rng(*keys)
        person = g.standard_normal(P)[code]
        return math.sqrt(1 - w * w) * person + w * g.standard_normal(n)

    g_t = rng("target")
    gamma = spec.confounder_strength
    u = gamma * age_z + math.sqrt(1 - gamma * gamma) * g_t.standard_normal(P)
    t = math.sqrt(1 - w * w) * u[code] + w * g_t.standard_normal(n)

    outlier_row = None
    if any(p.kind == "outlier_driven" for p in spec.planted):
        singles = np.flatnonzero(counts == 1)
        op = int(rng("outlier").choice(singles))
        outlier_row = int(np.flatnonzero(code == op)[0])
        t[outlier_row] = t.max() + 3.0

    if spec.task_type == "classification":
        y = (t > np.median(t)).astype(float)
    else:
        y = t.copy()
    target = _RankTarget(y)
    s = _normal_scores(t)
    age_row = age_z[code]
    sex_row = sex[code]

    features = {}
    meta = {}
    manifest = []

    def add(name, col, kind="raw", components=()):
        if name in features:
            raise ConfigError(f"duplicate feature name {name!r}")
        features[name] = col
        meta[name] = (kind, tuple(components))

    def linear(name, rho):
        eps = latent("noise", name)
        return _bisect(lambda r: r * s + math.sqrt(max(0.0, 1 - r * r)) * eps,
                       target.rho, rho, -0.999, 0.999)

    for p in spec.planted:
        prm = p.params
        entry = {"name": p.name, "kind": p.kind, "target_rho": p.target_rho, "params": dict(prm)}
        if p.kind == "linear_signal":
            add(p.name, linear(p.name, p.target_rho))
        elif p.kind == "monotone_tautology":
            tr = prm.get("transform", "square")
            shifted = t - t.min() + 1.0
            col = {"square": shifted ** 2, "log": np.log(shifted), "exp": np.exp(t / t.std())}[tr]
            add(p.name, col if p.target_rho >= 0 else -col)
        elif p.kind == "composite":
            comps = prm.get("components", [f"{p.name}_num", f"{p.name}_den"])
            ra, rb = prm.get("component_rhos", [0.3, 0.1])
            a = linear(comps[0], ra)
            b = linear(comps[1], -rb)
            add(comps[0], np.exp(a))
            add(comps[1], np.exp(b))
            add(p.name, np.exp(a) / np.exp(b), "composite", comps)
            entry["components"] = list(comps)
            entry["component_achieved_rho"] = [target.rho(np.exp(a)), target.rho(np.exp(b))]
        elif p.kind == "confounded":
            eps = latent("noise", p.name)
            sgn = 1.0 if p.target_rho >= 0 else -1.0
            col = _bisect(lambda c: sgn * (c * age_row + math.sqrt(max(0.0, 1 - c * c)) * eps),
                          lambda v: sgn * target.rho(v), abs(p.target_rho), 0.0, 0.999)
            add(p.name, col)
            entry["confounder"] = "age"
        elif p.kind == "outlier_driven":
            add(p.name, _outlier_column(p, s, target, outlier_row, latent("noise", p.name)))
            entry["outlier_participant"] = str(pids[code[outlier_row]])
        elif p.kind == "subgroup_inconsistent":
            add(p.name, _inconsistent_column(p, s, t, sex_row, target, latent("noise", p.name)))
            entry["split_by"] = prm.get("split_by", "target_half")
        manifest.append(entry)

    for j in range(spec.n_noise_features):
        add(f"noise_{j:04d}", latent("noise_feature", j))

    miss_rng = rng("missingness")
    exempt = {p.name for p in spec.planted if p.kind == "outlier_driven"}
    fractions = {}
    for name in list(features):
        if isinstance(spec.missingness, dict):
            ratio = spec.missingness.get(name, 0.0)
        else:
            lo = max(0.0, spec.missingness - spec.missingness_spread)
            hi = min(1.0, spec.missingness + spec.missingness_spread)
            ratio = spec.missingness if hi == lo else miss_rng.uniform(lo, hi)
        if name in exempt:
            ratio = 0.0
        k = int(round(ratio * n))
        if k:
            col = features[name].copy()
            col[miss_rng.choice(n, size=k, replace=False)] = np.nan
            features[name] = col
        fractions[name] = k / n

    for entry in manifest:
        col = features[entry["name"]]
        obs = ~np.isnan(col)
        entry["achieved_rho"] = float(stats.spearman(col[obs], y[obs]).estimate)

    feature_meta = {k: tabular.FeatureMeta(k, kind, comps, fractions[k])
                    for k, (kind, comps) in meta.items()}
    ds = tabular.Dataset(
        features=features, target=y, task_type=spec.task_type, participant_id=pids[code],
        meta=feature_meta, target_name="target",
        demographics={"age": 40 + 12 * age_row, "sex=M": (sex_row == "M").astype(float)},
        subgroups={"sex": sex_row}, group=np.array([f"w{v}" for v in wave]) if repeated else None,
        notes={"n_target_missing_dropped": 0, "n_rows_loaded": n})
    info = {
        "spec": spec.to_mapping(),
        "n_rows": n, "n_participants": P, "n_features": len(features),
        "repeated_measures": bool(repeated),
        "mean_missingness": float(np.mean(list(fractions.values()))) if fractions else 0.0,
        "planted": manifest,
        "noise_features": [f"noise_{j:04d}" for j in range(spec.n_noise_features)],
        "composites": {e["name"]: e["components"] for e in manifest if e["kind"] == "composite"},
    }
    return ds, info


def _outlier_column(p, s, target, outlier_row, eps):
    """Bulk association just below zero; one extreme participant pushes it above zero."""
    n = s.size
    bulk = np.ones(n, dtype=bool)
    bulk[outlier_row] = False
    y_full = target
    # centered ranks are a monotone image of the target, enough for rank statistics
    y_bulk = _RankTarget(target.ry[bulk])

    def make(c):
        col = c * s + eps
        col[outlier_row] = np.abs(col[bulk]).max() * 10 + 10
        return col

    delta = y_full.rho(make(0.0)) - y_bulk.rho(make(0.0)[bulk])
    col = _bisect(make, lambda v: y_bulk.rho(v[bulk]), -0.5 * abs(delta), -1.0, 1.0)
    sgn = 1.0 if p.target_rho >= 0 else -1.0
    return sgn * col


def _inconsistent_column(p, s, t, sex_row, target, eps):
    """Opposite-sign association in the two halves, overall sign from target_rho."""
    sgn = 1.0 if p.target_rho >= 0 else -1.0
    split = p.params.get("split_by", "target_half")
    noise = 0.5 * eps
    if split == "target_half":
        lower = t <= np.median(t)

        def make(shift):
            return sgn * (np.where(lower, s, -0.8 * s + shift) + noise)
    elif split == "sex":
        first = sex_row == "F"

        def make(k):
            return sgn * (np.where(first, s, -k * s) + noise)
    else:
        raise ConfigError(f"{p.name}: split_by must be 'target_half' or 'sex'")
    lo, hi = (-5.0, 10.0) if split == "target_half" else (0.0, 1.0)
    if split == "sex":
        # larger k pulls the overall association down, so bisect on -k
        return _bisect(lambda m: make(-m), lambda v: sgn * target.rho(v), abs(p.target_rho), -hi, -lo)
    return _bisect(make, lambda v: sgn * target.rho(v), abs(p.target_rho), lo, hi)


# =============================================================================
# Presets matching the three cohort shapes
# =============================================================================
def _family_plants():
    return (
        PlantedEffect("sleep_var_sd", "linear_signal", 0.25),
        PlantedEffect("sleep_var_cv", "linear_signal", 0.24),
        PlantedEffect("night_social_usage", "linear_signal", 0.22),
        PlantedEffect("hedonic_productivity_ratio", "composite", 0.15,
                      {"components": ["hedonic_minutes", "productivity_minutes"],
                       "component_rhos": [0.15, 0.05]}),
    )


def dwb_shape(seed: int = 0) -> CohortSpec:
    plants = _family_plants()
    return CohortSpec(n_participants=7497, n_noise_features=197 - len(plants) - 2,
                      planted=plants, missingness=0.03, seed=seed)


def globem_shape(seed: int = 0) -> CohortSpec:
    plants = (PlantedEffect("wifi_ap_diversity_7d", "linear_signal", 0.13),
              PlantedEffect("first_unlock_after_midnight", "linear_signal", 0.2))
    return CohortSpec(n_participants=497, n_rows=704, n_noise_features=5508 - len(plants),
                      planted=plants, missingness=0.546, missingness_spread=0.3, seed=seed)


def wearme_shape(seed: int = 0) -> CohortSpec:
    plants = (
        PlantedEffect("cardio_fitness_index", "composite", -0.37,
                      {"components": ["steps", "resting_hr"], "component_rhos": [0.3, 0.1]}),
        PlantedEffect("tg_hdl_ratio", "composite", 0.56,
                      {"components": ["triglycerides", "hdl"], "component_rhos": [0.9, 0.4]}),
        PlantedEffect("glucose_sq", "monotone_tautology", 0.99, {"transform": "square"}),
        PlantedEffect("crp", "linear_signal", 0.39),
    )
    return CohortSpec(n_participants=1078, n_noise_features=71 - 8, planted=plants,
                      missingness=0.001, seed=seed)


PRESETS = {"dwb": dwb_shape, "globem": globem_shape, "wearme": wearme_shape}


# =============================================================================
# Files
# =============================================================================
def to_frame(ds: tabular.Dataset) -> pd.DataFrame:
    cols = {"pid": ds.participant_id}
    if ds.group is not None:
        cols["wave"] = ds.group
    cols["age"] = ds.demographics["age"]
    cols["sex"] = ds.subgroups["sex"]
    cols["target"] = ds.target
    cols.update(ds.features)
    return pd.DataFrame(cols)


def roles_for(ds: tabular.Dataset, info: dict) -> dict:
    roles = {"id": "pid", "target": "target", "task_type": ds.task_type,
             "demographic": ["age", "sex"], "subgroup": ["sex"]}
    if ds.group is not None:
        roles["group"] = "wave"
    if info["composites"]:
        roles["composites"] = info["composites"]
    return roles


def write_cohort(ds: tabular.Dataset, info: dict, out_dir, delimiter: str = ",") -> dict:
    """Write data.csv, manifest.json and roles.yaml; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"data": out / "data.csv", "manifest": out / "manifest.json", "roles": out / "roles.yaml"}
    to_frame(ds).to_csv(paths["data"], index=False, sep=delimiter, na_rep="")
    paths["manifest"].write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    paths["roles"].write_text(yaml.safe_dump(roles_for(ds, info), sort_keys=True))
    return paths
