"""
Run configuration and the end-to-end driver behind the CLI subcommands.

Each stage recomputes its prerequisites from the input file and the seed, so
a stage run on its own produces the same numbers as a full run. All outputs
are written with sorted keys and no wall-clock content (the append-only audit
log is the one exception), so identical inputs give byte-identical files.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import battery, firewall, gates, plotting, reporting, screening, stats, tabular
from .errors import ConfigError, DataError

_NUM = {"type": "number"}
_INT = {"type": "integer", "minimum": 0}
CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "input": {"type": "string"},
        "out": {"type": "string"},
        "seed": _INT,
        "threads": {"type": "integer", "minimum": 1},
        "delimiter": {"type": "string", "minLength": 1, "maxLength": 1},
        "k_folds": {"type": "integer", "minimum": 2},
        "roles": {"type": "object"},
        "leakage": {
            "type": "object", "additionalProperties": False,
            "properties": {"excluded_proxies": {"type": "array", "items": {"type": "string"}},
                           "overlap_threshold": _NUM, "confirmation_fraction": _NUM,
                           "min_confirmation_n": _INT, "warn_band_low": _NUM},
        },
        "screening": {
            "type": "object", "additionalProperties": False,
            "properties": {"p_threshold": _NUM, "effect_threshold": _NUM, "fdr_alpha": _NUM},
        },
        "battery": {
            "type": "object", "additionalProperties": False,
            "properties": {k: _NUM for k in (
                "n_resamples", "alpha", "construct_threshold", "small_n_construct_threshold",
                "small_n", "proxy_threshold", "compositional_margin", "auc_threshold",
                "marginal_effect_bound", "loo_exact_max", "loo_subset")}
            | {"subgroup_column": {"type": ["string", "null"]}},
        },
        "preprocess": {
            "type": "object", "additionalProperties": False,
            "properties": {"missingness_threshold": _NUM,
                           "imputation": {"enum": list(tabular.IMPUTERS)}},
        },
        "report": {
            "type": "object", "additionalProperties": False,
            "properties": {"figures": {"type": "boolean"},
                           "imputation_sensitivity": {"type": "boolean"}},
        },
        "robustness": {
            "type": "object", "additionalProperties": False,
            "properties": {"n_seeds": {"type": "integer", "minimum": 2},
                           "subgroup": {"type": "string"}, "n_boot": {"type": "integer", "minimum": 10},
                           "demographics": {"type": "array", "items": {"type": "string"}}},
        },
    },
}


@dataclass(frozen=True)
class RunConfig:
    input: str | None
    roles: tabular.ColumnRoles
    seed: int
    out: str = "results"
    leakage: firewall.LeakageConfig = field(default_factory=firewall.LeakageConfig)
    screening: screening.ScreeningConfig = field(default_factory=screening.ScreeningConfig)
    battery: dict = field(default_factory=dict)
    k_folds: int = 5
    threads: int = 1
    delimiter: str = ","
    missingness_threshold: float = 0.70
    imputation: str = "median"
    figures: bool = True
    imputation_sensitivity: bool = True
    robustness: dict = field(default_factory=dict)

    def battery_config(self) -> battery.BatteryConfig:
        opts = dict(self.battery)
        opts.setdefault("subgroup_column", self.roles.subgroup[0] if self.roles.subgroup else None)
        opts.setdefault("min_confirmation_n", self.leakage.min_confirmation_n)
        for k in ("n_resamples", "small_n", "loo_exact_max", "loo_subset", "min_confirmation_n"):
            if k in opts:
                opts[k] = int(opts[k])
        return battery.BatteryConfig(seed=self.seed, **opts)


def load_config(path=None, **overrides) -> RunConfig:
    """Read and validate a YAML run configuration; CLI flags override file values.

    Raises ``ConfigError`` for schema violations, a missing seed or an
    unwritable output directory.
    """
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    for k, v in overrides.items():
        if v is not None:
            raw[k] = v
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"config: {e.message} at {'/'.join(map(str, e.absolute_path)) or '<root>'}")
    if "seed" not in raw:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    if "roles" not in raw:
        raise ConfigError("config must define column roles")
    roles = tabular.ColumnRoles.from_mapping(raw["roles"])
    try:
        leak = firewall.LeakageConfig(target_name=roles.target,
                                      **{k: (tuple(v) if isinstance(v, list) else v)
                                         for k, v in raw.get("leakage", {}).items()})
        scr = screening.ScreeningConfig(**raw.get("screening", {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    pre = raw.get("preprocess", {})
    rep = raw.get("report", {})
    cfg = RunConfig(
        input=raw.get("input"), roles=roles, seed=int(raw["seed"]), out=raw.get("out", "results"),
        leakage=leak, screening=scr, battery=dict(raw.get("battery", {})),
        k_folds=raw.get("k_folds", 5), threads=raw.get("threads", 1),
        delimiter=raw.get("delimiter", ","),
        missingness_threshold=pre.get("missingness_threshold", 0.70),
        imputation=pre.get("imputation", "median"), figures=rep.get("figures", True),
        imputation_sensitivity=rep.get("imputation_sensitivity", True),
        robustness=dict(raw.get("robustness", {})))
    ensure_writable(cfg.out)
    return cfg


def ensure_writable(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"output directory {out} is not writable: {e}") from e
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


# =============================================================================
# Serialization helpers
# =============================================================================
def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, np.generic):
        return _clean(v.item())
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def write_json(path, payload) -> Path:
    Path(path).write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")
    return Path(path)


def write_tsv(path, header, rows) -> Path:
    def cell(v):
        if isinstance(v, float):
            return "" if math.isnan(v) else reporting.format_value(v)
        if isinstance(v, (list, tuple)):
            return ";".join(map(str, v))
        return "" if v is None else str(v)

    lines = ["\t".join(header)] + ["\t".join(cell(v) for v in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


# =============================================================================
# Pipeline
# =============================================================================
class Pipeline:
    """Lazily computed stages for one configuration."""

    def __init__(self, cfg: RunConfig, dataset: tabular.Dataset | None = None):
        self.cfg = cfg
        self._dataset = dataset
        self.out = ensure_writable(cfg.out)
        self.run_id = f"seed{cfg.seed}"

    # ---- data preparation -------------------------------------------------
    @cached_property
    def loaded(self) -> tabular.Dataset:
        if self._dataset is not None:
            return self._dataset
        if not self.cfg.input:
            raise ConfigError("no input path given (config 'input' or --input)")
        try:
            return tabular.load_table(self.cfg.input, self.cfg.roles, self.cfg.delimiter)
        except FileNotFoundError as e:
            raise DataError(f"input not found: {self.cfg.input}") from e

    @cached_property
    def firewalled(self) -> tabular.Dataset:
        return firewall.exclude_target_and_proxies(self.loaded, self.cfg.leakage)

    @cached_property
    def pruned(self) -> tabular.Dataset:
        return tabular.drop_high_missingness(self.firewalled, self.cfg.missingness_threshold)

    @cached_property
    def analysis(self) -> tabular.Dataset:
        return tabular.IMPUTERS[self.cfg.imputation](self.pruned)

    @cached_property
    def split(self):
        try:
            return firewall.discovery_confirmation_split(self.analysis, self.cfg.leakage, self.cfg.seed)
        except DataError as e:
            return self.analysis, None, str(e)

    @property
    def discovery(self):
        return self.split[0]

    @property
    def confirmation(self):
        return self.split[1]

    # ---- screening --------------------------------------------------------
    @cached_property
    def overlap(self):
        return firewall.construct_overlap_scan(self.analysis, self.analysis.candidate_names(),
                                               self.cfg.leakage)

    @cached_property
    def screened(self):
        retained = self.overlap[0]
        return screening.screen_round(self.discovery, retained, self.cfg.screening)

    @cached_property
    def survivors(self):
        return screening.survivors(self.screened)

    @cached_property
    def sensitivity(self):
        retained = self.overlap[0]
        thr = screening.threshold_sensitivity(self.discovery, retained, self.cfg.screening)
        imp = []
        if self.cfg.imputation_sensitivity and self.survivors:
            imp = screening.imputation_sensitivity(self.pruned, self.survivors)
        return {"threshold": thr, "imputation": imp}

    # ---- validation -------------------------------------------------------
    @cached_property
    def records(self):
        return battery.run_batteries(self.survivors, self.analysis, self.discovery, self.confirmation,
                                     self.cfg.battery_config(), self.cfg.threads)

    def _status(self, status):
        return [r for r in self.records if r.verdict.status == status]

    @cached_property
    def dedup(self):
        validated = [(r.candidate.name, r.candidate.discovery_rho, self.analysis.features[r.candidate.name])
                     for r in self._status(battery.VALIDATED)]
        return firewall.intra_cluster_dedup(validated, self.cfg.leakage.overlap_threshold)

    @cached_property
    def folds(self):
        return firewall.stratified_participant_kfold(self.analysis, self.cfg.k_folds, self.cfg.seed)

    def _evaluate(self, X):
        ds = self.analysis
        if X.shape[1] == 0:
            return None
        model = (stats.LogisticSpec() if ds.task_type == "classification"
                 else stats.RidgeSpec(penalties=(0.1, 1.0, 10.0, 100.0)))
        return stats.cross_validate(X, ds.target, self.folds, model, ds.participant_id)

    @cached_property
    def models(self):
        ds = self.analysis
        reps = self.dedup[0]
        demo = ds.demographic_matrix()
        feats = (np.column_stack([ds.features[c] for c in reps]) if reps
                 else np.empty((ds.n_rows, 0)))
        return {"baseline": self._evaluate(demo),
                "features": self._evaluate(feats),
                "full": self._evaluate(np.column_stack([demo, feats]))}

    @cached_property
    def gate_reports(self):
        ds = self.analysis
        reps = self.dedup[0]
        out = {}
        if len(reps) >= 2:
            out["multicollinearity"] = gates.gate_multicollinearity(
                np.column_stack([ds.features[c] for c in reps]), reps)
        full = self.models["full"]
        if full is not None:
            out["performance"] = gates.gate_performance(full)
            out["overfitting"] = gates.gate_overfitting(full)
        evals = [e for e in (self.models["features"], full) if e is not None]
        if evals:
            out["ablation"] = gates.gate_ablation(evals)
        passing = [(r.candidate.name, r.candidate.discovery_rho) for r in self.records
                   if r.verdict.status != battery.REJECTED]
        report, kept, dropped = gates.gate_forest_dedup(passing)
        out["forest_dedup"] = report
        self.forest_rows = kept
        self.forest_dropped = dropped
        return out

    # ---- facts ------------------------------------------------------------
    def cohort_facts(self) -> dict:
        ds = self.loaded
        names = self.firewalled.candidate_names()
        miss = [ds.missing_fraction(c) for c in names]
        facts = {
            "n_rows": ds.n_rows, "n_participants": ds.n_participants, "n_features": len(names),
            "n_excluded": len(self.firewalled.excluded_names()),
            "mean_missingness": float(np.mean(miss)) if miss else 0.0,
            "n_target_missing_dropped": int(ds.notes.get("n_target_missing_dropped", 0)),
            "repeated_measures": int(ds.n_rows != ds.n_participants),
        }
        return facts

    def target_facts(self) -> dict:
        y = self.loaded.target
        if self.loaded.task_type == "classification":
            return {"n_positive": int(y.sum()), "n_negative": int(y.size - y.sum())}
        if y.size == 0:
            return {}
        return {"mean": float(y.mean()), "sd": float(y.std(ddof=1)) if y.size > 1 else 0.0,
                "min": float(y.min()), "median": float(np.median(y)), "max": float(y.max())}

    def demographic_facts(self) -> dict:
        out = {}
        for name, v in self.loaded.demographics.items():
            out[name] = {"mean": float(np.mean(v)), "sd": float(np.std(v, ddof=1)) if v.size > 1 else 0.0}
        return out

    def config_facts(self) -> dict:
        c = self.cfg
        b = c.battery_config()
        return {"seed": c.seed, "k_folds": c.k_folds,
                "missingness_threshold": c.missingness_threshold,
                "overlap_threshold": c.leakage.overlap_threshold,
                "confirmation_fraction": c.leakage.confirmation_fraction,
                "p_threshold": c.screening.p_threshold, "effect_threshold": c.screening.effect_threshold,
                "fdr_alpha": c.screening.fdr_alpha, "n_resamples": b.n_resamples}

    def screening_facts(self) -> dict:
        retained, flagged, warnings = self.overlap
        return {"n_after_missingness": len(self.pruned.candidate_names()),
                "n_dropped_missingness": len(self.pruned.notes.get("dropped_missingness", ())),
                "n_overlap_flagged": len(flagged), "n_overlap_warnings": len(warnings),
                "n_tested": len(retained), "n_survivors": len(self.survivors),
                "n_discovery_rows": self.discovery.n_rows,
                "n_confirmation_rows": 0 if self.confirmation is None else self.confirmation.n_rows,
                "threshold_identical": int(self.sensitivity["threshold"]["identical"]),
                "n_lenient_only": len(self.sensitivity["threshold"]["lenient_only"]),
                "n_imputation_unstable": sum(r["unstable"] for r in self.sensitivity["imputation"])}

    def battery_facts(self) -> dict:
        cands = {}
        for r in self.records:
            b = r.bootstrap
            cands[r.candidate.name] = {
                "rho": r.candidate.discovery_rho, "status": r.verdict.status,
                "n_passed": r.verdict.pass_count, "n_applicable": r.verdict.applicable_count,
                "ci_low": b.ci_low if b else float("nan"), "ci_high": b.ci_high if b else float("nan"),
            }
        counts = {s: len(self._status(s)) for s in (battery.VALIDATED, battery.CONDITIONAL, battery.REJECTED)}
        return {"battery": {"n_evaluated": len(self.records), "n_validated": counts[battery.VALIDATED],
                            "n_conditional": counts[battery.CONDITIONAL],
                            "n_rejected": counts[battery.REJECTED],
                            "n_validated_after_dedup": len(self.dedup[0])},
                "candidate": cands}

    def model_facts(self) -> dict:
        """``model.cv_<metric>`` is the full model (demographics + validated features)."""
        m = self.models
        out = {"n_features": len(self.dedup[0]), "k_folds": self.cfg.k_folds}
        ev = next((e for e in m.values() if e is not None), None)
        if ev is None:
            return out
        kind = ev.metric_kind
        out["metric"] = kind
        names = {"full": "", "baseline": "baseline_", "features": "features_only_"}
        for key, e in m.items():
            if e is not None:
                out[f"{names[key]}cv_{kind}"] = e.cv_metric
                out[f"{names[key]}train_{kind}"] = e.train_metric
        if m["baseline"] is not None and m["full"] is not None:
            out[f"delta_{kind}"] = m["full"].cv_metric - m["baseline"].cv_metric
        return out

    def gate_facts(self) -> dict:
        return {g: {"triggered": int(r.triggered), "measured": r.measured_value, "threshold": r.threshold}
                for g, r in self.gate_reports.items()}

    def power_facts(self) -> dict:
        n = self.analysis.n_participants
        return {"n": n, "min_detectable_rho": stats.min_detectable_rho(n) if n >= 10 else float("nan")}

    def fact_sheet(self, stage: str) -> reporting.FactSheet:
        state = {"config": self.config_facts(), "cohort": self.cohort_facts(),
                 "target": self.target_facts(), "demographic": self.demographic_facts()}
        if stage == "profile":
            state["missingness"] = {c: self.loaded.missing_fraction(c)
                                    for c in self.firewalled.candidate_names()}
        if stage in ("screen", "validate", "report"):
            state["screening"] = self.screening_facts()
        if stage in ("validate", "report"):
            state.update(self.battery_facts())
            state["model"] = self.model_facts()
            state["gates"] = self.gate_facts()
            state["power"] = self.power_facts()
        return reporting.build_fact_sheet(self.run_id, state)


# =============================================================================
# Stage commands
# =============================================================================
def cmd_profile(cfg: RunConfig, dataset=None) -> dict:
    p = Pipeline(cfg, dataset)
    fs = p.fact_sheet("profile")
    ds = p.loaded
    rows = [(c, ds.meta[c].kind, ds.missing_fraction(c)) for c in ds.features]
    write_tsv(p.out / "profile_features.tsv", ["feature", "kind", "missing_fraction"], rows)
    fs.write(p.out / "factsheet.json")
    doc = {"stage": "profile", "run_id": p.run_id, "facts": fs.entries,
           "fact_sheet_hash": fs.content_hash()}
    write_json(p.out / "profile.json", doc)
    return doc


def cmd_screen(cfg: RunConfig, dataset=None) -> dict:
    p = Pipeline(cfg, dataset)
    fs = p.fact_sheet("screen")
    retained, flagged, warnings = p.overlap
    write_tsv(p.out / "screening.tsv",
              ["feature", "rho", "raw_p", "adjusted_p", "survived", "reason", "n"],
              [(s.feature, s.rho, s.raw_p, s.adjusted_p, int(s.survived), s.reason, s.n)
               for s in p.screened])
    fs.write(p.out / "factsheet.json")
    doc = {"stage": "screen", "run_id": p.run_id, "survivors": p.survivors,
           "overlap_flagged": [vars(f) for f in flagged], "overlap_warnings": [vars(f) for f in warnings],
           "dropped_missingness": list(p.pruned.notes.get("dropped_missingness", ())),
           "split_note": p.split[2] if len(p.split) > 2 else None,
           "sensitivity": p.sensitivity, "facts": fs.entries, "fact_sheet_hash": fs.content_hash()}
    write_json(p.out / "screen.json", doc)
    return doc


def _battery_rows(p):
    rows = []
    for r in p.records:
        checks = {res.check_id: res for res in r.results}
        rows.append([r.order, r.candidate.name, r.candidate.discovery_rho, r.verdict.status,
                     r.verdict.pass_count, r.verdict.applicable_count, checks[9].label,
                     p.dedup[1].get(r.candidate.name, "")]
                    + ["" if not checks[i].applicable else int(bool(checks[i].passed))
                       for i in range(1, 12)])
    header = ["order", "feature", "rho", "status", "passed", "applicable", "independence",
              "cluster"] + [f"check_{i}" for i in range(1, 12)]
    return header, rows


def cmd_validate(cfg: RunConfig, dataset=None, pipeline=None) -> dict:
    p = pipeline or Pipeline(cfg, dataset)
    fs = p.fact_sheet("validate")
    write_tsv(p.out / "battery.tsv", *_battery_rows(p))
    fs.write(p.out / "factsheet.json")
    models = {k: (None if v is None else {"train": v.train_metric, "cv": v.cv_metric,
                                         "kind": v.metric_kind, "folds": list(v.fold_metrics)})
              for k, v in p.models.items()}
    doc = {"stage": "validate", "run_id": p.run_id,
           "records": [r.to_dict() for r in p.records],
           "validated_representatives": p.dedup[0], "clusters": p.dedup[1],
           "models": models, "gates": {k: g.to_dict() for k, g in p.gate_reports.items()},
           "facts": fs.entries, "fact_sheet_hash": fs.content_hash()}
    write_json(p.out / "validate.json", doc)
    return doc


# ---- report ---------------------------------------------------------------
def _templates(p: Pipeline, fs: reporting.FactSheet):
    cohort = ("The analysis used {{cohort.n_rows}} rows from {{cohort.n_participants}} participants "
              "and {{cohort.n_features}} candidate features. Features with missingness above "
              "{{config.missingness_threshold}} were dropped (count: "
              "{{screening.n_dropped_missingness}}), leaving {{screening.n_after_missingness}}.")
    screen = ("The construct-overlap scan removed {{screening.n_overlap_flagged}} feature(s); "
              "{{screening.n_tested}} features were screened on {{screening.n_discovery_rows}} "
              "discovery rows with Benjamini-Hochberg control at {{config.fdr_alpha}}; "
              "{{screening.n_survivors}} survived (raw p below {{config.p_threshold}} and |rho| of "
              "at least {{config.effect_threshold}}).")
    val = ("Each survivor went through {{battery.n_checks}} checks. "
           "{{battery.n_validated}} candidates were validated, {{battery.n_conditional}} conditional "
           "and {{battery.n_rejected}} rejected; {{battery.n_validated_after_dedup}} validated "
           "candidates remain after intra-cluster deduplication. The confirmation split held "
           "{{screening.n_confirmation_rows}} participants.")
    lines = []
    for r in p.records:
        key = f"candidate.{r.candidate.name.lower()}"
        lines.append(f"- {r.candidate.name}: rho {{{{{key}.rho}}}}, "
                     f"{{{{{key}.n_passed}}}} of {{{{{key}.n_applicable}}}} applicable checks passed, "
                     f"{{{{{key}.status}}}}")
    cands = "\n".join(lines) if lines else "No candidates reached the battery."
    kind = fs.entries.get("model.metric")
    if p.models["full"] is not None and kind:
        gate = p.gate_reports.get("performance")
        model = (f"Cross-validated ({{{{model.k_folds}}}} participant-level folds) {{{{model.metric}}}} "
                 f"with demographics alone: {{{{model.baseline_cv_{kind}}}}}; with validated features "
                 f"added: {{{{model.cv_{kind}}}}} (change {{{{model.delta_{kind}}}}})."
                 if f"model.baseline_cv_{kind}" in fs else
                 f"Cross-validated ({{{{model.k_folds}}}} participant-level folds) {{{{model.metric}}}} "
                 f"with validated features: {{{{model.cv_{kind}}}}}.")
        if gate is not None and gate.triggered:
            model = ("[ml_results_table suppressed by performance gate: measured "
                     "{{gates.performance.measured}} vs threshold {{gates.performance.threshold}}]")
    else:
        model = "No model was fitted: no validated features and no demographics."
    power = ("With {{power.n}} participants the minimum detectable |rho| (two-sided, "
             "conventional power) is {{power.min_detectable_rho}}.")
    return [("Cohort", cohort), ("Screening", screen), ("Validation", val),
            ("Candidates", cands), ("Model", model), ("Power", power)]


def render_sections(p: Pipeline, fs: reporting.FactSheet):
    return [reporting.Section.render(title, tmpl, fs) for title, tmpl in _templates(p, fs)]


def render_markdown(sections) -> str:
    parts = ["# Biomarker audit report", ""]
    for s in sections:
        parts += [f"## {s.title}", "", s.text, ""]
    return "\n".join(parts)


def check_report(report_path, factsheet_path):
    """Re-read a written report and its fact sheet; returns (ok, mismatches)."""
    doc = json.loads(Path(report_path).read_text())
    fs_doc = json.loads(Path(factsheet_path).read_text())
    fs = reporting.FactSheet(fs_doc["entries"], fs_doc.get("run_id", ""))
    sections = [reporting.Section.from_dict(s) for s in doc["sections"]]
    return reporting.consistency_check(sections, fs)


def cmd_report(cfg: RunConfig, dataset=None) -> dict:
    p = Pipeline(cfg, dataset)
    cmd_validate(cfg, pipeline=p)
    fs = p.fact_sheet("report")
    sections = render_sections(p, fs)
    audit = p.out / "audit.jsonl"
    checked = []
    for s in sections:
        checked.append(s.verified(fs, audit))
    ok, mismatches = reporting.consistency_check(checked, fs)
    gate_rows = [(g.gate_id, int(g.triggered), g.measured_value, g.threshold, g.suppressed_artifact)
                 for g in p.gate_reports.values()]
    write_tsv(p.out / "gates.tsv", ["gate", "triggered", "measured", "threshold", "suppresses"], gate_rows)
    figures = []
    if cfg.figures:
        by_name = {r.candidate.name: r for r in p.records}
        rows = []
        for name in sorted(p.forest_rows, key=lambda n: (-abs(by_name[n].candidate.discovery_rho), n)):
            r = by_name[name]
            b = r.bootstrap
            rows.append((name, r.candidate.discovery_rho, b.ci_low if b else None,
                         b.ci_high if b else None, r.verdict.status))
        figures.append(plotting.forest_plot(rows, p.out / "forest_plot.png").name)
    md = render_markdown(checked)
    if p.forest_dropped:
        md += "\nNot plotted (family cap): " + ", ".join(p.forest_dropped) + "\n"
    (p.out / "report.md").write_text(md)
    fs.write(p.out / "factsheet.json")
    doc = {"stage": "report", "run_id": p.run_id, "sections": [s.to_dict() for s in checked],
           "consistent": ok, "mismatches": [list(m) for m in mismatches], "figures": figures,
           "fact_sheet_hash": fs.content_hash()}
    write_json(p.out / "report.json", doc)
    return doc


# ---- robustness -------------------------------------------------------------
def cmd_robustness(cfg: RunConfig, dataset=None) -> dict:
    from . import harness

    p = Pipeline(cfg, dataset)
    opts = dict(cfg.robustness)
    subgroup = opts.get("subgroup") or (cfg.roles.subgroup[0] if cfg.roles.subgroup else None)
    if subgroup is None:
        raise ConfigError("robustness needs a subgroup column (robustness.subgroup or roles.subgroup)")
    ds = p.pruned
    demo = opts.get("demographics")
    rep = harness.robustness_harness(ds, demo, subgroup, n_seeds=opts.get("n_seeds", 10),
                                     seed=cfg.seed, n_boot=opts.get("n_boot", 100),
                                     threads=cfg.threads, name=Path(cfg.input or "dataset").stem)
    rows = []
    for c in ("checked", "random_pruned"):
        for m in harness.METRICS:
            rows.append((c, m, float(np.mean(rep.deltas[c][m])), *rep.delta_ci[c][m],
                         rep.p_values[c][m], rep.q_values[c][m]))
    write_tsv(p.out / "robustness.tsv", ["condition", "metric", "mean_delta", "ci_low", "ci_high",
                                         "p", "q"], rows)
    figures = []
    if cfg.figures:
        figures.append(plotting.robustness_plot(rep, p.out / "robustness.png").name)
    doc = {"stage": "robustness", "run_id": p.run_id, **rep.to_dict(), "figures": figures}
    write_json(p.out / "robustness.json", doc)
    return doc


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    valid = {f.name for f in fields(RunConfig)}
    return replace(cfg, **{k: v for k, v in kw.items() if k in valid and v is not None})
