import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biomarker_audit import firewall, screening, synth, tabular
from biomarker_audit.errors import DataError, LeakageError

P = synth.PlantedEffect


def _cohort(planted=(), n=300, noise=3, seed=0, **kw):
    return synth.generate(synth.CohortSpec(n_participants=n, n_noise_features=noise,
                                           planted=tuple(planted), seed=seed, **kw))[0]


def test_exclusion_of_target_and_proxies(caplog):
    ds = _cohort([P("fasting_glucose", "linear_signal", 0.6)])
    cfg = firewall.LeakageConfig(target_name="homa_ir", excluded_proxies=("fasting_glucose", "ghost"))
    with caplog.at_level(logging.WARNING):
        out = firewall.exclude_target_and_proxies(ds, cfg)
    assert "ghost" in caplog.text
    assert "fasting_glucose" not in out.candidate_names()
    assert out.excluded_names() == ["fasting_glucose"]
    with pytest.raises(LeakageError):
        screening.screen_round(out, ["fasting_glucose"])
    plain = firewall.exclude_target_and_proxies(ds, firewall.LeakageConfig())
    assert plain.candidate_names() == ds.candidate_names()


def test_overlap_scan_flags_tautology():
    ds = _cohort([P("glucose_sq", "monotone_tautology", 0.99)])
    retained, flagged, _ = firewall.construct_overlap_scan(ds, ds.candidate_names(), firewall.LeakageConfig())
    assert [f.feature for f in flagged] == ["glucose_sq"]
    assert abs(flagged[0].rho) > 0.95
    assert set(retained) == {c for c in ds.candidate_names() if c != "glucose_sq"}


def _with_target_corr(rho_target):
    """Feature whose Spearman with the target is exactly ``rho_target`` (n=20)."""
    # y = 0..19 and x = y with positions 0 and d swapped, so sum d^2 = 2*d^2 and
    # rho = 1 - 6*sum(d^2)/(n(n^2-1))
    n = 20
    need = round((1 - rho_target) * n * (n * n - 1) / 6)
    x = np.arange(n, dtype=float)
    d = int(np.sqrt(need / 2))
    assert 2 * d * d == need
    x[[0, d]] = x[[d, 0]]
    return x, np.arange(n, dtype=float)


def test_overlap_boundary_is_strict():
    # 0.85 itself is not attainable at n=20, so set the threshold to the achieved value
    x, y = _with_target_corr(1 - 6 * 2 * 25 / (20 * 399))
    exact = 1 - 6 * 50 / (20 * 399)
    meta = {"x": tabular.FeatureMeta("x", "raw", (), 0.0)}
    ds = tabular.Dataset({"x": x}, y, "regression", np.array([f"p{i}" for i in range(20)]), meta)
    at = firewall.LeakageConfig(overlap_threshold=exact, min_confirmation_n=2)
    assert firewall.construct_overlap_scan(ds, ["x"], at)[0] == ["x"]
    below = firewall.LeakageConfig(overlap_threshold=exact - 1e-9, min_confirmation_n=2)
    assert firewall.construct_overlap_scan(ds, ["x"], below)[0] == []


def test_overlap_warn_band():
    x, y = _with_target_corr(1 - 6 * 2 * 100 / (20 * 399))  # 0.8496, just under 0.85
    meta = {"x": tabular.FeatureMeta("x", "raw", (), 0.0)}
    ds = tabular.Dataset({"x": x}, y, "regression", np.array([f"p{i}" for i in range(20)]), meta)
    retained, flagged, warnings = firewall.construct_overlap_scan(ds, ["x"], firewall.LeakageConfig())
    assert retained == ["x"] and not flagged and warnings[0].feature == "x"


@settings(max_examples=20, deadline=None)
@given(st.floats(0.3, 0.95), st.floats(0.3, 0.95))
def test_overlap_removal_monotone_in_threshold(t1, t2):
    ds = _cohort([P("a", "linear_signal", 0.5), P("b", "linear_signal", 0.7),
                  P("c", "linear_signal", 0.9)], n=200, noise=0)
    lo, hi = sorted((t1, t2))
    keep_lo = set(firewall.construct_overlap_scan(ds, ds.candidate_names(),
                                                  firewall.LeakageConfig(overlap_threshold=lo))[0])
    keep_hi = set(firewall.construct_overlap_scan(ds, ds.candidate_names(),
                                                  firewall.LeakageConfig(overlap_threshold=hi))[0])
    assert keep_lo <= keep_hi


def test_split_arithmetic_and_disjointness():
    ds = _cohort(n=100)
    disc, conf = firewall.discovery_confirmation_split(ds, firewall.LeakageConfig(), seed=3)
    assert conf.n_participants == 30 and disc.n_participants == 70
    assert not set(disc.participant_id) & set(conf.participant_id)


def test_split_repeated_measures():
    ds = _cohort(n=497, n_rows=704)
    disc, conf = firewall.discovery_confirmation_split(ds, firewall.LeakageConfig(), seed=1)
    assert np.unique(conf.participant_id).size == conf.n_rows
    assert not set(disc.participant_id) & set(conf.participant_id)
    # a multi-row participant in confirmation contributes exactly one row
    ids, counts = np.unique(ds.participant_id, return_counts=True)
    multi = [i for i, c in zip(ids, counts) if c >= 3 and i in set(conf.participant_id)]
    assert multi
    assert (conf.participant_id == multi[0]).sum() == 1 and (disc.participant_id == multi[0]).sum() == 0


def test_split_too_small():
    with pytest.raises(DataError):
        firewall.discovery_confirmation_split(_cohort(n=50), firewall.LeakageConfig(), seed=0)


def test_kfold_examples():
    ds = _cohort(n=10, noise=1)
    fa = firewall.stratified_participant_kfold(ds, k=5, seed=0)
    assert np.bincount(fa.fold_index).tolist() == [2] * 5
    cls = synth.generate(synth.CohortSpec(n_participants=200, task_type="classification",
                                          n_noise_features=1, seed=2))[0]
    fa = firewall.stratified_participant_kfold(cls, k=5, seed=4)
    pos = cls.target.sum()
    for f in range(5):
        m = fa.fold_index == f
        assert abs(cls.target[m].sum() - pos / 5) <= 1


@pytest.mark.parametrize("seed", range(10))
def test_kfold_never_splits_participants(seed):
    ds = _cohort(n=120, n_rows=300, seed=seed)
    fa = firewall.stratified_participant_kfold(ds, k=5, seed=seed)
    for p in np.unique(ds.participant_id):
        assert np.unique(fa.fold_index[ds.participant_id == p]).size == 1


def test_intra_cluster_dedup():
    rng = np.random.default_rng(0)
    a = rng.normal(size=200)
    copies = [("a", 0.3, a), ("a_copy", 0.2, a.copy())]
    reps, cl = firewall.intra_cluster_dedup(copies)
    assert reps == ["a"] and cl == {"a": "a", "a_copy": "a"}
    ortho = [(f"f{i}", 0.1 * i, rng.normal(size=200)) for i in range(1, 5)]
    assert sorted(firewall.intra_cluster_dedup(ortho)[0]) == [f"f{i}" for i in range(1, 5)]
    base = rng.normal(size=500)
    family = [("sleep_var_sd", 0.25, base + 0.1 * rng.normal(size=500)),
              ("sleep_var_cv", 0.25, base + 0.1 * rng.normal(size=500)),
              ("sleep_var_iqr", 0.22, base + 0.1 * rng.normal(size=500))]
    reps, cl = firewall.intra_cluster_dedup(family)
    assert reps == ["sleep_var_cv"]  # tie on |effect| broken by name
    assert set(cl.values()) == {"sleep_var_cv"}
