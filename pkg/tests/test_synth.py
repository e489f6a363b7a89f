import json

import numpy as np
import pytest
import yaml

from biomarker_audit import stats, synth, tabular
from biomarker_audit.errors import ConfigError

P = synth.PlantedEffect


def _gen(planted=(), n=500, noise=5, seed=0, **kw):
    return synth.generate(synth.CohortSpec(n_participants=n, n_noise_features=noise,
                                           planted=tuple(planted), seed=seed, **kw))


@pytest.mark.parametrize("rho", [-0.6, -0.2, 0.1, 0.4, 0.8])
def test_linear_signal_hits_target(rho):
    ds, info = _gen([P("s", "linear_signal", rho)])
    got = stats.spearman(ds.features["s"], ds.target).estimate
    assert got == pytest.approx(rho, abs=0.05)
    assert info["planted"][0]["achieved_rho"] == pytest.approx(got)


def test_tautologies_are_monotone():
    for tr in ("square", "log", "exp"):
        ds, _ = _gen([P("t", "monotone_tautology", 0.99, {"transform": tr})])
        assert stats.spearman(ds.features["t"], ds.target).estimate == pytest.approx(1.0)


def test_composite_and_components():
    ds, info = _gen([P("ratio", "composite", 0.3, {"components": ["a", "b"],
                                                   "component_rhos": [0.4, 0.2]})], n=1000)
    assert ds.meta["ratio"].components == ("a", "b") and ds.meta["ratio"].kind == "composite"
    np.testing.assert_allclose(ds.features["ratio"], ds.features["a"] / ds.features["b"])
    ra, rb = info["planted"][0]["component_achieved_rho"]
    assert ra == pytest.approx(0.4, abs=0.05) and rb == pytest.approx(-0.2, abs=0.05)
    assert info["composites"] == {"ratio": ["a", "b"]}


def test_confounded_vanishes_after_partialling():
    ds, _ = _gen([P("c", "confounded", 0.3)], n=2000, confounder_strength=0.6)
    raw = stats.spearman(ds.features["c"], ds.target).estimate
    part = stats.partial_spearman(ds.features["c"], ds.target, ds.demographic_matrix()).estimate
    assert raw == pytest.approx(0.3, abs=0.05) and abs(part) < 0.06


def test_outlier_and_subgroup_plants():
    ds, info = _gen([P("o", "outlier_driven", 0.1), P("i", "subgroup_inconsistent", 0.2)], n=1000)
    entry = {e["name"]: e for e in info["planted"]}
    o = ds.features["o"]
    who = ds.participant_id == entry["o"]["outlier_participant"]
    bulk = stats.spearman(o[~who], ds.target[~who]).estimate
    assert stats.spearman(o, ds.target).estimate > 0 > bulk
    med = np.median(ds.target)
    lo, hi = ds.target <= med, ds.target > med
    r_lo = stats.spearman(ds.features["i"][lo], ds.target[lo]).estimate
    r_hi = stats.spearman(ds.features["i"][hi], ds.target[hi]).estimate
    assert r_lo * r_hi < 0


def test_missingness_and_repeated_measures():
    ds, info = _gen(n=200, n_rows=300, noise=10, missingness=0.25)
    assert ds.n_rows == 300 and ds.n_participants == 200
    assert info["repeated_measures"] and ds.group is not None
    for c in ds.candidate_names():
        assert ds.missing_fraction(c) == pytest.approx(0.25, abs=1 / 300)
    per = np.unique(ds.participant_id, return_counts=True)[1]
    assert per.max() <= 4


def test_deterministic_and_seed_sensitive():
    a, ia = _gen([P("s", "linear_signal", 0.3)], seed=4)
    b, ib = _gen([P("s", "linear_signal", 0.3)], seed=4)
    c, _ = _gen([P("s", "linear_signal", 0.3)], seed=5)
    np.testing.assert_array_equal(a.features["s"], b.features["s"])
    assert ia == ib
    assert not np.array_equal(a.features["s"], c.features["s"])


def test_null_calibration():
    """Noise features are independent of the target: about 5% reach p < 0.05."""
    hits = total = 0
    for seed in range(100):
        ds, _ = _gen(n=200, noise=20, seed=seed)
        for c in ds.candidate_names():
            hits += stats.spearman(ds.features[c], ds.target).p_value < 0.05
            total += 1
    assert 0.03 <= hits / total <= 0.07


@pytest.mark.parametrize("bad", [
    {"planted": [P("x", "linear_signal", 0.2), P("x", "linear_signal", 0.3)]},
    {"missingness": 1.5},
    {"planted": [P("x", "subgroup_inconsistent", 0.7)]},
    {"planted": [P("x", "confounded", 0.5)], "confounder_strength": 0.5},
    {"planted": [P("x", "linear_signal", 0.9)], "task_type": "classification"},
    {"planted": [P("x", "wobbly", 0.2)]},
])
def test_infeasible_specs(bad):
    with pytest.raises(ConfigError):
        synth.generate(synth.CohortSpec(n_participants=100, seed=0, **bad))


def test_presets_shapes():
    ds, info = synth.generate(synth.wearme_shape())
    assert ds.n_participants == 1078 and len(ds.candidate_names()) == 71
    ds, _ = synth.generate(synth.dwb_shape())
    assert ds.n_participants == 7497 and len(ds.candidate_names()) == 197
    assert set(synth.PRESETS) == {"dwb", "globem", "wearme"}


@pytest.mark.slow
def test_globem_preset_shape():
    ds, info = synth.generate(synth.globem_shape())
    assert (ds.n_rows, ds.n_participants, len(ds.candidate_names())) == (704, 497, 5508)
    assert info["mean_missingness"] == pytest.approx(0.546, abs=0.02)


def test_write_cohort_round_trip(tmp_path):
    ds, info = _gen([P("s", "linear_signal", 0.4)], n=60, n_rows=90, missingness=0.1)
    synth.write_cohort(ds, info, tmp_path, ",")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["planted"][0]["name"] == "s"
    assert set(manifest) >= {"spec", "planted", "noise_features", "composites", "n_rows"}
    roles = tabular.ColumnRoles.from_mapping(yaml.safe_load((tmp_path / "roles.yaml").read_text()))
    back = tabular.load_table(tmp_path / "data.csv", roles)
    assert back.n_rows == 90 and set(back.candidate_names()) == set(ds.candidate_names())
    np.testing.assert_allclose(back.features["s"], ds.features["s"], equal_nan=True)
    np.testing.assert_allclose(back.target, ds.target)


def test_spec_mapping_round_trip():
    spec = synth.wearme_shape(seed=3)
    assert synth.CohortSpec.from_mapping(spec.to_mapping()) == spec
