import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biomarker_audit import stats, synth, tabular
from biomarker_audit.errors import ConfigError, DataError

import oracles


def _write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _ds(features, target=None, pid=None, group=None, task="regression"):
    n = len(next(iter(features.values())))
    target = np.arange(n, dtype=float) if target is None else np.asarray(target, float)
    pid = np.array([f"p{i}" for i in range(n)]) if pid is None else np.asarray(pid)
    meta = {k: tabular.FeatureMeta(k, "raw", (), float(np.isnan(np.asarray(v, float)).mean()))
            for k, v in features.items()}
    return tabular.Dataset({k: np.asarray(v, float) for k, v in features.items()}, target, task,
                           pid, meta, group=None if group is None else np.asarray(group))


# ---------------------------------------------------------------------------
# load_table
# ---------------------------------------------------------------------------
def test_load_minimal(tmp_path):
    p = _write(tmp_path, "id,x,phq\na,1,3\nb,NA,4\nc,2,5\n")
    ds = tabular.load_table(p, tabular.ColumnRoles(target="phq", id="id", feature=("x",)))
    assert ds.n_rows == 3
    assert ds.missing_fraction("x") == pytest.approx(1 / 3)
    assert ds.candidate_names() == ["x"]
    np.testing.assert_array_equal(ds.target, [3, 4, 5])


def test_load_missing_named_column(tmp_path):
    p = _write(tmp_path, "id,x,phq\na,1,3\n")
    with pytest.raises((ConfigError, DataError)):
        tabular.load_table(p, tabular.ColumnRoles(target="phq", id="id", feature=("sleep_var",)))


def test_load_drops_missing_target_and_encodes(tmp_path):
    text = "pid,wave,age,sex,y,f1,f2\n" + "\n".join([
        "a,1,30,F,1,0.5,",
        "a,2,31,F,,0.7,1",
        "b,1,,M,0,0.1,2",
        "c,1,50,M,1,NaN,3",
        "d,1,40,F,0,0.4,4",
    ])
    p = _write(tmp_path, text, "t.tsv")
    roles = tabular.ColumnRoles.from_mapping({
        "id": "pid", "target": "y", "task_type": "classification", "group": "wave",
        "demographic": ["age", "sex"], "subgroup": "sex", "exclude": ["f2"]})
    ds = tabular.load_table(p, roles)
    assert ds.n_rows == 4 and ds.notes["n_target_missing_dropped"] == 1
    assert set(np.unique(ds.target)) == {0.0, 1.0}
    assert "sex=M" in ds.demographics and ds.demographics["age"][1] == 40.0  # median fill
    assert ds.candidate_names() == ["f1"] and ds.excluded_names() == ["f2"]
    assert ds.n_participants == 4


def test_load_rejects_non_binary_classification(tmp_path):
    p = _write(tmp_path, "y,f\n1,1\n2,2\n3,3\n")
    with pytest.raises(DataError):
        tabular.load_table(p, tabular.ColumnRoles(target="y", task_type="classification"))


def test_roles_validation():
    with pytest.raises(ConfigError):
        tabular.ColumnRoles.from_mapping({"target": "y", "colour": "x"})
    with pytest.raises(ConfigError):
        tabular.ColumnRoles.from_mapping({"id": "x"})


def test_dataset_arrays_are_read_only():
    ds = _ds({"a": [1.0, 2.0, 3.0]})
    with pytest.raises(ValueError):
        ds.features["a"][0] = 9


# ---------------------------------------------------------------------------
# missingness
# ---------------------------------------------------------------------------
def test_drop_high_missingness_boundary():
    nan = np.nan
    eight = [nan] * 8 + [1, 2]
    seven = [nan] * 7 + [1, 2, 3]
    ds = _ds({"eight": eight, "seven": seven, "full": list(range(10))})
    out = tabular.drop_high_missingness(ds, 0.70)
    assert set(out.candidate_names()) == {"seven", "full"}
    assert list(out.notes["dropped_missingness"]) == ["eight"]
    again = tabular.drop_high_missingness(out, 0.70)
    assert again.candidate_names() == out.candidate_names()


def test_drop_on_globem_shape():
    spec = synth.CohortSpec(n_participants=120, n_rows=170, n_noise_features=200,
                            missingness=0.546, missingness_spread=0.3, seed=2)
    ds, _ = synth.generate(spec)
    out = tabular.drop_high_missingness(ds, 0.70)
    assert 0 < len(out.candidate_names()) < 200
    assert all(out.missing_fraction(c) <= 0.70 for c in out.candidate_names())


# ---------------------------------------------------------------------------
# imputation
# ---------------------------------------------------------------------------
def test_median_examples():
    nan = np.nan
    out = tabular.impute_median(_ds({"a": [1, nan, 3]}))
    np.testing.assert_array_equal(out.features["a"], [1, 2, 3])
    grouped = _ds({"a": [1, nan, 10, 10]}, group=["g", "g", "h", "h"])
    np.testing.assert_array_equal(tabular.impute_median(grouped).features["a"], [1, 1, 10, 10])
    with pytest.raises(DataError):
        tabular.impute_median(_ds({"a": [nan, nan, nan]}))


def test_median_order_independent():
    rng = np.random.default_rng(0)
    cols = {c: np.where(rng.random(20) < 0.2, np.nan, rng.normal(size=20)) for c in "abc"}
    ds = _ds(cols)
    a = tabular.impute_median(ds, ["a", "b", "c"])
    b = tabular.impute_median(ds, ["c", "a", "b"])
    for c in "abc":
        np.testing.assert_array_equal(a.features[c], b.features[c])


def test_knn_examples():
    nan = np.nan
    ds = _ds({"a": [1.0, 1.0, 1.0, 1.0, 9.0], "b": [4.0, 4.0, 4.0, nan, 7.0]})
    assert tabular.impute_knn(ds, k=3).features["b"][3] == 4.0
    dup = _ds({"a": [1.0, 2.0, 5.0, 2.0], "b": [3.0, 8.0, 0.0, nan]})
    assert tabular.impute_knn(dup, k=1).features["b"][3] == 8.0


@pytest.mark.parametrize("seed", range(5))
def test_knn_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(20, 4))
    M[rng.random(M.shape) < 0.15] = np.nan
    M[0, :] = rng.normal(size=4)  # keep every column partly observed
    ds = _ds({f"c{j}": M[:, j] for j in range(4)})
    got = tabular.impute_knn(ds, k=3)
    ref = oracles.knn_impute(M, 3)
    for j in range(4):
        np.testing.assert_allclose(got.features[f"c{j}"], ref[:, j], atol=1e-12)


def test_iterative_examples():
    x = np.arange(1.0, 11.0)
    ds = _ds({"x": x, "y": 2 * x})
    np.testing.assert_array_equal(tabular.impute_iterative(ds).features["y"], 2 * x)
    y = 2 * x
    y[4] = np.nan
    out = tabular.impute_iterative(_ds({"x": x, "y": y}))
    assert out.features["y"][4] == pytest.approx(10.0, abs=1e-6)


def test_iterative_preserves_association():
    rng = np.random.default_rng(3)
    n = 300
    t = rng.normal(size=n)
    cols = {f"f{j}": 0.5 * t + rng.normal(size=n) for j in range(4)}
    complete = _ds(cols, target=t)
    holed = {k: np.where(rng.random(n) < 0.10, np.nan, v) for k, v in cols.items()}
    out = tabular.impute_iterative(_ds(holed, target=t))
    for k in cols:
        before = stats.spearman(complete.features[k], t).estimate
        after = stats.spearman(out.features[k], t).estimate
        assert abs(before - after) < 0.05


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["median", "knn", "iterative"]))
def test_imputers_never_touch_observed_cells(seed, name):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(15, 3))
    M[rng.random(M.shape) < 0.2] = np.nan
    M[:3] = rng.normal(size=(3, 3))
    ds = _ds({f"c{j}": M[:, j] for j in range(3)})
    out = tabular.IMPUTERS[name](ds)
    for j in range(3):
        obs = ~np.isnan(M[:, j])
        np.testing.assert_array_equal(out.features[f"c{j}"][obs], M[obs, j])
        assert not np.isnan(out.features[f"c{j}"]).any()


# ---------------------------------------------------------------------------
# dedup
# ---------------------------------------------------------------------------
def test_dedup_distinct_is_identity():
    ds = _ds({"a": [1.0, 2.0, 3.0]})
    assert tabular.dedup_one_per_participant(ds, 0) is ds


def test_dedup_globem_shape():
    spec = synth.CohortSpec(n_participants=497, n_rows=704, n_noise_features=3, seed=0)
    ds, _ = synth.generate(spec)
    out = tabular.dedup_one_per_participant(ds, seed=4)
    assert out.n_rows == 497
    assert np.unique(out.participant_id).size == 497
    again = tabular.dedup_one_per_participant(ds, seed=4)
    np.testing.assert_array_equal(out.features["noise_0000"], again.features["noise_0000"])
    other = tabular.dedup_one_per_participant(ds, seed=5)
    assert other.n_rows == 497
    # each output row is an input row verbatim
    rows = {(p, v) for p, v in zip(ds.participant_id, ds.features["noise_0000"])}
    assert all((p, v) in rows for p, v in zip(out.participant_id, out.features["noise_0000"]))
