import json
import os
import subprocess
import sys

import pytest
import yaml

from biomarker_audit import cli, pipeline

SPEC = {
    "n_participants": 300, "n_noise_features": 12, "seed": 3, "missingness": 0.05,
    "planted": [
        {"name": "signal", "kind": "linear_signal", "target_rho": 0.4},
        {"name": "glucose_sq", "kind": "monotone_tautology", "target_rho": 0.99},
        {"name": "ratio", "kind": "composite", "target_rho": 0.3,
         "params": {"components": ["ratio_num", "ratio_den"], "component_rhos": [0.3, 0.1]}},
    ],
}


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    d = tmp_path_factory.mktemp("cohort")
    (d / "spec.yaml").write_text(yaml.safe_dump(SPEC))
    assert cli.main(["synth", "--config", str(d / "spec.yaml"), "--out", str(d)]) == 0
    return d


def _config(cohort, tmp_path, **extra):
    raw = {"input": str(cohort / "data.csv"), "seed": 11, "out": str(tmp_path / "out"),
           "roles": yaml.safe_load((cohort / "roles.yaml").read_text()),
           "battery": {"n_resamples": 200}, "robustness": {"n_seeds": 2, "n_boot": 10}}
    raw.update(extra)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def test_synth_outputs(cohort):
    assert {p.name for p in cohort.iterdir()} >= {"data.csv", "manifest.json", "roles.yaml"}
    manifest = json.loads((cohort / "manifest.json").read_text())
    assert [e["name"] for e in manifest["planted"]] == ["signal", "glucose_sq", "ratio"]


def test_synth_preset(tmp_path):
    assert cli.main(["synth", "--preset", "wearme", "--seed", "1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "data.csv").exists()


def test_synth_needs_exactly_one_source(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    spec = tmp_path / "s.yaml"
    spec.write_text(yaml.safe_dump({"n_participants": 50}))
    assert cli.main(["synth", "--config", str(spec), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_profile_and_screen(cohort, tmp_path):
    cfg = _config(cohort, tmp_path)
    assert cli.main(["profile", "--config", str(cfg)]) == 0
    prof = json.loads((tmp_path / "out" / "profile.json").read_text())
    assert prof
    assert cli.main(["screen", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    assert (out / "screening.tsv").exists()
    doc = json.loads((out / "screen.json").read_text())
    assert "glucose_sq" in json.dumps(doc)  # flagged by the overlap scan


def test_report_end_to_end(cohort, tmp_path):
    cfg = _config(cohort, tmp_path)
    assert cli.main(["report", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    for name in ("battery.tsv", "gates.tsv", "report.md", "report.json", "factsheet.json",
                 "forest_plot.png"):
        assert (out / name).exists(), name
    doc = json.loads((out / "report.json").read_text())
    assert doc["consistent"] and doc["mismatches"] == []
    ok, _ = pipeline.check_report(out / "report.json", out / "factsheet.json")
    assert ok


def test_check_report_detects_corruption(cohort, tmp_path):
    cfg = _config(cohort, tmp_path)
    assert cli.main(["report", "--config", str(cfg), "--no-figures"]) == 0
    out = tmp_path / "out"
    assert not (out / "forest_plot.png").exists()
    doc = json.loads((out / "report.json").read_text())
    for s in doc["sections"]:
        if s["facts"]:
            key, a, b = s["facts"][0]
            old = s["text"][a:b]
            new = ("9" if old[0] != "9" else "8") + old[1:]
            s["text"] = s["text"][:a] + new + s["text"][b:]
            break
    (out / "report.json").write_text(json.dumps(doc))
    ok, mism = pipeline.check_report(out / "report.json", out / "factsheet.json")
    assert not ok and len(mism) == 1


def test_robustness_command(cohort, tmp_path):
    cfg = _config(cohort, tmp_path)
    assert cli.main(["robustness", "--config", str(cfg)]) == 0
    doc = json.loads((tmp_path / "out" / "robustness.json").read_text())
    assert set(doc["deltas"]) == {"checked", "random_pruned"}
    assert (tmp_path / "out" / "robustness.png").exists()


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "audit.jsonl"}


def test_byte_identical_across_threads(cohort, tmp_path):
    cfg = _config(cohort, tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["report", "--config", str(cfg), "--out", str(a), "--threads", "1"]) == 0
    assert cli.main(["report", "--config", str(cfg), "--out", str(b), "--threads", "4"]) == 0
    ta, tb = _tree(a), _tree(b)
    assert ta.keys() == tb.keys() and len(ta) >= 6
    assert [k for k in ta if ta[k] != tb[k]] == []


def test_exit_codes(cohort, tmp_path, capsys):
    assert cli.main(["profile", "--config", str(_config(cohort, tmp_path, seed="x"))]) == cli.EXIT_CONFIG
    assert cli.main(["profile", "--config", str(_config(cohort, tmp_path, bogus=1))]) == cli.EXIT_CONFIG
    missing = _config(cohort, tmp_path, input=str(tmp_path / "nope.csv"))
    assert cli.main(["profile", "--config", str(missing)]) == cli.EXIT_DATA
    no_seed = tmp_path / "ns.yaml"
    raw = yaml.safe_load(_config(cohort, tmp_path).read_text())
    raw.pop("seed")
    no_seed.write_text(yaml.safe_dump(raw))
    assert cli.main(["profile", "--config", str(no_seed)]) == cli.EXIT_CONFIG
    assert cli.main(["profile", "--config", str(no_seed), "--seed", "2"]) == 0
    assert "error" in capsys.readouterr().err


def test_module_entry_point(cohort, tmp_path):
    env = dict(os.environ)
    proc = subprocess.run([sys.executable, "-m", "biomarker_audit", "--help"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0 and "synth" in proc.stdout
