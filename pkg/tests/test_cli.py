import csv
import filecmp
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from anomography.cli import ExperimentDir, main, traffic_from_csv, traffic_to_csv
from anomography.io import read_json, read_rates

SMALL = ["--trials", "4", "--T", "20", "--fractions", "0.2,1.0", "--seed", "5"]


def _run(*argv):
    return main([str(a) for a in argv])


def _tree(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            out[os.path.relpath(p, root)] = p
    return out


def _accuracy(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_traffic_csv_round_trip():
    rng = np.random.default_rng(0)
    N = rng.poisson(0.7, size=(5, 4, 4))
    for t in range(5):
        np.fill_diagonal(N[t], 0)
    np.testing.assert_array_equal(traffic_from_csv(traffic_to_csv(N), 5, 4), N)


def test_simulate_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("simulate", "--out", a, *SMALL) == 0
    assert _run("simulate", "--out", b, *SMALL) == 0
    ta, tb = _tree(a), _tree(b)
    assert sorted(ta) == sorted(tb)
    for rel in ta:
        assert filecmp.cmp(ta[rel], tb[rel], shallow=False), rel
    # one observation set per fraction per trial
    for i in range(4):
        files = sorted(os.listdir(a / "trials" / f"trial_{i:05d}"))
        assert [f for f in files if f.startswith("obs_")] == ["obs_0.2000.csv", "obs_1.0000.csv"]
    manifest = read_json(a / "manifest.json")
    assert set(manifest) == {"config", "config_hash", "version"}


def test_simulated_artifacts_match_library(tmp_path):
    from anomography.experiments import ExperimentConfig
    from anomography.netsim import ScenarioSpec, simulate_trial

    _run("simulate", "--out", tmp_path, *SMALL)
    cfg = ExperimentConfig(scenario=ScenarioSpec(seed=5), T=20)
    ed = ExperimentDir(str(tmp_path))
    for i in range(4):
        trial = simulate_trial(cfg.scenario, i, cfg.T)
        back = ed.read_trial(i)
        np.testing.assert_array_equal(back.truth, trial.truth)
        np.testing.assert_array_equal(back.baseline, trial.baseline)
        np.testing.assert_array_equal(back.traffic, trial.traffic)
        assert back.anomalous == trial.anomalous and back.flowmap == trial.flowmap
        np.testing.assert_array_equal(read_rates(ed.path("trials", f"trial_{i:05d}", "baseline.csv"), 10),
                                      trial.baseline)


def test_label_file_has_about_half_positives(tmp_path):
    assert _run("simulate", "--out", tmp_path, "--trials", 200, "--T", 1, "--fractions", "0.0") == 0
    with open(tmp_path / "labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 200
    pos = sum(int(r["anomalous"]) for r in rows)
    # 3 sigma of Binomial(200, 0.5), with a small allowance for coins that change nothing
    assert 100 - 3 * 7.1 - 5 <= pos <= 100 + 3 * 7.1


def test_full_pipeline_and_restart(tmp_path):
    out = tmp_path / "exp"
    assert _run("run", "--out", out, *SMALL, "--method", "MRE-HP", "--method", "ORACLE") == 0
    acc = _accuracy(out / "accuracy.csv")
    assert [(r["method"], r["fraction"]) for r in acc] == [
        ("MRE-HP", "0.2"), ("MRE-HP", "1.0"), ("ORACLE", "0.2"), ("ORACLE", "1.0")]
    psi = read_json(out / "psi.json")
    assert len(psi["trials"]) == 16
    c = psi["critical_value"]
    for row in acc:
        recs = [t for t in psi["trials"] if t["method"] == row["method"] and t["fraction"] == float(row["fraction"])]
        tp = sum(t["label"] and t["reject"] for t in recs)
        tn = sum(not t["label"] and not t["reject"] for t in recs)
        assert (int(row["tp"]), int(row["tn"])) == (tp, tn)
        assert int(row["tp"]) + int(row["tn"]) + int(row["fp"]) + int(row["fn"]) == 4
        assert float(row["accuracy"]) == (tp + tn) / 4
        for t in recs:
            assert t["reject"] == (float(t["psi"]) > c)
    summary = read_json(out / "summary.json")
    assert {"accuracy", "fit", "roc"} <= set(summary)

    before = (out / "accuracy.csv").read_bytes()
    victim = out / "fits" / "MRE-HP" / "0.2000" / "trial_00002.json"
    kept = victim.read_bytes()
    victim.unlink()
    assert _run("test", "--out", out) == 1  # missing fit reported
    assert _run("fit", "--out", out) == 0
    redone, orig = json.loads(victim.read_bytes()), json.loads(kept)
    redone["record"].pop("seconds"), orig["record"].pop("seconds")
    assert redone == orig
    assert _run("test", "--out", out) == 0
    assert (out / "accuracy.csv").read_bytes() == before


def test_fit_json_round_trips(tmp_path):
    _run("simulate", "--out", tmp_path, *SMALL)
    assert _run("fit", "--out", tmp_path, "--method", "MLEM") == 0
    data = read_json(tmp_path / "fits" / "MLEM" / "0.2000" / "trial_00000.json")
    lam = np.array(data["lambda_hat"])
    assert lam.shape == (10, 10)
    stats = [[float(v) for v in row] for row in data["edge_statistics"]]
    assert json.loads(json.dumps(data)) == data
    assert all(v >= -1e-8 for row in stats for v in row)


def test_missing_artifacts_do_not_abort_batch(tmp_path):
    _run("simulate", "--out", tmp_path, *SMALL)
    os.remove(tmp_path / "trials" / "trial_00001" / "obs_0.2000.csv")
    os.remove(tmp_path / "trials" / "trial_00003" / "traffic.csv")
    assert _run("fit", "--out", tmp_path, "--method", "MLEM") == 1
    fits = tmp_path / "fits" / "MLEM"
    assert (fits / "1.0000" / "trial_00001.json").exists()
    assert not (fits / "0.2000" / "trial_00001.json").exists()
    assert (fits / "0.2000" / "trial_00000.json").exists() and (fits / "0.2000" / "trial_00002.json").exists()
    assert not (fits / "1.0000" / "trial_00003.json").exists()


def test_stage_errors(tmp_path, capsys):
    assert _run("fit", "--out", tmp_path / "none") == 2
    assert "run simulate first" in capsys.readouterr().err
    _run("simulate", "--out", tmp_path, *SMALL)
    assert _run("fit", "--out", tmp_path, "--trials", 9) == 2
    assert _run("fit", "--out", tmp_path, "--seed", 6) == 2


def test_degenerate_roc_reported(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trials": 3, "T": 10, "fractions": [1.0], "force_label": False,
                               "methods": ["ORACLE"]}))
    assert _run("run", "--out", tmp_path / "e", "--config", cfg) == 1
    assert "labels are all False" in capsys.readouterr().err
    (entry,) = read_json(tmp_path / "e" / "summary.json")["roc"]
    assert entry["error"] == "degenerate labels" and entry["positives"] == 0
    assert not (tmp_path / "e" / "fraction_1.0000").exists()


def test_roc_files(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trials": 6, "T": 30, "fractions": [1.0], "methods": ["MRE-HP"],
                               "scenario": {"seed": 2}}))
    out = tmp_path / "e"
    _run("run", "--out", out, "--config", cfg)
    labels = [int(r["anomalous"]) for r in csv.DictReader(open(out / "labels.csv"))]
    assert 0 < sum(labels) < 6
    path = out / "fraction_1.0000" / "roc_MRE-HP.csv"
    assert path.read_text().splitlines()[0] == "threshold,fpr,tpr"
    (entry,) = read_json(out / "summary.json")["roc"]
    assert 0 <= entry["auc"] <= 1 and set(entry["operating_point"]) == {"fpr", "tpr", "threshold"}


def test_ingest_command(tmp_path):
    edges = tmp_path / "e.csv"
    edges.write_text("t,src,dst,count\n0,a,b,5\n1,a,b,5\nbad,row\n")
    assert _run("ingest", edges, "--out", tmp_path / "o", "--baseline-windows", "0:2", "--strict") == 2
    assert _run("ingest", edges, "--out", tmp_path / "o", "--baseline-windows", "0:2") == 0
    info = read_json(tmp_path / "o" / "ingest.json")
    assert info["nodes"] == ["a", "b"] and info["T"] == 2
    assert info["skipped"][0]["line"] == 4
    np.testing.assert_array_equal(read_rates(tmp_path / "o" / "baseline.csv"), [[0, 5.0], [0, 0]])
    text = (tmp_path / "o" / "observations.csv").read_text().splitlines()
    assert "0,row,0,-1,5" in text and "1,col,1,-1,5" in text


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "anomography.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
