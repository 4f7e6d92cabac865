import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from qosforecast import cli, synth
from qosforecast.errors import DivergedLoss

RUN = {
    "days": 3,
    "model": {"w": 20, "hidden_per_direction": 4, "mdn_hidden": [8], "clf_hidden": [4]},
    "train": {"epochs": 2, "train_stride": 4},
    "decision": {"calib_stride": 2},
}


def write_config(tmp: Path, extra=None) -> str:
    p = tmp / "run.json"
    p.write_text(json.dumps({**RUN, **(extra or {})}))
    return str(p)


def run_chain(root: Path, seed: int = 0) -> dict[str, str]:
    """generate -> prepare -> train -> calibrate -> predict (both modes) -> evaluate."""
    root.mkdir(parents=True, exist_ok=True)
    conf = ["--config", write_config(root), "--seed", str(seed)]
    d, m = root / "data", root / "model" / "m.qfck"
    data = ["--data", str(d / "metrics.csv")]
    alerts = ["--alerts", str(d / "alerts.jsonl")]
    steps = [
        ["generate", "--out", str(d)],
        ["prepare", *data, *alerts, "--out", str(root / "prep")],
        ["train", *data, *alerts, "--out", str(m)],
        ["calibrate", "--checkpoint", str(m), *data, *alerts],
        ["predict", "--checkpoint", str(m), *data, "--out", str(root / "batch")],
        ["predict", "--checkpoint", str(m), *data, "--out", str(root / "stream"), "--stream"],
        ["evaluate", "--checkpoint", str(m), *data, *alerts, "--truth", str(d / "truth.json"),
         "--out", str(root / "eval" / "report.json"), "--pr-csv", str(root / "eval" / "pr.csv")],
    ]
    for argv in steps:
        assert cli.main([argv[0], *conf, *argv[1:]]) == 0, argv[0]
    return hash_tree(root)


def hash_tree(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "run.json"}


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("chain")
    return root, run_chain(root)


def test_chain_writes_expected_files(chain):
    _, hashes = chain
    for name in ("data/metrics.csv", "data/alerts.jsonl", "data/truth.json", "data/schema.json",
                 "prep/prepared.json", "prep/labels.jsonl", "model/m.qfck", "model/m.qfck.json",
                 "model/m.qfck.report.json", "batch/scores.jsonl", "batch/events.json",
                 "eval/report.json", "eval/pr.csv"):
        assert name in hashes


def test_same_seed_reruns_are_byte_identical(chain, tmp_path):
    _, first = chain
    assert run_chain(tmp_path / "again") == first


def test_different_seed_changes_outputs(chain, tmp_path):
    _, first = chain
    other = run_chain(tmp_path / "other", seed=1)
    assert other["data/metrics.csv"] != first["data/metrics.csv"]


def test_stream_and_batch_predictions_identical(chain):
    _, hashes = chain
    assert hashes["batch/scores.jsonl"] == hashes["stream/scores.jsonl"]
    assert hashes["batch/events.json"] == hashes["stream/events.json"]


def test_report_fields_in_unit_range(chain):
    root, _ = chain
    rep = json.loads((root / "eval" / "report.json").read_text())
    assert 0 <= rep["auc_pr"] <= 1 and 0 <= rep["theta"] <= 1
    for key in ("precision", "recall", "f1"):
        assert 0 <= rep[key] <= 1
    assert sorted(rep["per_percentile"]) == ["95", "97", "99"]
    for r in rep["per_percentile"].values():
        assert 0 <= r["f1"] <= 1
    for m in rep["detection"]["outages"]:
        assert m["display"] == "-" or m["display"].endswith("%")
    with (root / "eval" / "pr.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(0 <= float(r["precision"]) <= 1 for r in rows)


def test_checkpoint_sidecar_holds_theta(chain):
    root, _ = chain
    side = json.loads((root / "model" / "m.qfck.json").read_text())
    assert 0 <= side["decision"]["theta"] <= 1
    assert side["decision"]["youden_j"] is not None


def test_recalibration_is_idempotent(chain):
    root, _ = chain
    m = root / "model" / "m.qfck"
    before = m.with_name("m.qfck.json").read_text()
    d = root / "data"
    assert cli.main(["calibrate", "--config", write_config(root), "--checkpoint", str(m),
                     "--data", str(d / "metrics.csv"), "--alerts", str(d / "alerts.jsonl")]) == 0
    assert m.with_name("m.qfck.json").read_text() == before


def test_threshold_T_changes_tau_not_weights(chain, tmp_path):
    root, _ = chain
    m, d = root / "model" / "m.qfck", root / "data"
    base = ["predict", "--config", write_config(root), "--checkpoint", str(m), "--data", str(d / "metrics.csv")]
    assert cli.main([*base, "--out", str(tmp_path / "p"), "--threshold-T", "99"]) == 2  # needs --reference
    weights = m.read_bytes()
    assert cli.main([*base, "--out", str(tmp_path / "p"), "--threshold-T", "99",
                     "--reference", str(d / "metrics.csv")]) == 0
    assert m.read_bytes() == weights
    hi = json.loads((tmp_path / "p" / "events.json").read_text())
    lo = json.loads((root / "batch" / "events.json").read_text())
    assert hi["percentile"] == 99.0
    assert all(hi["thresholds"][q] > lo["thresholds"][q] for q in lo["thresholds"])


# -- exit codes ---------------------------------------------------------------

def test_missing_config_exits_2(tmp_path):
    assert cli.main(["generate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert cli.main(["generate", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


def test_bad_config_exits_2(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert cli.main(["generate", "--config", str(p), "--out", str(tmp_path)]) == 2
    p.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["generate", "--config", str(p), "--out", str(tmp_path)]) == 2
    p.write_text(json.dumps({"labels": {"nonsense": 3}}))
    assert cli.main(["generate", "--config", str(p), "--out", str(tmp_path)]) == 2


def test_bad_schema_exits_2(chain, tmp_path):
    root, _ = chain
    d = root / "data"
    bad = tmp_path / "schema.json"
    bad.write_text(json.dumps({"metrics": [{"name": "not_a_column"}]}))
    argv = ["train", "--config", write_config(root), "--data", str(d / "metrics.csv"),
            "--alerts", str(d / "alerts.jsonl"), "--out", str(tmp_path / "m.qfck")]
    assert cli.main([*argv, "--schema", str(bad)]) == 2
    assert cli.main([*argv, "--schema", str(tmp_path / "missing.json")]) == 2


def test_uncalibrated_predict_exits_2(chain, tmp_path):
    root, _ = chain
    d = root / "data"
    conf = ["--config", write_config(root)]
    m = tmp_path / "m.qfck"
    assert cli.main(["train", *conf, "--data", str(d / "metrics.csv"), "--alerts", str(d / "alerts.jsonl"),
                     "--out", str(m)]) == 0
    assert cli.main(["predict", *conf, "--checkpoint", str(m), "--data", str(d / "metrics.csv"),
                     "--out", str(tmp_path / "p")]) == 2


def test_diverged_training_exits_3(chain, tmp_path, monkeypatch):
    root, _ = chain
    d = root / "data"

    def boom(*a, **k):
        raise DivergedLoss("nan")

    monkeypatch.setattr(cli, "fit", boom)
    assert cli.main(["train", "--config", write_config(root), "--data", str(d / "metrics.csv"),
                     "--alerts", str(d / "alerts.jsonl"), "--out", str(tmp_path / "m.qfck")]) == 3


def test_single_class_calibration_exits_4(tmp_path):
    calm = tmp_path / "calm.json"
    calm.write_text(json.dumps(synth.ScenarioConfig(metrics=synth.default_metrics(),
                                                    duration=3 * synth.DAY).to_json()))
    conf = ["--config", write_config(tmp_path)]
    d, m = tmp_path / "d", tmp_path / "m.qfck"
    data = ["--data", str(d / "metrics.csv"), "--alerts", str(d / "alerts.jsonl")]
    assert cli.main(["generate", *conf, "--scenario", str(calm), "--out", str(d)]) == 0
    assert cli.main(["train", *conf, *data, "--out", str(m)]) == 0
    assert cli.main(["calibrate", *conf, "--checkpoint", str(m), *data]) == 4


def test_console_script_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "qosforecast.cli", "generate", "--config",
                          write_config(tmp_path, {"days": 1}), "--out", str(tmp_path / "d")],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "label density" in out.stdout


# -- ablation -----------------------------------------------------------------

def test_ablate_grid_rows_and_determinism(tmp_path):
    extra = {"train": {"epochs": 1, "train_stride": 8}, "decision": {"calib_stride": 4}}
    conf = write_config(tmp_path, extra)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["ablate", "--config", conf, "--out", str(a)]) == 0
    assert cli.main(["ablate", "--config", conf, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    with a.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    assert {(r["encoder"], r["loss"], r["gamma"]) for r in rows} == {
        (e, l, g) for e in ("bilstm", "lstm") for l in ("evl", "bce") for g in ("5", "10")}
    for col in ("auc_pr_mtl", "auc_pr_clf_only", "auc_pr_mdn_only", "f1_mtl"):
        assert all(0 <= float(r[col]) <= 1 for r in rows)
