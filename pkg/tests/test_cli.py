from __future__ import annotations

import hashlib
import json
import shutil
from pathlib import Path

import pytest

from flowpix import cli, pipeline
from flowpix.ingest import ingest_files
from flowpix.synth import proportional_counts

TINY = {
    "seed": 11,
    "paths": {"workdir": "run"},
    "model": {"base_channels": 2, "blocks": 1, "window": 2, "dtype": "float64"},
    "train": {"epochs": 2, "learning_rate": 0.01, "batch_size": 16},
    "synth": {"counts": {"DDoS": 1200, "DoS": 1000, "Normal": 300, "Reconnaissance": 300, "Theft": 20}},
}


def _config(root: Path, doc: dict = TINY) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    path = root / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


def _digests(root: Path) -> dict[str, str]:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _config(root)
    assert cli.main(["pipeline", "-c", str(cfg)]) == 0
    return cfg, root / "run"


def test_pipeline_writes_every_artifact(run):
    _, work = run
    for rel in ("synthetic.csv", "sampled.csv", "summary.json", "stats.json", "images/manifest.json",
                "images/ddos.img", "checkpoints/resnet.ckpt", "checkpoints/inception.json",
                "reports/train_xception.json", "reports/metrics_inception.json", "reports/confusion_resnet.csv",
                "reports/comparison.csv", "reports/methods.csv"):
        assert (work / rel).is_file(), rel


def test_report_has_one_row_per_backbone(run):
    _, work = run
    lines = (work / "reports" / "comparison.csv").read_text().splitlines()
    assert lines[0] == "model,train_acc,train_f1,val_acc,val_f1"
    assert sorted(line.split(",")[0] for line in lines[1:]) == ["Inception + LSTM", "Resnet + LSTM",
                                                                "Xception + LSTM"]


def test_evaluate_reproduces_best_epoch_metrics(run):
    _, work = run
    for kind in ("xception", "inception", "resnet"):
        train_doc = json.loads((work / "reports" / f"train_{kind}.json").read_text())
        metrics = json.loads((work / "reports" / f"metrics_{kind}.json").read_text())
        assert metrics["confusion_matrix"] == train_doc["best_val_confusion"]
        assert metrics["metrics"]["accuracy"] == train_doc["best_val_accuracy"]
        assert metrics["metrics"]["weighted_f1"] == train_doc["best_val_f1"]
        assert train_doc["checkpoint"] == f"checkpoints/{kind}.ckpt"


def test_featurize_counts_follow_records(run):
    _, work = run
    manifest = json.loads((work / "images" / "manifest.json").read_text())
    summary = json.loads((work / "summary.json").read_text())
    assert manifest["counts"] == {k: v // 48 for k, v in summary["sampled"]["counts"].items()}


def test_full_fraction_keeps_every_record(run):
    _, work = run
    summary = json.loads((work / "summary.json").read_text())
    assert summary["sampled"]["counts"] == {"DDoS": 1200, "DoS": 1000, "Others": 600}
    assert summary["excluded_rows"] == 20
    assert len(ingest_files([work / "sampled.csv"], features=summary["features"]).table) == 2800


def test_rerunning_stages_is_idempotent(run):
    cfg, work = run
    before = _digests(work)
    for cmd in (["ingest"], ["featurize"], ["train", "-b", "resnet"], ["evaluate"], ["report"]):
        assert cli.main(cmd + ["-c", str(cfg)]) == 0
    assert _digests(work) == before


def test_corrupt_stats_file_needs_force(run, tmp_path, capsys):
    cfg, work = run
    shutil.copytree(work, tmp_path / "run")
    local = _config(tmp_path)
    stats = tmp_path / "run" / "stats.json"
    stats.write_text("garbage")
    assert cli.main(["featurize", "-c", str(local)]) == 2
    assert "--force" in capsys.readouterr().err
    assert stats.read_text() == "garbage"
    assert cli.main(["featurize", "-c", str(local), "--force"]) == 0
    assert stats.read_bytes() == (work / "stats.json").read_bytes()


def test_checkpoint_backbone_mismatch_names_both(run, tmp_path, capsys):
    _, work = run
    shutil.copytree(work, tmp_path / "run")
    ckpt = tmp_path / "run" / "checkpoints"
    shutil.copy(ckpt / "resnet.json", ckpt / "xception.json")
    assert cli.main(["evaluate", "-c", str(_config(tmp_path)), "-b", "xception"]) == 1
    err = capsys.readouterr().err
    assert "xception" in err and "resnet" in err


def test_resolution_mismatch_names_both(tmp_path, capsys):
    doc = dict(TINY, model={"backbones": ["inception"], "resolution": 71})
    assert cli.main(["train", "-c", str(_config(tmp_path, doc))]) == 1
    err = capsys.readouterr().err
    assert "71" in err and "75" in err


def test_ingest_prints_summary_with_reference_class_shares(tmp_path, capsys):
    data = tmp_path / "flows.csv"
    assert cli.main(["synth", "--records", "30000", "-o", str(data), "--workdir", str(tmp_path / "w")]) == 0
    assert cli.main(["ingest", "-i", str(data), "--workdir", str(tmp_path / "w")]) == 0
    out = capsys.readouterr().out
    shares = json.loads(out[out.index("{"):])["percentages"]
    for name, pct in {"DDoS": 44.71, "DoS": 38.29, "Others": 17.00}.items():
        assert abs(shares[name] - pct) <= 0.05


def test_synth_is_byte_identical_and_honours_counts(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert cli.main(["synth", "--records", "3000", "--seed", "3", "-o", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    counts = proportional_counts(3000)
    lines = a.read_text().splitlines()[1:]
    for name, n in counts.items():
        assert sum(1 for line in lines if line.endswith("," + name)) == n


def test_synth_rejects_small_counts(tmp_path, capsys):
    doc = dict(TINY, synth={"counts": {"DDoS": 47, "DoS": 100, "Normal": 100}})
    assert cli.main(["synth", "-c", str(_config(tmp_path, doc))]) == 1
    assert "48" in capsys.readouterr().err


def test_missing_dataset_is_a_data_error(tmp_path, capsys):
    assert cli.main(["ingest", "-i", str(tmp_path / "nope.csv"), "--workdir", str(tmp_path)]) == 2
    assert "nope.csv" in capsys.readouterr().err
    assert cli.main(["featurize", "--workdir", str(tmp_path)]) == 2
    assert cli.main(["train", "--workdir", str(tmp_path)]) == 2


def test_usage_errors_exit_one(tmp_path):
    assert cli.main([]) == 1
    assert cli.main(["train", "--epochs", "many"]) == 1
    bad = tmp_path / "cfg.json"
    bad.write_text('{"colour": 1}')
    assert cli.main(["report", "-c", str(bad)]) == 1


def test_internal_error_exits_three(run, monkeypatch, capsys):
    cfg, _ = run

    def boom(*_a, **_k):
        raise ZeroDivisionError("boom")

    monkeypatch.setattr(pipeline, "run_report", boom)
    assert cli.main(["report", "-c", str(cfg)]) == 3
    assert "internal error" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "pipeline" in capsys.readouterr().out
