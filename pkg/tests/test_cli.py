import csv
import json

import pytest

from cqil import cli

TINY_CFG = "image_size: 16\nwidths: [4, 8]\nproj_hidden: 8\nproj_dim: 4\ncls_hidden: 8\nepochs: 3\n"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("ws")
    data = ws / "data"
    assert cli.main(["gen-data", "--out", str(data), "--n-subjects", "4", "--images-per-category", "1",
                     "--image-size", "16", "--seed", "2"]) == 0
    (ws / "cfg.yaml").write_text(TINY_CFG)
    return ws, data


def run_manifest(d):
    return json.loads((d / "run.json").read_text())


def test_gen_data_outputs(workspace):
    ws, data = workspace
    doc = run_manifest(data)
    assert doc["command"] == "gen-data" and doc["seed"] == 2
    for pid in ("P1", "P2.1", "P2.4", "P3"):
        assert (data / "splits" / pid / "train.csv").exists()
    assert cli.verify_manifest(data) == []


def test_gen_data_is_idempotent(workspace, tmp_path):
    _, data = workspace
    assert cli.main(["gen-data", "--out", str(tmp_path), "--n-subjects", "4", "--images-per-category", "1",
                     "--image-size", "16", "--seed", "2"]) == 0
    assert run_manifest(tmp_path)["outputs"] == run_manifest(data)["outputs"]


def test_env_data_root_and_flag_precedence(workspace, tmp_path, monkeypatch):
    _, data = workspace
    monkeypatch.setenv(cli.DATA_ROOT_ENV, str(data))
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(TINY_CFG + "model_variant: model2\nseed: 5\n")
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--protocol", "P1", "--variant", "resnet_baseline",
                     "--epochs", "0", "--out", str(out)]) == 0
    stored = json.loads((out / "config.json").read_text())
    assert stored["model_variant"] == "resnet_baseline"  # flag beats file
    assert stored["seed"] == 5 and stored["epochs"] == 0  # file beats default
    assert (out / "best.ckpt").exists() and (out / "last.ckpt").exists()
    assert cli.verify_manifest(out) == []


def test_full_pipeline(workspace, tmp_path):
    ws, data = workspace
    d = ["--data", str(data)]
    assert cli.main(["train-sr", *d, "--epochs", "1", "--out", str(tmp_path / "sr.ckpt")]) == 0
    assert (tmp_path / "run.json").exists()
    run = tmp_path / "run"
    assert cli.main(["train", *d, "--config", str(ws / "cfg.yaml"), "--protocol", "P3", "--variant", "model4",
                     "--epochs", "1", "--sr", str(tmp_path / "sr.ckpt"), "--out", str(run)]) == 0
    assert cli.main(["eval", *d, "--run", str(run), "--kernel", "3", "--include-clean"]) == 0
    with open(run / "eval" / "metrics.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["protocol", "label", "threshold", "apcer", "bpcer", "acer", "hter", "auc"]
    assert [r["label"] for r in rows] == ["model4", "model4@gauss3x3"]
    assert cli.verify_manifest(run / "eval") == []


def test_degrade_command(workspace, tmp_path):
    _, data = workspace
    out = tmp_path / "deg"
    assert cli.main(["degrade", "--data", str(data), "--in", str(data / "splits" / "P3" / "test.csv"),
                     "--kernel", "3", "--kernel", "5", "--scale", "2", "--out", str(out)]) == 0
    assert (out / "gauss3x3_s2" / "manifest.csv").exists() and (out / "gauss5x5_s2" / "manifest.csv").exists()
    assert cli.verify_manifest(out) == []


def _fake_metrics(d, protocol, label, acer):
    from cqil.metrics import MetricsReport, write_reports
    write_reports([MetricsReport(protocol, 0.5, acer, acer, acer, acer, 0.9, label)], d)


def test_report_adds_protocol2_summary(tmp_path):
    for i, acer in enumerate((0.1, 0.2, 0.3, 0.4), start=1):
        _fake_metrics(tmp_path / "runs" / f"p2{i}", f"P2.{i}", "model4", acer)
    _fake_metrics(tmp_path / "runs" / "p1", "P1", "model4", 0.05)
    assert cli.main(["report", "--in", str(tmp_path / "runs"), "--out", str(tmp_path / "rep")]) == 0
    lines = (tmp_path / "rep" / "report.csv").read_text().splitlines()
    assert lines[1].startswith("P1,model4")
    assert lines[-1].startswith("P2,model4 mean±std,,25.00±12.91")
    doc = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert doc["protocol2"]["model4"]["mean"]["acer"] == 25.0


@pytest.mark.parametrize("argv", [
    ["eval", "--run", "/nonexistent/run"],
    ["train", "--out", "/tmp/x", "--protocol", "P1", "--data", "/nonexistent/data"],
    ["degrade", "--in", "/nonexistent.csv", "--kernel", "3", "--out", "/tmp/x"],
    ["report", "--in", "/nonexistent", "--out", "/tmp/x"],
])
def test_failures_emit_error_record(argv, capsys):
    assert cli.main(argv) == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["command"] == argv[0] and record["error"] and record["exit_code"] == 1


def test_bad_flags_exit_nonzero():
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--protocol", "P9", "--out", "x"])
    assert e.value.code != 0


def test_train_requires_protocol(workspace, tmp_path, capsys):
    ws, data = workspace
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path / "r")]) == 1
    assert "protocol" in capsys.readouterr().err
