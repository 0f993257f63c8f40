import json
import struct
import subprocess
import sys

import pytest

from uhfpd.cli import EXIT_DATA, EXIT_LEAKAGE, EXIT_OK, EXIT_USAGE, main
from uhfpd.dataset import load

FOUR = "Pa-1,Pa+1,Pr-2,Pr+2"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "d.pdds"
    assert run("synth", "--per-class", 10, "--length", 1000, "--classes", FOUR + ",Pa+1.5",
               "--seed", 3, "--out", out) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def model_dir(data_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    assert run("train", "--data", data_file, "--classes", FOUR, "--epochs", 1,
               "--out", out) == EXIT_OK
    return out


def test_no_arguments_is_a_usage_error(capsys):
    assert run() == EXIT_USAGE


def test_unknown_option_is_a_usage_error(capsys):
    assert run("synth", "--bogus") == EXIT_USAGE
    assert "error: config" in capsys.readouterr().err


def test_entry_point_module():
    proc = subprocess.run([sys.executable, "-m", "uhfpd.cli"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE


def test_synth_writes_data_and_manifest(data_file):
    d = load(data_file)
    assert len(d) == 50 and d.length == 1000
    manifest = json.loads((data_file.parent / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 3
    assert len(manifest["config_hash"]) == 64


def test_synth_from_measured_layout_config(tmp_path):
    cfg = tmp_path / "t1.cfg"
    cfg.write_text("count.table1 = 1\nlength = 8\n")
    out = tmp_path / "t1.pdds"
    assert run("synth", "--config", cfg, "--out", out) == EXIT_OK
    header = out.read_bytes()[:26]
    magic, version, n, length, _ = struct.unpack("<4sHQId", header)
    assert (magic, n, length) == (b"PDDS", 33000, 8)
    digest = json.loads((tmp_path / "manifest.json").read_text())["inputs"]
    assert str(cfg) in digest


def test_synth_is_reproducible(tmp_path):
    a, b = tmp_path / "a.pdds", tmp_path / "b.pdds"
    for out in (a, b):
        assert run("synth", "--per-class", 2, "--length", 100, "--out", out) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_jobs_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PD_BENCH_JOBS", "2")
    out = tmp_path / "p.pdds"
    assert run("synth", "--per-class", 3, "--length", 100, "--out", out) == EXIT_OK
    ref = tmp_path / "s.pdds"
    assert run("synth", "--per-class", 3, "--length", 100, "--out", ref, "--jobs", 1) == EXIT_OK
    assert out.read_bytes() == ref.read_bytes()
    monkeypatch.setenv("PD_BENCH_JOBS", "lots")
    assert run("synth", "--per-class", 1, "--out", tmp_path / "x.pdds") == EXIT_USAGE


def test_normalize(data_file, tmp_path):
    out = tmp_path / "f.pdds"
    assert run("normalize", "--data", data_file, "--scheme", "Me", "--domain", "fft",
               "--out", out) == EXIT_OK
    feats = load(out)
    assert feats.length == 513 and feats.samples.max() == pytest.approx(1.0)
    assert (tmp_path / "f.features.cfg").is_file()


def test_train_outputs(model_dir):
    for name in ("model.pdnn", "features.cfg", "train_ids.txt", "metrics.csv", "manifest.json"):
        assert (model_dir / name).is_file()
    assert len((model_dir / "train_ids.txt").read_text().split()) == 32


def test_evaluate_on_training_records_is_leakage(data_file, model_dir, capsys):
    assert run("evaluate", "--model", model_dir, "--data", data_file,
               "--holdout", "Pa+1.5") == EXIT_LEAKAGE
    assert "error: leakage" in capsys.readouterr().err


def test_evaluate_unseen_records(data_file, model_dir, capsys, tmp_path):
    out = tmp_path / "m.csv"
    assert run("evaluate", "--model", model_dir, "--data", data_file, "--unseen-only",
               "--holdout", "Pa+1.5", "--out", out) == EXIT_OK
    text = out.read_text()
    assert text.startswith("run_id,class,A") and "mean,G," in text


def test_data_errors(tmp_path, data_file, capsys):
    assert run("evaluate", "--model", tmp_path, "--data", data_file) == EXIT_DATA
    bad = tmp_path / "bad.pdds"
    bad.write_bytes(b"NOPE" + bytes(40))
    assert run("normalize", "--data", bad, "--out", tmp_path / "o.pdds") == EXIT_DATA
    assert run("normalize", "--data", tmp_path / "missing.pdds",
               "--out", tmp_path / "o.pdds") == EXIT_DATA
    assert run("report", tmp_path) == EXIT_DATA
    assert "error: data" in capsys.readouterr().err


def test_config_errors(tmp_path, data_file):
    assert run("train", "--data", data_file, "--scheme", "zscore", "--out", tmp_path) == EXIT_USAGE
    assert run("synth", "--classes", "Pa+2", "--out", tmp_path / "x.pdds") == EXIT_USAGE
    assert run("experiment", "--parts", "nothing", "--out", tmp_path) == EXIT_USAGE


PLAN = """\
base = Pa-1, Pa+1, Pr-2, Pr+2
holdout = Pa+1.5
order.order1 = Pa-3
order.order2 = Pr-3
schemes = measurement
domains = time
baseline_per_class = 6
baseline_length = 1000
transfer_per_class = 6
transfer_length = 1000
n_seeds = 2
epochs = 1
"""


def test_experiment_and_report(tmp_path, capsys):
    plan = tmp_path / "tiny.plan"
    plan.write_text(PLAN)
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("experiment", "--plan", plan, "--out", out, "--seed", 1) == EXIT_OK
    for name in ("grid.csv", "transfer_measurement_order1.csv", "report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["config"]["scale.n_seeds"] == "2"
    capsys.readouterr()
    assert run("report", a, "--svg") == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split()[:3] == ["grid", "measurement", "time"]
    assert "A_bar=" in lines[0]
    assert any(l.split()[:3] == ["transfer", "measurement", "order1"] for l in lines)
