import json
import logging
import shutil
import subprocess
import sys

import numpy as np
import pytest

from cwflow.archive import load_archive
from cwflow.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from cwflow.config import validate
from cwflow.optics import SequenceDataset

SMALL = {
    "seed": 0,
    "phantom": {"shape": [8, 32, 32], "n_neurons": 6},
    "beads": {"density": 1e-2},
    "layout": {"n_lenslets": 9, "sensor_size": [96, 96], "crop_size": [32, 32], "ring_radius": 24},
    "deconvolution": {"iterations": 10},
    "cwfa": {"levels": 2, "blocks_per_level": 2, "conv_channels": 6, "epochs_per_level": 3},
    "optimizer": {"learning_rate": 1e-3},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """simulate -> deconvolve -> train once; later tests reuse the files."""
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "run.json"
    cfg.write_text(json.dumps(SMALL))
    c = ["--config", str(cfg), "--threads", "1"]
    assert main(["simulate", "--out", str(d / "sim.cwfa"), "--frames", "14", *c]) == EXIT_OK
    assert main(["simulate", "--out", str(d / "beads.cwfa"), "--frames", "4", "--kind", "beads", *c]) == EXIT_OK
    assert main(["deconvolve", str(d / "sim.cwfa"), "--out", str(d / "rl.cwfa"), *c]) == EXIT_OK
    assert main(["train", str(d / "rl.cwfa"), "--out", str(d / "m.cwfa"), "--report", str(d / "train.json"),
                 "--frames", "0:6", *c]) == EXIT_OK
    return d, c


def test_simulate_round_trips(work, tmp_path):
    d, c = work
    ds = SequenceDataset.load(d / "sim.cwfa")
    assert ds.volumes.shape == (14, 8, 32, 32) and ds.meta["kind"] == "phantom"
    # the same seed gives a byte-identical archive
    assert main(["simulate", "--out", str(tmp_path / "again.cwfa"), "--frames", "14", *c]) == EXIT_OK
    assert (tmp_path / "again.cwfa").read_bytes() == (d / "sim.cwfa").read_bytes()


def test_simulate_zero_frames_is_a_usage_error(work, tmp_path):
    _, c = work
    assert main(["simulate", "--out", str(tmp_path / "x.cwfa"), "--frames", "0", *c]) == EXIT_USAGE


def test_simulate_bead_preset(work, tmp_path):
    _, c = work
    assert main(["simulate", "--out", str(tmp_path / "b.cwfa"), "--frames", "2", "--kind", "beads",
                 "--density-preset", "2", *c]) == EXIT_OK
    ds = SequenceDataset.load(tmp_path / "b.cwfa")
    assert ds.meta["kind"] == "beads" and ds.meta["config"]["density"] == 1e-4


def test_deconvolve_records_iterations_and_logs_checks(work, tmp_path, caplog):
    d, c = work
    assert SequenceDataset.load(d / "rl.cwfa").meta["rl_iterations"] == 10
    with caplog.at_level(logging.INFO, logger="cwflow"):
        assert main(["deconvolve", str(d / "sim.cwfa"), "--out", str(tmp_path / "z.cwfa"), "--iterations", "0",
                     "--no-sparsify", *c]) == EXIT_OK
    text = caplog.text
    assert "adjoint check" in text and "flux check" in text and "resolved config" in text
    ds = SequenceDataset.load(tmp_path / "z.cwfa")
    assert "zero_iterations_initialization_only" in ds.meta["flags"]
    assert np.allclose(ds.volumes[0], ds.volumes[0].flat[0])  # uniform initialisation


def test_train_report_and_determinism(work, tmp_path):
    d, c = work
    rep = json.loads((d / "train.json").read_text())
    for level, curve in rep["nll"].items():
        assert len(curve) == 3 and curve[-1] < rep["initial_nll"][level]
    assert rep["frames"] == list(range(6)) and rep["wall_clock_seconds"] > 0
    assert main(["train", str(d / "rl.cwfa"), "--out", str(tmp_path / "m2.cwfa"), "--frames", "0:6", *c]) == EXIT_OK
    assert (tmp_path / "m2.cwfa").read_bytes() == (d / "m.cwfa").read_bytes()


def test_train_missing_dataset_names_the_path(work, tmp_path, capsys):
    _, c = work
    missing = tmp_path / "nowhere.cwfa"
    assert main(["train", str(missing), "--out", str(tmp_path / "m.cwfa"), *c]) == EXIT_DATA
    assert str(missing) in capsys.readouterr().err


def test_reconstruct_is_deterministic_and_sweeps(work, tmp_path, capsys):
    d, c = work
    args = ["reconstruct", str(d / "m.cwfa"), str(d / "rl.cwfa"), "--frames", "6:14", *c]
    assert main([*args, "--out", str(tmp_path / "r1.cwfa")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "r2.cwfa")]) == EXIT_OK
    assert (tmp_path / "r1.cwfa").read_bytes() == (tmp_path / "r2.cwfa").read_bytes()
    capsys.readouterr()
    assert main([*args, "--out", str(tmp_path / "r3.cwfa"), "--sweep", "0,0.25,0.5,1",
                 "--report", str(tmp_path / "sweep.json")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "temperature  psnr_db" in out
    table = json.loads((tmp_path / "sweep.json").read_text())["sweep"]
    assert [row["temperature"] for row in table] == [0, 0.25, 0.5, 1]


def test_reconstruct_bad_checkpoint_magic(work, tmp_path):
    d, c = work
    bad = tmp_path / "bad.cwfa"
    bad.write_bytes(b"JUNK" + (d / "m.cwfa").read_bytes()[4:])
    assert main(["reconstruct", str(bad), str(d / "rl.cwfa"), "--out", str(tmp_path / "r.cwfa"), *c]) == EXIT_DATA


def test_ood_labelled_then_thresholded(work, tmp_path):
    d, c = work
    thr = tmp_path / "thr.json"
    assert main(["ood", str(d / "m.cwfa"), "--in-dist", str(d / "rl.cwfa"), "--out-dist", str(d / "beads.cwfa"),
                 "--save-threshold", str(thr), "--report", str(tmp_path / "o.json"), "--csv", str(tmp_path / "o.csv"),
                 "--n-thresholds", "100", *c]) == EXIT_OK
    doc = json.loads((tmp_path / "o.json").read_text())
    assert 0 <= doc["auc"] <= 1 and 0 <= doc["f1"] <= 1 and doc["level"] == 1
    assert len(doc["samples"]) == 14 + 4
    # beads were never deconvolved, so they were scored through RL and flagged
    assert all("flags" in row for row in doc["samples"] if row["label"] == "out")
    assert len((tmp_path / "o.csv").read_text().strip().splitlines()) == 1 + 18

    assert main(["ood", str(d / "m.cwfa"), "--dataset", str(d / "beads.cwfa"), "--threshold-report", str(thr),
                 "--report", str(tmp_path / "p.json"), *c]) == EXIT_OK
    rows = json.loads((tmp_path / "p.json").read_text())["samples"]
    assert {row["decision"] for row in rows} <= {"in", "out"}


def test_ood_unlabelled_without_threshold(work, tmp_path):
    d, c = work
    assert main(["ood", str(d / "m.cwfa"), "--dataset", str(d / "rl.cwfa"), "--frames", "0:3",
                 "--report", str(tmp_path / "u.json"), *c]) == EXIT_OK
    doc = json.loads((tmp_path / "u.json").read_text())
    assert doc["threshold"] is None and doc["auc"] is None
    assert [row["decision"] for row in doc["samples"]] == ["unknown"] * 3
    assert len(doc["samples"][0]["per_level_nll"]) == 3


def test_ood_needs_a_source(work):
    d, c = work
    assert main(["ood", str(d / "m.cwfa"), *c]) == EXIT_USAGE


def test_finetune_metrics(work, tmp_path):
    d, c = work
    assert main(["finetune", str(d / "m.cwfa"), str(d / "rl.cwfa"), "--out", str(tmp_path / "f.cwfa"),
                 "--epochs", "6", "--train-frames", "6:10", "--k", "5", "--metrics", str(tmp_path / "f.json"),
                 *c]) == EXIT_OK
    doc = json.loads((tmp_path / "f.json").read_text())
    for part in ("before", "after", "delta_pct"):
        assert set(doc[part]) == {"psnr", "mape", "pcc"}
    assert doc["mode"] == "only_new" and doc["seconds"] > 0
    meta = load_archive(tmp_path / "f.cwfa")["config"]
    assert meta["train_frames"] == [6, 7, 8, 9]


def test_finetune_append_all_needs_existing(work, tmp_path):
    d, c = work
    assert main(["finetune", str(d / "m.cwfa"), str(d / "rl.cwfa"), "--out", str(tmp_path / "f.cwfa"),
                 "--mode", "append_all", *c]) == EXIT_USAGE


def test_metrics_identical_and_schema(work, tmp_path):
    d, c = work
    out = tmp_path / "m.json"
    assert main(["metrics", str(d / "rl.cwfa"), str(d / "rl.cwfa"), "--k", "5", "--out", str(out), *c]) == EXIT_OK
    doc = json.loads(out.read_text())
    validate(doc, "metrics")
    assert doc["psnr"] == 99.0 and doc["mape"] == 0.0 and doc["pcc_mean"] == pytest.approx(1.0)


def test_metrics_frame_mismatch(work):
    d, c = work
    assert main(["metrics", str(d / "rl.cwfa"), str(d / "beads.cwfa"), *c]) == EXIT_DATA


def test_gradcheck_pass_and_fail(work, capsys):
    _, c = work
    assert main(["gradcheck", "--points", "1", "--max-coords", "20", *c]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--points", "1", "--max-coords", "20", "--tol", "0", *c]) == EXIT_NUMERIC


def test_bad_frames_and_unknown_command(work, tmp_path):
    d, c = work
    assert main(["train", str(d / "rl.cwfa"), "--out", str(tmp_path / "m.cwfa"), "--frames", "5:2", *c]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["explode"])
    assert exc.value.code == EXIT_USAGE


def test_invalid_config_is_a_data_error(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"cwfa": {"levels": 0}}))
    assert main(["simulate", "--out", str(tmp_path / "x.cwfa"), "--config", str(cfg)]) == EXIT_DATA


def test_threads_from_environment(monkeypatch, tmp_path):
    import torch

    monkeypatch.setenv("CWFLOW_THREADS", "1")
    assert main(["gradcheck", "--points", "1", "--max-coords", "5"]) == EXIT_OK
    assert torch.get_num_threads() == 1
    monkeypatch.setenv("CWFLOW_THREADS", "many")
    assert main(["gradcheck", "--points", "1", "--max-coords", "5"]) == EXIT_USAGE


def test_console_entry_point():
    exe = shutil.which("cwflow")
    cmd = [exe] if exe else [sys.executable, "-m", "cwflow.cli"]
    res = subprocess.run([*cmd, "--help"], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0
    for name in ("simulate", "deconvolve", "train", "reconstruct", "ood", "finetune", "metrics", "gradcheck"):
        assert name in res.stdout
