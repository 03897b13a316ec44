import hashlib
import json

import numpy as np
import pytest

import crowdpoint
from crowdpoint import cli
from crowdpoint.core import DivergenceError
from crowdpoint.decoder import read_detections
from crowdpoint.metrics import EvalReport
from crowdpoint.micronet import MicroNet, load_checkpoint

GEN_ARGS = ["--size", "32", "--train", "3", "--val", "2", "--test", "2",
            "--count-min", "2", "--count-max", "4",
            "--radius-min", "2", "--radius-max", "3",
            "--min-separation", "6", "--seed", "5"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run_dir, eval_dir = root / "data", root / "run", root / "eval"
    assert cli.run(["gen-data", "--out", str(data), *GEN_ARGS]) == 0
    assert cli.run(["train", "--data", str(data), "--out", str(run_dir),
                    "--epochs", "1", "--crop", "16", "--seed", "3"]) == 0
    assert cli.run(["eval", "--data", str(data),
                    "--checkpoint", str(run_dir / "model.dpw"),
                    "--out", str(eval_dir)]) == 0
    return data, run_dir, eval_dir


# --- argument handling ------------------------------------------------------------

def test_version_flag(capsys):
    assert cli.run(["--version"]) == 0
    assert capsys.readouterr().out.strip() == f"crowdpoint {crowdpoint.__version__}"


def test_missing_subcommand_is_usage_error(capsys):
    assert cli.run([]) == 2


def test_unknown_subcommand_is_usage_error(capsys):
    assert cli.run(["frobnicate"]) == 2


def test_missing_required_flag_is_usage_error(capsys):
    assert cli.run(["train", "--out", "/tmp/x"]) == 2


def test_negative_count_is_usage_error(capsys):
    assert cli.run(["gen-data", "--out", "/tmp/x", "--train", "-3"]) == 2


def test_zero_size_is_usage_error(capsys):
    assert cli.run(["gen-data", "--out", "/tmp/x", "--size", "0"]) == 2


# --- gen-data ----------------------------------------------------------------------

def test_gen_data_writes_annotations_and_grids(pipeline):
    data, _, _ = pipeline
    for split, n in (("train", 3), ("val", 2), ("test", 2)):
        ann = json.loads((data / f"{split}.json").read_text())
        assert len(ann) == n
        for i in range(n):
            assert (data / "grids" / f"{split}-{i:04d}.dpg").exists()


def test_gen_data_manifest_is_self_consistent(pipeline):
    data, _, _ = pipeline
    manifest = json.loads((data / "manifest-gen-data.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["version"] == crowdpoint.__version__
    canonical = json.dumps(manifest["config"], sort_keys=True)
    assert manifest["config_digest"] == hashlib.sha256(canonical.encode()).hexdigest()
    assert manifest["outputs"] == sorted(manifest["outputs"])
    assert str(data / "train.json") in manifest["outputs"]
    assert not any("time" in k or "date" in k for k in manifest)


def test_gen_data_same_seed_reproduces_files_byte_for_byte(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run(["gen-data", "--out", str(a), *GEN_ARGS]) == 0
    assert cli.run(["gen-data", "--out", str(b), *GEN_ARGS]) == 0
    for rel in ("train.json", "val.json", "test.json", "grids/train-0000.dpg",
                "grids/test-0001.dpg"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


# --- train ---------------------------------------------------------------------------

def test_train_writes_loadable_checkpoint_and_curve(pipeline):
    _, run_dir, _ = pipeline
    net = MicroNet()
    load_checkpoint(net, run_dir / "model.dpw")
    assert np.isfinite(net.params).all()
    lines = (run_dir / "loss_curve.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_nsf,l_fp,l_r,total"
    assert len(lines) == 2  # one epoch
    assert (run_dir / "manifest-train.json").exists()


def test_train_zero_epochs_checkpoints_the_initialization(pipeline, tmp_path):
    data, _, _ = pipeline
    out = tmp_path / "run0"
    assert cli.run(["train", "--data", str(data), "--out", str(out),
                    "--epochs", "0", "--crop", "16", "--seed", "3"]) == 0
    net = MicroNet()
    load_checkpoint(net, out / "model.dpw")
    assert (out / "loss_curve.csv").read_text() == "epoch,l_nsf,l_fp,l_r,total\n"


def test_train_missing_dataset_is_data_error(tmp_path, capsys):
    assert cli.run(["train", "--data", str(tmp_path / "nope"),
                    "--out", str(tmp_path / "run")]) == 3
    assert "error:" in capsys.readouterr().err


def test_train_oversized_crop_is_data_error(pipeline, tmp_path, capsys):
    data, _, _ = pipeline  # 32px images vs default 64px crop
    assert cli.run(["train", "--data", str(data),
                    "--out", str(tmp_path / "run")]) == 3


def test_train_divergence_exit_code(pipeline, tmp_path, monkeypatch, capsys):
    data, _, _ = pipeline
    def boom(*args, **kwargs):
        raise DivergenceError("non-finite loss at step 1")
    monkeypatch.setattr(cli, "train", boom)
    assert cli.run(["train", "--data", str(data),
                    "--out", str(tmp_path / "run"),
                    "--crop", "16"]) == 4
    assert "numerical abort" in capsys.readouterr().err


# --- eval ----------------------------------------------------------------------------

def test_eval_writes_report_and_detections(pipeline):
    data, _, eval_dir = pipeline
    report = EvalReport.from_json((eval_dir / "eval_report.json").read_text())
    assert report.n_images == 2
    assert 0.3 <= report.threshold <= 0.5
    rows = read_detections(eval_dir / "detections.jsonl")
    assert [image_id for image_id, _ in rows] == ["test-0000", "test-0001"]
    assert (eval_dir / "manifest-eval.json").exists()


def test_eval_json_flag_prints_the_report(pipeline, tmp_path, capsys):
    data, run_dir, _ = pipeline
    out = tmp_path / "eval2"
    assert cli.run(["eval", "--data", str(data),
                    "--checkpoint", str(run_dir / "model.dpw"),
                    "--out", str(out), "--json"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((out / "eval_report.json").read_text())


def test_eval_corrupt_checkpoint_is_data_error(pipeline, tmp_path, capsys):
    data, _, _ = pipeline
    bad = tmp_path / "bad.dpw"
    bad.write_bytes(b"JUNKJUNKJUNK")
    assert cli.run(["eval", "--data", str(data), "--checkpoint", str(bad),
                    "--out", str(tmp_path / "eval")]) == 3


# --- plot ----------------------------------------------------------------------------

def test_plot_targets_mode_writes_three_images(pipeline, tmp_path):
    data, _, _ = pipeline
    out = tmp_path / "plots"
    assert cli.run(["plot", "--data", str(data), "--split", "val",
                    "--out", str(out)]) == 0
    heat = (out / "val-0000_heatmap.pgm").read_bytes()
    dens = (out / "val-0000_density.pgm").read_bytes()
    over = (out / "val-0000_overlay.ppm").read_bytes()
    assert heat.startswith(b"P5\n32 32\n255\n")
    assert dens.startswith(b"P5\n16 16\n255\n")
    assert over.startswith(b"P6\n32 32\n255\n")


def test_plot_prediction_mode_uses_checkpoint(pipeline, tmp_path):
    data, run_dir, _ = pipeline
    out = tmp_path / "plots"
    assert cli.run(["plot", "--data", str(data), "--id", "test-0001",
                    "--checkpoint", str(run_dir / "model.dpw"),
                    "--out", str(out)]) == 0
    assert (out / "test-0001_heatmap.pgm").exists()
    assert (out / "test-0001_overlay.ppm").exists()


def test_plot_unknown_id_is_data_error(pipeline, tmp_path, capsys):
    data, _, _ = pipeline
    assert cli.run(["plot", "--data", str(data), "--id", "test-9999",
                    "--out", str(tmp_path / "plots")]) == 3
