"""End-to-end command-line runs on tiny datasets."""

import hashlib
import subprocess
import sys

import pytest

from oadn.cli import main
from oadn.kv import read_kv
from oadn.train import EvalReport, parse_ablation_csv

SMALL_DATA = ["--per-class", "2", "--val-per-class", "1", "--test-per-class", "1", "--image-size", "32"]
FAST_TRAIN = ["--epochs", "1", "--batch-size", "8", "--m", "2", "--n", "2"]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out-root", str(root), "--seed", "3", *SMALL_DATA]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset):
    cfg = dataset / "cfg.txt"
    cfg.write_text("# desk run\nepochs = 1\nbatch-size = 4\nm = 2\nn = 2\nlr0 = 0.05\nseed = 9\n")
    code = main(["train", "--out-root", str(dataset), "--config", str(cfg), "--seed", "1", "--batch-size", "8"])
    assert code == 0
    return dataset / "train-seed1"


class TestGenData:
    def test_counts(self, tmp_path, capsys):
        args = ["gen-data", "--out", str(tmp_path / "d"), "--classes", "7", "--per-class", "3", "--test-per-class", "2"]
        assert main(args + ["--occlude-test", "1.0", "--seed", "7"]) == 0
        out = capsys.readouterr().out
        assert "train: 21 records (0 occluded)" in out
        assert "test: 14 records (14 occluded)" in out
        assert len((tmp_path / "d" / "train_labels.txt").read_text().split()) == 21

    def test_rerun_same_manifest_hash(self, tmp_path):
        for run in ("a", "b"):
            assert main(["gen-data", "--out", str(tmp_path / run), "--seed", "7", *SMALL_DATA]) == 0
        assert _sha(tmp_path / "a" / "manifest.txt") == _sha(tmp_path / "b" / "manifest.txt")
        assert _sha(tmp_path / "a" / "train_images.bin") == _sha(tmp_path / "b" / "train_images.bin")

    def test_zero_per_class_is_usage_error(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path), "--per-class", "0"]) == 2
        assert "--per-class" in capsys.readouterr().err

    def test_bad_number(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--per-class", "many"]) == 2

    def test_unknown_flag(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--bogus", "1"]) == 2

    def test_env_out_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("OADN_OUT_ROOT", str(tmp_path / "env"))
        assert main(["gen-data", *SMALL_DATA]) == 0
        assert (tmp_path / "env" / "data" / "manifest.txt").is_file()

    def test_audit_file(self, dataset):
        audit = read_kv(dataset / "data" / "gen-data.config.txt")
        assert audit["command"] == "gen-data" and audit["seed"] == "3" and audit["image_size"] == "32"


class TestTrainEval:
    def test_flags_override_config_file(self, trained):
        audit = read_kv(trained / "train.config.txt")
        assert audit["seed"] == "1" and audit["batch_size"] == "8"  # flags
        assert audit["lr0"] == "0.05" and audit["epochs"] == "1"  # file
        assert audit["momentum"] == "0.9"  # default
        assert len((trained / "train.log").read_text().splitlines()) == 1

    def test_eval_reports(self, trained, capsys):
        for branch in ("lab-only", "fused"):
            args = ["eval", "--out-root", str(trained.parent), "--checkpoint", str(trained / "best"), "--split", "test"]
            assert main(args + ["--branch", branch]) == 0
        assert "report:" in capsys.readouterr().out
        fused = trained / "eval_test_fused.txt"
        lab = trained / "eval_test_lab-only.txt"
        assert fused.is_file() and lab.is_file()
        assert EvalReport.from_text(fused.read_text()).total == 7
        assert EvalReport.from_text(lab.read_text()).branch == "lab-only"
        audit = read_kv(trained / "eval_test_fused.config.txt")
        assert audit["T"] == "0.6"  # taken from the checkpoint

    def test_eval_requires_checkpoint(self, dataset):
        assert main(["eval", "--out-root", str(dataset)]) == 2

    def test_eval_missing_checkpoint_is_runtime_error(self, dataset):
        assert main(["eval", "--out-root", str(dataset), "--checkpoint", str(dataset / "nope")]) == 1

    def test_train_missing_data_is_runtime_error(self, tmp_path, capsys):
        assert main(["train", "--out-root", str(tmp_path), *FAST_TRAIN]) == 1
        assert "manifest" in capsys.readouterr().err

    def test_bad_config_key(self, dataset, tmp_path):
        cfg = tmp_path / "bad.txt"
        cfg.write_text("learning_rate = 0.1\n")
        assert main(["train", "--out-root", str(dataset), "--config", str(cfg)]) == 2

    def test_invalid_lambda(self, dataset):
        assert main(["train", "--out-root", str(dataset), "--lam", "2", *FAST_TRAIN]) == 2

    def test_rerun_is_identical(self, dataset, tmp_path):
        for run in ("a", "b"):
            args = ["train", "--out-root", str(dataset), "--out", str(tmp_path / run), "--seed", "4", *FAST_TRAIN]
            assert main(args) == 0
        for name in ("train.log", "final/params.bin", "best/params.bin"):
            assert _sha(tmp_path / "a" / name) == _sha(tmp_path / "b" / name)


class TestAblate:
    def test_lambda_grid(self, tmp_path, capsys):
        args = ["ablate", "--out", str(tmp_path), "--axis", "lambda", "--grid", "0,0.5,1", "--seeds", "3"]
        args += ["--per-class", "1", "--image-size", "32", *FAST_TRAIN]
        assert main(args) == 0
        rows = parse_ablation_csv((tmp_path / "ablation_lambda.csv").read_text())
        assert len(rows) == 9
        assert sorted({r.seed for r in rows}) == [0, 1, 2]
        summary = (tmp_path / "ablation_lambda_summary.txt").read_text().splitlines()
        assert summary[0] == "lambda mean_total_acc std n" and len(summary) == 4
        assert "axis_value,seed,total_acc,avg_class_acc" in capsys.readouterr().out

    def test_requires_axis(self, tmp_path):
        assert main(["ablate", "--out", str(tmp_path), "--grid", "0,1"]) == 2

    def test_unknown_axis(self, tmp_path):
        assert main(["ablate", "--out", str(tmp_path), "--axis", "sigma", "--grid", "1"]) == 2

    def test_impossible_k(self, tmp_path):
        assert main(["ablate", "--out", str(tmp_path), "--axis", "K", "--grid", "5", "--per-class", "1"]) == 2


class TestGradcheck:
    def test_defaults_echoed(self, tmp_path, capsys):
        args = ["gradcheck", "--out-root", str(tmp_path), "--eps", "1e-5", "--dtype", "64", "--seeds", "2"]
        assert main(args + ["--e2e-seeds", "1"]) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0].startswith("gradcheck: eps=1e-05 dtype=float64 tol=0.0001")
        assert "conv2d" in out and "all checks passed" in out
        assert (tmp_path / "gradcheck" / "gradcheck.txt").read_text() == out

    def test_injected_fault_names_op(self, tmp_path, capsys):
        args = ["gradcheck", "--out-root", str(tmp_path), "--seeds", "2", "--e2e-seeds", "1"]
        assert main(args + ["--inject-fault", "softmax"]) == 1
        assert "gradient check failed for softmax" in capsys.readouterr().err

    def test_only_float64(self, tmp_path):
        assert main(["gradcheck", "--out-root", str(tmp_path), "--dtype", "32"]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "oadn.cli", "gen-data", "--out", str(tmp_path), "--per-class", "0"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2 and "usage error" in proc.stderr
