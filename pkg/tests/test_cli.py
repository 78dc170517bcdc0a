"""
Unit tests for the command-line interface.
"""

import json
import logging

import pytest

import hand_kd.__main__ as cli
from hand_kd.__main__ import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from hand_kd.cache import reset_global_cache
from hand_kd.trainer import NumericalAbort

TINY_NET = {"channel_widths": [4, 8], "head_dim": 8, "input_size": [64, 64]}


@pytest.fixture(autouse=True)
def restore_logging():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    reset_global_cache()
    yield
    reset_global_cache()
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A rig, a 4-sample training set and a 3-sample evaluation set written through the CLI."""
    root_logger = logging.getLogger()
    handlers, level = list(root_logger.handlers), root_logger.level
    root = tmp_path_factory.mktemp("cli")
    rig = root / "rig.hkdr"
    assert main(["gen-rig", "--out", str(rig)]) == EXIT_OK
    assert main(["gen-data", "--rig", str(rig), "--n", "4", "--seed", "0", "--out", str(root / "train.hkdd")]) == EXIT_OK
    assert main(["gen-data", "--rig", str(rig), "--n", "3", "--seed", "1", "--frac-2d-only", "0",
                 "--out", str(root / "eval.hkdd")]) == EXIT_OK
    (root / "tiny.json").write_text(json.dumps({"epochs": 1, "batch_size": 2, "net": TINY_NET}))
    root_logger.handlers[:] = handlers
    root_logger.setLevel(level)
    return root


class TestPipeline:
    """Test the commands chained on tiny settings."""

    def test_generated_files(self, workspace):
        """Test artifacts come with manifests"""
        for name in ("rig.hkdr", "train.hkdd", "eval.hkdd"):
            assert (workspace / name).exists()
            assert (workspace / f"{name}.manifest.json").exists()
        manifest = json.loads((workspace / "train.hkdd.manifest.json").read_text())
        assert manifest["command"] == "gen-data"
        assert set(manifest["inputs"]) == {"rig"}

    def test_train_distill_eval_bench(self, workspace, capsys):
        """Test a teacher is trained, distilled into a student, scored and timed"""
        w = workspace
        rig = ["--rig", str(w / "rig.hkdr")]
        assert main(["train-teacher", "--data", str(w / "train.hkdd"), *rig, "--config", str(w / "tiny.json"),
                     "--out", str(w / "teacher.hkdm"), "--no-cache"]) == EXIT_OK
        assert (w / "teacher.train_log.csv").exists()

        assert main(["distill", "--teacher", str(w / "teacher.hkdm"), "--data", str(w / "train.hkdd"), *rig,
                     "--mode", "combined", "--lambda-kd", "0.5", "--gamma-fd", "6", "--student-size", "small",
                     "--epochs", "1", "--batch-size", "2", "--out", str(w / "student.hkdm"), "--no-cache"]) == EXIT_OK
        manifest = json.loads((w / "student.hkdm.manifest.json").read_text())
        assert manifest["options"]["train"]["kd"]["mode"] == "combined"
        assert set(manifest["inputs"]) == {"teacher", "data"}

        assert main(["eval", "--model", str(w / "student.hkdm"), "--data", str(w / "eval.hkdd"), *rig,
                     "--out", str(w / "eval.csv")]) == EXIT_OK
        assert (w / "eval.csv").read_text().startswith("j_err,v_err,f@5,f@15")

        capsys.readouterr()
        assert main(["bench", "--model", str(w / "student.hkdm"), *rig, "--iters", "1", "--warmup", "0",
                     "--json"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["iters"] == 1

    def test_sweep_and_report(self, workspace, tmp_path):
        """Test a two-cell sweep and its report"""
        w = workspace
        rig = ["--rig", str(w / "rig.hkdr")]
        teacher = w / "sweep_teacher.hkdm"
        assert main(["train-teacher", "--data", str(w / "train.hkdd"), *rig, "--config", str(w / "tiny.json"),
                     "--out", str(teacher), "--no-cache"]) == EXIT_OK
        grid = tmp_path / "grid.txt"
        grid.write_text("none 0 0 small 0\noutput 0.5 0 small 0\n")
        out_dir = tmp_path / "sweep"
        assert main(["sweep", "--grid-file", str(grid), "--teacher", str(teacher), "--data", str(w / "train.hkdd"),
                     "--eval-data", str(w / "eval.hkdd"), *rig, "--epochs", "1", "--batch-size", "2",
                     "--bench-iters", "1", "--out-dir", str(out_dir), "--no-cache"]) == EXIT_OK
        assert (out_dir / "sweep_results.csv").exists()
        assert json.loads((out_dir / "manifest.json").read_text())["extra"]["failed_cells"] == []

        report = tmp_path / "report.md"
        plot = tmp_path / "tradeoff.html"
        assert main(["report", "--sweep-dir", str(out_dir), "--out", str(report), "--plot", str(plot)]) == EXIT_OK
        assert "Output-level distillation" in report.read_text()
        assert plot.exists()


class TestExitCodes:
    """Test failures map to exit codes."""

    def test_unknown_flag(self):
        """Test usage errors exit with 1"""
        with pytest.raises(SystemExit) as info:
            main(["gen-rig", "--bogus"])
        assert info.value.code == EXIT_USAGE

    def test_missing_command(self):
        """Test a missing subcommand is a usage error"""
        with pytest.raises(SystemExit) as info:
            main([])
        assert info.value.code == EXIT_USAGE

    def test_missing_file(self, tmp_path):
        """Test a missing input exits with 2"""
        assert main(["eval", "--model", str(tmp_path / "nope.hkdm"), "--data", str(tmp_path / "nope.hkdd")]) == EXIT_DATA

    def test_invalid_config(self, workspace, tmp_path):
        """Test malformed JSON exits with 2"""
        config = tmp_path / "bad.json"
        config.write_text("{epochs: 1")
        assert main(["train-teacher", "--data", str(workspace / "train.hkdd"), "--config", str(config),
                     "--out", str(tmp_path / "t.hkdm")]) == EXIT_DATA

    def test_bad_thresholds(self, workspace, tmp_path):
        """Test nonpositive thresholds are a usage error"""
        from hand_kd.nets import NetConfig, init_model, save_model

        model = save_model(init_model(NetConfig.from_dict(TINY_NET)), tmp_path / "m.hkdm")
        assert main(["eval", "--model", str(model), "--data", str(workspace / "eval.hkdd"),
                     "--rig", str(workspace / "rig.hkdr"), "--thresholds", "5,0"]) == EXIT_USAGE

    def test_eval_rig_mismatch(self, workspace, tmp_path):
        """Test scoring against a rig the dataset was not generated with exits with 2"""
        from hand_kd.nets import NetConfig, init_model, save_model

        other_rig = tmp_path / "other.hkdr"
        assert main(["gen-rig", "--seed", "1", "--out", str(other_rig)]) == EXIT_OK
        model = save_model(init_model(NetConfig.from_dict(TINY_NET)), tmp_path / "m.hkdm")
        out = tmp_path / "eval.csv"
        assert main(["eval", "--model", str(model), "--data", str(workspace / "eval.hkdd"),
                     "--rig", str(other_rig), "--out", str(out)]) == EXIT_DATA
        assert not out.exists()

    def test_numerical_abort(self, workspace, tmp_path, monkeypatch):
        """Test diverging training exits with 3"""

        def diverge(*args, **kwargs):
            raise NumericalAbort("teacher: non-finite loss at epoch 0, batch 0", 0, 0)

        monkeypatch.setattr(cli, "train_teacher", diverge)
        assert main(["train-teacher", "--data", str(workspace / "train.hkdd"),
                     "--out", str(tmp_path / "t.hkdm")]) == EXIT_NUMERICAL

    def test_cache_command(self, tmp_path, monkeypatch, capsys):
        """Test cache statistics are printed as JSON"""
        monkeypatch.setenv("HOME", str(tmp_path))
        assert main(["cache"]) == EXIT_OK
        stats = json.loads(capsys.readouterr().out)
        assert stats["enabled"] is True
        assert stats["total_entries"] == 0
