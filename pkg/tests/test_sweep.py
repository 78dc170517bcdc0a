"""
Unit tests for sweep module.
"""

from dataclasses import replace

import pytest

from hand_kd.data import make_dataset
from hand_kd.hand_model import make_synthetic_rig
from hand_kd.losses import KDMode
from hand_kd.nets import flop_count, freeze, init_model, param_count, preset
from hand_kd.sweep import (
    EFFICIENCY_FILE,
    RESULTS_FILE,
    SweepCell,
    default_grid,
    format_grid_file,
    parse_grid_file,
    run_sweep,
    write_sweep_results,
)
from hand_kd.trainer import TrainConfig
from hand_kd.validation import validate_grid


class TestGrid:
    """Test sweep grids."""

    def test_default_grid_size(self):
        """Test two sizes × three seeds × ten settings"""
        cells = default_grid()
        assert len(cells) == 60
        assert sum(c.mode is KDMode.NONE for c in cells) == 6
        assert SweepCell(KDMode.FEATURE, 0.8, 12.0, "large", 2) in cells

    def test_default_grid_is_valid(self):
        """Test the default grid raises no validation warnings"""
        assert [w for w in validate_grid(default_grid()) if w.severity != "info"] == []

    def test_parse(self):
        """Test comments, blank lines and fields"""
        text = "# header\n\nnone 0 0 small 0\noutput 0.5 0 large 1  # best λ\n"
        cells = parse_grid_file(text)
        assert cells == [
            SweepCell(KDMode.NONE, 0.0, 0.0, "small", 0),
            SweepCell(KDMode.OUTPUT, 0.5, 0.0, "large", 1),
        ]

    def test_format_parse_round_trip(self):
        """Test a formatted grid parses back to the same cells"""
        cells = default_grid(sizes=("small",), seeds=(0,))
        assert parse_grid_file(format_grid_file(cells)) == cells

    def test_malformed_line(self):
        """Test errors name the offending line"""
        with pytest.raises(ValueError, match="line 2"):
            parse_grid_file("none 0 0 small 0\noutput 0.5 small 1\n")

    def test_unknown_size(self):
        """Test the teacher preset cannot be a student"""
        with pytest.raises(ValueError, match="line 1"):
            parse_grid_file("none 0 0 teacher 0\n")

    def test_label(self):
        """Test cell labels are readable and unique per setting"""
        assert SweepCell(KDMode.COMBINED, 0.8, 12.0, "small", 1).label == "small_combined_l0.8_g12_s1"


class TestRunSweep:
    """Test running a small sweep end to end."""

    @pytest.fixture(scope="class")
    def teacher(self):
        from hand_kd.nets import NetConfig

        return freeze(init_model(NetConfig(channel_widths=(8, 16), head_dim=16, input_size=(16, 16))))

    @pytest.fixture(scope="class")
    def cells(self):
        return [SweepCell(KDMode.NONE, 0.0, 0.0, "small", 0), SweepCell(KDMode.OUTPUT, 0.5, 0.0, "small", 0)]

    def _run(self, cells, teacher, small_dataset, small_eval_dataset, synthetic_rig, jobs=1):
        return run_sweep(
            cells,
            small_dataset,
            synthetic_rig,
            teacher,
            TrainConfig(epochs=1, batch_size=3),
            small_eval_dataset,
            jobs=jobs,
            bench_iters=1,
        )

    def test_rows_and_teacher(self, cells, teacher, small_dataset, small_eval_dataset, synthetic_rig):
        """Test one row per cell plus the teacher and efficiency entries"""
        results = self._run(cells, teacher, small_dataset, small_eval_dataset, synthetic_rig)
        frame = results.to_frame()
        assert list(frame["backbone_cfg"]) == ["teacher", "small", "small"]
        assert list(frame["status"]) == ["ok", "ok", "ok"]
        assert {"j_err", "v_err", "f@5", "f@15", "teacher_mse", "final_loss_gt"} <= set(frame.columns)
        assert set(results.efficiency) == {"teacher", "small"}
        assert results.failures == []

    def test_deterministic_results(self, cells, teacher, small_dataset, small_eval_dataset, synthetic_rig):
        """Test two runs, serial and threaded, give identical result tables"""
        first = self._run(cells, teacher, small_dataset, small_eval_dataset, synthetic_rig)
        second = self._run(cells, teacher, small_dataset, small_eval_dataset, synthetic_rig, jobs=2)
        assert first.to_frame().to_csv(index=False) == second.to_frame().to_csv(index=False)

    def test_students_benchmarked_at_dataset_size(self, cells, teacher, small_dataset, small_eval_dataset,
                                                  synthetic_rig):
        """Test student efficiency describes the 16×16 networks the cells trained"""
        results = self._run(cells, teacher, small_dataset, small_eval_dataset, synthetic_rig)
        trained = replace(preset("small"), input_size=small_dataset.image_size)
        assert results.efficiency["small"].macs == flop_count(trained)
        assert results.efficiency["small"].macs < flop_count(preset("small"))
        assert results.efficiency["small"].params_total == param_count(init_model(trained), trainable_only=False)

    def test_eval_dataset_rig_mismatch(self, cells, teacher, small_dataset, synthetic_rig, monkeypatch):
        """Test a held-out set from another rig is refused before any cell runs"""
        import hand_kd.sweep as sweep_module

        foreign = make_dataset(2, seed=1, rig=make_synthetic_rig(seed=1), focal=20.0, image_size=(16, 16))
        monkeypatch.setattr(sweep_module, "distill", lambda *args, **kwargs: pytest.fail("cell dispatched"))
        with pytest.raises(ValueError, match="Dataset was generated with rig"):
            run_sweep(cells, small_dataset, synthetic_rig, teacher, TrainConfig(epochs=1), foreign)

    def test_train_dataset_rig_mismatch(self, cells, teacher, small_dataset):
        """Test a training set from another rig is refused"""
        with pytest.raises(ValueError, match="rig"):
            run_sweep(cells, small_dataset, make_synthetic_rig(seed=1), teacher, TrainConfig(epochs=1))

    def test_unfrozen_teacher(self, cells, small_dataset, synthetic_rig, teacher_cfg):
        """Test a trainable teacher is refused"""
        with pytest.raises(ValueError, match="frozen"):
            run_sweep(cells, small_dataset, synthetic_rig, init_model(teacher_cfg))

    def test_empty_grid(self, teacher, small_dataset, synthetic_rig):
        """Test an empty grid is refused"""
        with pytest.raises(ValueError, match="empty"):
            run_sweep([], small_dataset, synthetic_rig, teacher)

    def test_failed_cell_is_recorded(self, teacher, small_dataset, small_eval_dataset, synthetic_rig, monkeypatch):
        """Test a failing cell is kept with its error while the others finish"""
        import hand_kd.sweep as sweep_module

        real_distill = sweep_module.distill

        def flaky(teacher, student_cfg, cfg, *args, **kwargs):
            if cfg.kd.mode is KDMode.OUTPUT:
                raise RuntimeError("boom")
            return real_distill(teacher, student_cfg, cfg, *args, **kwargs)

        monkeypatch.setattr(sweep_module, "distill", flaky)
        cells = [SweepCell(KDMode.NONE, 0.0, 0.0, "small", 0), SweepCell(KDMode.OUTPUT, 0.5, 0.0, "small", 0)]
        results = self._run(cells, teacher, small_dataset, small_eval_dataset, synthetic_rig)
        assert results.rows[0].status == "ok"
        assert results.rows[1].status.startswith("failed: RuntimeError")

    def test_write_results(self, cells, teacher, small_dataset, small_eval_dataset, synthetic_rig, tmp_path):
        """Test result files and per-cell directories are written"""
        results = self._run(cells, teacher, small_dataset, small_eval_dataset, synthetic_rig)
        out = write_sweep_results(results, tmp_path / "sweep")
        assert (out / RESULTS_FILE).exists()
        assert (out / EFFICIENCY_FILE).exists()
        cell_dirs = sorted(p.name for p in (out / "cells").iterdir())
        assert cell_dirs == ["000_small_none_l0_g0_s0", "001_small_output_l0.5_g0_s0"]
        assert (out / "cells" / cell_dirs[1] / "metrics.json").exists()
