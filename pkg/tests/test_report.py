"""
Unit tests for report module.
"""

import math

import pandas as pd
import pytest

from hand_kd.report import (
    ReportTable,
    build_tables,
    format_report,
    load_sweep_results,
    table_to_markdown,
    write_tradeoff_plot,
)
from hand_kd.sweep import EFFICIENCY_FILE, RESULTS_FILE

COLUMNS = ["index", "backbone_cfg", "mode", "lambda_kd", "gamma_fd", "seed", "status",
           "j_err", "v_err", "f@5", "f@15", "teacher_mse"]

ROWS = [
    [-1, "teacher", "none", 0.0, 0.0, -1, "ok", 5.0, 6.0, 0.5, 0.9, float("nan")],
    [0, "small", "none", 0.0, 0.0, 0, "ok", 10.0, 11.0, 0.2, 0.6, 3.0],
    [1, "small", "none", 0.0, 0.0, 1, "ok", 12.0, 13.0, 0.2, 0.6, 3.0],
    [2, "small", "output", 0.5, 0.0, 0, "ok", 9.0, 10.0, 0.3, 0.7, 1.0],
    [3, "small", "feature", 0.8, 12.0, 0, "ok", 8.0, 9.0, 0.3, 0.7, 1.0],
    [4, "small", "feature", 0.3, 6.0, 0, "ok", 10.5, 11.5, 0.2, 0.6, 2.0],
    [5, "large", "none", 0.0, 0.0, 0, "ok", 9.0, 10.0, 0.3, 0.7, 2.0],
    [6, "large", "feature", 0.3, 6.0, 0, "ok", 8.5, 9.5, 0.3, 0.7, 1.5],
    [7, "small", "combined", 0.5, 6.0, 0, "failed: RuntimeError: boom", float("nan"), float("nan"),
     float("nan"), float("nan"), float("nan")],
]

EFFICIENCY = pd.DataFrame(
    {
        "backbone_cfg": ["teacher", "large", "small"],
        "params_total": [1_000_000, 300_000, 100_000],
        "params_trainable": [1_000_000, 300_000, 100_000],
        "macs": [40_000_000, 12_000_000, 4_000_000],
        "throughput": [50.0, 150.0, 400.0],
        "iters": [20, 20, 20],
        "batch_size": [1, 1, 1],
    }
)


def _write_sweep(directory, rows=ROWS, efficiency=True):
    directory.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=COLUMNS).to_csv(directory / RESULTS_FILE, index=False)
    if efficiency:
        EFFICIENCY.to_csv(directory / EFFICIENCY_FILE, index=False)
    return directory


@pytest.fixture
def sweep_dir(tmp_path):
    return _write_sweep(tmp_path / "sweep")


class TestLoad:
    """Test reading sweep results."""

    def test_seed_average_and_failures(self, sweep_dir):
        """Test seeds are averaged and failed cells dropped"""
        frame, efficiency = load_sweep_results(sweep_dir)
        baseline = frame[(frame["backbone_cfg"] == "small") & (frame["mode"] == "none")]
        assert baseline["j_err"].iloc[0] == pytest.approx(11.0)
        assert baseline["n_seeds"].iloc[0] == 2
        assert "combined" not in set(frame["mode"])
        assert len(efficiency) == 3

    def test_missing_results(self, tmp_path):
        """Test a directory without results is refused"""
        with pytest.raises(FileNotFoundError):
            load_sweep_results(tmp_path)

    def test_missing_efficiency(self, tmp_path):
        """Test the efficiency file is optional"""
        _, efficiency = load_sweep_results(_write_sweep(tmp_path / "sweep", efficiency=False))
        assert efficiency is None

    def test_missing_columns(self, tmp_path):
        """Test a results file without metric columns is refused"""
        tmp_path.joinpath(RESULTS_FILE).write_text("backbone_cfg,mode\nsmall,none\n")
        with pytest.raises(ValueError, match="missing columns"):
            load_sweep_results(tmp_path)


class TestTables:
    """Test table layout."""

    def test_table_order(self, sweep_dir):
        """Test baselines first, then one table per distillation mode that ran, then efficiency"""
        tables = build_tables(*load_sweep_results(sweep_dir))
        assert [t.name for t in tables] == ["baselines", "output", "feature", "efficiency"]

    def test_baselines(self, sweep_dir):
        """Test the teacher leads the baseline table"""
        baselines = build_tables(*load_sweep_results(sweep_dir))[0].frame
        assert list(baselines.columns) == ["Backbone-cfg", "J_err", "V_err", "F@5", "F@15"]
        assert list(baselines["Backbone-cfg"]) == ["teacher", "large", "small"]

    def test_feature_table(self, sweep_dir):
        """Test feature-level columns and the gap to each backbone's baseline"""
        feature = build_tables(*load_sweep_results(sweep_dir))[2].frame
        assert list(feature.columns) == ["Backbone-cfg", "λ_KD", "γ_FD", "J_err", "V_err", "F@5", "F@15", "ΔJ_err"]
        assert list(feature["Backbone-cfg"]) == ["large", "small", "small"]
        assert list(feature["ΔJ_err"]) == pytest.approx([-0.5, -0.5, -3.0])

    def test_missing_baseline_gives_nan(self, tmp_path):
        """Test ΔJ_err is NaN when the backbone's baseline did not run"""
        rows = [r for r in ROWS if not (r[1] == "large" and r[2] == "none")]
        tables = build_tables(*load_sweep_results(_write_sweep(tmp_path / "sweep", rows)))
        feature = next(t for t in tables if t.name == "feature").frame
        assert math.isnan(feature["ΔJ_err"].iloc[0])

    def test_stable_under_row_order(self, tmp_path):
        """Test shuffled result rows produce the same report"""
        forward = format_report(build_tables(*load_sweep_results(_write_sweep(tmp_path / "a"))))
        shuffled_rows = list(reversed(ROWS))
        shuffled = format_report(build_tables(*load_sweep_results(_write_sweep(tmp_path / "b", shuffled_rows))))
        assert forward == shuffled

    def test_efficiency_ratios(self, sweep_dir):
        """Test ratios against the teacher"""
        efficiency = build_tables(*load_sweep_results(sweep_dir))[-1].frame
        small = efficiency[efficiency["Backbone-cfg"] == "small"].iloc[0]
        assert small["Params vs teacher"] == pytest.approx(0.1)
        assert small["FPS vs teacher"] == pytest.approx(8.0)
        assert small["MMACs"] == pytest.approx(4.0)


class TestFormat:
    """Test rendering."""

    def test_markdown(self, sweep_dir):
        """Test Markdown tables with captions"""
        text = format_report(build_tables(*load_sweep_results(sweep_dir)), "md")
        header = next(line for line in text.splitlines() if "λ_KD" in line and "γ_FD" in line)
        assert [cell.strip() for cell in header.strip("|").split("|")][:4] == ["Backbone-cfg", "λ_KD", "γ_FD", "J_err"]
        assert "**Baselines" in text

    def test_markdown_pipe_table(self):
        """Test a table renders as a pipe table with formatted cells and a dash for missing values"""
        frame = pd.DataFrame({"Backbone-cfg": ["small", "large"], "J_err": [12.5, float("nan")], "F@5": [0.25, 0.5]})
        text = table_to_markdown(ReportTable("demo", "Demo table", frame))
        caption, blank, header, rule, *rows = text.splitlines()
        assert caption == "**Demo table**"
        assert blank == ""
        assert [c.strip() for c in header.strip("|").split("|")] == ["Backbone-cfg", "J_err", "F@5"]
        assert set(rule) <= set("|-: ")
        cells = [[c.strip() for c in row.strip("|").split("|")] for row in rows]
        assert cells == [["small", "12.50", "0.2500"], ["large", "–", "0.5000"]]

    def test_csv(self, sweep_dir):
        """Test CSV sections are separated by caption comments"""
        text = format_report(build_tables(*load_sweep_results(sweep_dir)), "csv")
        assert text.count("# ") == 4
        assert "Backbone-cfg,λ_KD,J_err,V_err,F@5,F@15,ΔJ_err" in text

    def test_unknown_format(self, sweep_dir):
        """Test unknown formats are refused"""
        with pytest.raises(ValueError):
            format_report(build_tables(*load_sweep_results(sweep_dir)), "html")

    def test_tradeoff_plot(self, sweep_dir, tmp_path):
        """Test the accuracy/throughput figure is written"""
        frame, efficiency = load_sweep_results(sweep_dir)
        path = write_tradeoff_plot(frame, efficiency, tmp_path / "plots" / "tradeoff.html")
        assert path.exists()
        assert "Accuracy vs throughput" in path.read_text()
