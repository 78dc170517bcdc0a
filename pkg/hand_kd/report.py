"""
Summary tables over a finished sweep directory.

The sweep writes one row per (student size, mode, λ, γ, seed) cell. This module averages the
seeds, compares every distilled configuration against the baseline of the same backbone and
lays the result out as the ablation tables (baselines, output-level, feature-level, combined)
plus an efficiency table. Tables render as Markdown or CSV; an optional plotly figure shows
the accuracy/throughput trade-off.
"""

import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import pandas as pd
import plotly.graph_objects as go

from .losses import KDMode
from .sweep import EFFICIENCY_FILE, RESULTS_FILE, TEACHER_LABEL

logger = logging.getLogger(__name__)

GROUP_COLUMNS = ["backbone_cfg", "mode", "lambda_kd", "gamma_fd"]
MODE_ORDER = {mode.value: i for i, mode in enumerate(KDMode)}

TABLE_CAPTIONS = {
    "baselines": "Baselines: students trained on ground truth only, with the frozen teacher for reference.",
    "output": "Output-level distillation: effect of the distillation weight λ_KD.",
    "feature": "Feature-level distillation: effect of λ_KD and the feature weight γ_FD.",
    "combined": "Combined distillation: output-level and feature-level terms together.",
    "efficiency": "Efficiency: parameter counts, multiply-accumulates per forward and throughput.",
}


@dataclass
class ReportTable:
    name: str
    caption: str
    frame: pd.DataFrame


def _f_columns(frame: pd.DataFrame) -> List[str]:
    columns = [c for c in frame.columns if c.startswith("f@")]
    return sorted(columns, key=lambda c: float(c[2:]))


def load_sweep_results(sweep_dir: Union[str, Path]) -> Tuple[pd.DataFrame, Optional[pd.DataFrame]]:
    """
    Read a sweep directory and average the successful cells over seeds.

    Returns:
        (aggregated frame with an `n_seeds` column, efficiency frame or None)

    Raises:
        FileNotFoundError: If the directory holds no results file
        ValueError: If the results file is missing required columns
    """
    sweep_dir = Path(sweep_dir)
    results_path = sweep_dir / RESULTS_FILE
    if not results_path.exists():
        raise FileNotFoundError(f"No {RESULTS_FILE} in {sweep_dir}")

    raw = pd.read_csv(results_path)
    missing = [c for c in GROUP_COLUMNS + ["status", "j_err", "v_err"] if c not in raw.columns]
    if missing:
        raise ValueError(f"{results_path}: missing columns {missing}")

    failed = raw[raw["status"] != "ok"]
    if not failed.empty:
        logger.warning(f"Skipping {len(failed)} failed sweep cells")
    ok = raw[raw["status"] == "ok"]

    metric_columns = ["j_err", "v_err"] + _f_columns(raw)
    if "teacher_mse" in raw.columns:
        metric_columns.append("teacher_mse")
    grouped = ok.groupby(GROUP_COLUMNS, sort=True)
    frame = grouped[metric_columns].mean()
    frame["n_seeds"] = grouped.size()
    frame = frame.reset_index()
    logger.info(f"Loaded {len(ok)} sweep cells into {len(frame)} configurations")

    efficiency = None
    efficiency_path = sweep_dir / EFFICIENCY_FILE
    if efficiency_path.exists():
        efficiency = pd.read_csv(efficiency_path)
    else:
        logger.warning(f"No {EFFICIENCY_FILE} in {sweep_dir}; efficiency table omitted")
    return frame, efficiency


def _sort_rows(frame: pd.DataFrame) -> pd.DataFrame:
    keyed = frame.assign(_mode_rank=frame["mode"].map(MODE_ORDER))
    keyed = keyed.sort_values(["_mode_rank", "lambda_kd", "gamma_fd", "backbone_cfg"], kind="mergesort")
    return keyed.drop(columns="_mode_rank").reset_index(drop=True)


def _display_columns(frame: pd.DataFrame, with_gamma: bool, with_lambda: bool = True) -> pd.DataFrame:
    f_columns = _f_columns(frame)
    out = pd.DataFrame({"Backbone-cfg": frame["backbone_cfg"].values})
    if with_lambda:
        out["λ_KD"] = frame["lambda_kd"].values
    if with_gamma:
        out["γ_FD"] = frame["gamma_fd"].values
    out["J_err"] = frame["j_err"].values
    out["V_err"] = frame["v_err"].values
    for column in f_columns:
        out[f"F@{column[2:]}"] = frame[column].values
    return out


def build_tables(frame: pd.DataFrame, efficiency: Optional[pd.DataFrame] = None) -> List[ReportTable]:
    """
    Lay out the aggregated sweep as ordered tables. Distilled rows carry ΔJ_err against
    the baseline of the same backbone (negative is better); it is NaN when that baseline
    was not run.
    """
    frame = _sort_rows(frame)
    is_teacher = frame["backbone_cfg"] == TEACHER_LABEL
    students = frame[~is_teacher]
    baselines = students[students["mode"] == KDMode.NONE.value]
    baseline_j = dict(zip(baselines["backbone_cfg"], baselines["j_err"]))

    tables = []
    reference = pd.concat([frame[is_teacher], baselines])
    tables.append(ReportTable(
        "baselines",
        TABLE_CAPTIONS["baselines"],
        _display_columns(reference, with_gamma=False, with_lambda=False),
    ))

    for mode in (KDMode.OUTPUT, KDMode.FEATURE, KDMode.COMBINED):
        rows = students[students["mode"] == mode.value]
        if rows.empty:
            continue
        table = _display_columns(rows, with_gamma=mode.uses_features)
        table["ΔJ_err"] = [
            j - baseline_j.get(cfg, math.nan) for cfg, j in zip(rows["backbone_cfg"], rows["j_err"])
        ]
        tables.append(ReportTable(mode.value, TABLE_CAPTIONS[mode.value], table))

    if efficiency is not None and not efficiency.empty:
        tables.append(ReportTable("efficiency", TABLE_CAPTIONS["efficiency"], efficiency_table(efficiency)))
    return tables


def efficiency_table(efficiency: pd.DataFrame) -> pd.DataFrame:
    """Parameter counts in millions, MMACs per forward and FPS, with ratios against the teacher."""
    efficiency = efficiency.sort_values("backbone_cfg", kind="mergesort").reset_index(drop=True)
    teacher = efficiency[efficiency["backbone_cfg"] == TEACHER_LABEL]
    teacher_fps = float(teacher["throughput"].iloc[0]) if not teacher.empty else math.nan
    teacher_params = float(teacher["params_total"].iloc[0]) if not teacher.empty else math.nan

    table = pd.DataFrame({"Backbone-cfg": efficiency["backbone_cfg"].values})
    table["Trainable (M)"] = efficiency["params_trainable"].values / 1e6
    table["Total (M)"] = efficiency["params_total"].values / 1e6
    table["MMACs"] = efficiency["macs"].values / 1e6
    table["FPS"] = efficiency["throughput"].values
    table["Params vs teacher"] = efficiency["params_total"].values / teacher_params
    table["FPS vs teacher"] = efficiency["throughput"].values / teacher_fps
    return table


def _format_cell(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "–"
        return f"{value:.4f}" if abs(value) < 10 else f"{value:.2f}"
    return str(value)


def table_to_markdown(table: ReportTable) -> str:
    cells = table.frame.apply(lambda column: column.map(_format_cell))
    body = cells.to_markdown(index=False, tablefmt="pipe", disable_numparse=True)
    return f"**{table.caption}**\n\n{body}"


def format_report(tables: Sequence[ReportTable], fmt: str = "md") -> str:
    """
    Raises:
        ValueError: On an unknown format
    """
    if fmt == "md":
        return "\n\n".join(table_to_markdown(t) for t in tables) + "\n"
    if fmt == "csv":
        out = io.StringIO()
        for i, table in enumerate(tables):
            if i:
                out.write("\n")
            out.write(f"# {table.caption}\n")
            table.frame.to_csv(out, index=False, float_format="%.6f", lineterminator="\n")
        return out.getvalue()
    raise ValueError(f"Unknown report format '{fmt}' (expected md or csv)")


def write_tradeoff_plot(
    frame: pd.DataFrame,
    efficiency: pd.DataFrame,
    path: Union[str, Path],
) -> Path:
    """
    J_err against FPS, one marker per configuration, grouped by distillation mode.

    Raises:
        ValueError: If no configuration has a throughput measurement
    """
    fps = dict(zip(efficiency["backbone_cfg"], efficiency["throughput"]))
    frame = _sort_rows(frame[frame["backbone_cfg"].isin(fps)])
    if frame.empty:
        raise ValueError("No sweep configuration has a throughput measurement")

    fig = go.Figure()
    for mode in KDMode:
        rows = frame[(frame["mode"] == mode.value) & (frame["backbone_cfg"] != TEACHER_LABEL)]
        if rows.empty:
            continue
        labels = [
            f"{cfg}<br>λ_KD={lam:g} γ_FD={gam:g}<br>J_err={j:.3f} mm"
            for cfg, lam, gam, j in zip(rows["backbone_cfg"], rows["lambda_kd"], rows["gamma_fd"], rows["j_err"])
        ]
        fig.add_trace(go.Scatter(
            x=[fps[cfg] for cfg in rows["backbone_cfg"]],
            y=rows["j_err"],
            mode="markers",
            marker=dict(size=10),
            name=mode.value,
            hovertext=labels,
            hoverinfo="text",
        ))

    teacher = frame[frame["backbone_cfg"] == TEACHER_LABEL]
    if not teacher.empty:
        fig.add_trace(go.Scatter(
            x=[fps[TEACHER_LABEL]],
            y=teacher["j_err"].iloc[:1],
            mode="markers+text",
            marker=dict(size=14, symbol="diamond", color="black"),
            text=["teacher"],
            textposition="top center",
            name="teacher",
        ))

    fig.update_layout(
        title="Accuracy vs throughput",
        xaxis_title="Forwards per second",
        yaxis_title="PA-MPJPE (mm)",
        showlegend=True,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path), include_plotlyjs="cdn")
    logger.info(f"Wrote trade-off plot to {path}")
    return path


__all__ = [
    "ReportTable",
    "load_sweep_results",
    "build_tables",
    "efficiency_table",
    "table_to_markdown",
    "format_report",
    "write_tradeoff_plot",
]
