"""
Distillation ablation sweep: every cell distills one student and scores it.

Grid files are line-oriented: one cell per line as `mode lambda gamma student_size seed`,
with `#` starting a comment.
"""

import copy
import json
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from .cache import TeacherOutputCache
from .data import Dataset, check_rig
from .hand_model import HandRig
from .losses import KDConfig, KDMode
from .metrics import DEFAULT_THRESHOLDS, BenchResult, MetricsReport, bench, evaluate, teacher_agreement
from .nets import Model, NET_PRESETS, NetConfig, init_model, preset, save_model
from .trainer import TeacherOutputs, TrainConfig, distill, precompute_teacher_outputs
from .validation import summarize_validation, validate_grid

logger = logging.getLogger(__name__)

STUDENT_SIZES = ("small", "large")
DEFAULT_SEEDS = (0, 1, 2)
OUTPUT_LAMBDAS = (0.3, 0.5, 0.8)
FEATURE_PAIRS = ((0.3, 6.0), (0.5, 6.0), (0.8, 12.0))
TEACHER_LABEL = "teacher"

RESULTS_FILE = "sweep_results.csv"
EFFICIENCY_FILE = "efficiency.csv"


@dataclass(frozen=True)
class SweepCell:
    mode: KDMode
    lambda_kd: float
    gamma_fd: float
    student_size: str
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "mode", KDMode.parse(self.mode))
        if self.student_size not in NET_PRESETS or self.student_size == TEACHER_LABEL:
            raise ValueError(f"Unknown student size '{self.student_size}'")

    @property
    def label(self) -> str:
        return f"{self.student_size}_{self.mode.value}_l{self.lambda_kd:g}_g{self.gamma_fd:g}_s{self.seed}"

    def kd_config(self) -> KDConfig:
        if self.mode is KDMode.NONE:
            return KDConfig(KDMode.NONE, lambda_kd=0.0, gamma_fd=0.0)
        return KDConfig(self.mode, self.lambda_kd, self.gamma_fd)


def default_grid(
    sizes: Sequence[str] = STUDENT_SIZES,
    seeds: Sequence[int] = DEFAULT_SEEDS,
) -> List[SweepCell]:
    """Baselines, output-level λ values and the paired (λ, γ) feature and combined settings."""
    cells = []
    for size in sizes:
        for seed in seeds:
            cells.append(SweepCell(KDMode.NONE, 0.0, 0.0, size, seed))
            cells.extend(SweepCell(KDMode.OUTPUT, lam, 0.0, size, seed) for lam in OUTPUT_LAMBDAS)
            cells.extend(SweepCell(KDMode.FEATURE, lam, gam, size, seed) for lam, gam in FEATURE_PAIRS)
            cells.extend(SweepCell(KDMode.COMBINED, lam, gam, size, seed) for lam, gam in FEATURE_PAIRS)
    return cells


def parse_grid_file(text: str) -> List[SweepCell]:
    """
    Raises:
        ValueError: On a malformed line, naming its line number
    """
    cells = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ValueError(f"Grid line {number}: expected 'mode lambda gamma student_size seed', got '{raw.strip()}'")
        mode, lam, gam, size, seed = fields
        try:
            cells.append(SweepCell(KDMode.parse(mode), float(lam), float(gam), size, int(seed)))
        except ValueError as e:
            raise ValueError(f"Grid line {number}: {e}") from e
    return cells


def format_grid_file(cells: Sequence[SweepCell]) -> str:
    lines = ["# mode lambda gamma student_size seed"]
    lines += [f"{c.mode.value} {c.lambda_kd:g} {c.gamma_fd:g} {c.student_size} {c.seed}" for c in cells]
    return "\n".join(lines) + "\n"


@dataclass
class SweepRow:
    index: int
    cell: Optional[SweepCell]
    status: str = "ok"
    report: Optional[MetricsReport] = None
    agreement: Optional[float] = None
    final_loss_gt: Optional[float] = None
    model: Optional[Model] = field(default=None, repr=False)
    train_log_csv: Optional[str] = field(default=None, repr=False)

    def to_record(self, thresholds: Sequence[float]) -> dict:
        if self.cell is None:
            record = {"index": self.index, "backbone_cfg": TEACHER_LABEL, "mode": KDMode.NONE.value,
                      "lambda_kd": 0.0, "gamma_fd": 0.0, "seed": -1}
        else:
            record = {
                "index": self.index,
                "backbone_cfg": self.cell.student_size,
                "mode": self.cell.mode.value,
                "lambda_kd": self.cell.lambda_kd,
                "gamma_fd": self.cell.gamma_fd,
                "seed": self.cell.seed,
            }
        record["status"] = self.status
        report = self.report
        record["j_err"] = report.j_err if report else float("nan")
        record["v_err"] = report.v_err if report else float("nan")
        for t in thresholds:
            record[f"f@{t:g}"] = report.f_at.get(float(t), float("nan")) if report else float("nan")
        record["params_trainable"] = report.params_trainable if report else 0
        record["params_total"] = report.params_total if report else 0
        record["teacher_mse"] = self.agreement if self.agreement is not None else float("nan")
        record["final_loss_gt"] = self.final_loss_gt if self.final_loss_gt is not None else float("nan")
        return record


@dataclass
class SweepResults:
    rows: List[SweepRow]
    teacher_row: Optional[SweepRow] = None
    efficiency: Dict[str, BenchResult] = field(default_factory=dict)
    thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS

    @property
    def failures(self) -> List[SweepRow]:
        return [r for r in self.rows if r.status != "ok"]

    def to_frame(self) -> pd.DataFrame:
        rows = ([self.teacher_row] if self.teacher_row else []) + self.rows
        return pd.DataFrame([r.to_record(self.thresholds) for r in rows])

    def efficiency_frame(self) -> pd.DataFrame:
        records = [{"backbone_cfg": cfg, **result.to_dict()} for cfg, result in self.efficiency.items()]
        return pd.DataFrame(records)


def _student_config(size: str, seed: int, dataset: Dataset) -> NetConfig:
    return replace(preset(size, seed), input_size=dataset.image_size)


def _run_cell(
    index: int,
    cell: SweepCell,
    teacher: Model,
    dataset: Dataset,
    eval_dataset: Dataset,
    rig: HandRig,
    base_cfg: TrainConfig,
    teacher_outputs: Optional[TeacherOutputs],
    thresholds: Sequence[float],
) -> SweepRow:
    cfg = copy.deepcopy(base_cfg)
    cfg.seed = cell.seed
    cfg.kd = cell.kd_config()
    student_cfg = _student_config(cell.student_size, cell.seed, dataset)
    student, log = distill(
        teacher,
        student_cfg,
        cfg,
        dataset,
        rig,
        teacher_outputs=teacher_outputs if cell.mode is not KDMode.NONE else None,
    )
    report = evaluate(student, eval_dataset, rig, thresholds)
    agreement = teacher_agreement(student, teacher, eval_dataset, rig)
    logger.info(f"Cell {index} ({cell.label}): J_err {report.j_err:.3f} mm")
    return SweepRow(
        index=index,
        cell=cell,
        report=report,
        agreement=agreement,
        final_loss_gt=log.records[-1].loss_gt,
        model=student,
        train_log_csv=log.to_csv(),
    )


def run_sweep(
    cells: Sequence[SweepCell],
    dataset: Dataset,
    rig: HandRig,
    teacher: Model,
    base_cfg: Optional[TrainConfig] = None,
    eval_dataset: Optional[Dataset] = None,
    jobs: int = 1,
    cache: Optional[TeacherOutputCache] = None,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    bench_iters: int = 20,
) -> SweepResults:
    """
    Distill and evaluate every cell, then score the teacher and benchmark each backbone.

    A failing cell is logged and recorded with its error in `status`; the sweep continues.

    Raises:
        ValueError: If the grid fails validation, the teacher is not frozen
            or a dataset was generated with another rig
    """
    summary = summarize_validation(validate_grid(cells))
    if not summary["is_valid"]:
        raise ValueError(f"Invalid sweep grid: {summary['first_error']}")
    if not teacher.frozen:
        raise ValueError("Teacher must be frozen before a sweep")
    base_cfg = base_cfg or TrainConfig()
    thresholds = tuple(sorted(float(t) for t in thresholds))
    if eval_dataset is None:
        logger.warning("No evaluation dataset given; scoring on the training data")
        eval_dataset = dataset
    check_rig(dataset, rig)
    check_rig(eval_dataset, rig)

    teacher_outputs = None
    if any(c.mode is not KDMode.NONE for c in cells):
        teacher_outputs = precompute_teacher_outputs(teacher, dataset, rig, cache)

    rows: List[Optional[SweepRow]] = [None] * len(cells)
    args = (teacher, dataset, eval_dataset, rig, base_cfg, teacher_outputs, thresholds)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        futures = {executor.submit(_run_cell, i, cell, *args): i for i, cell in enumerate(cells)}
        for future in as_completed(futures):
            i = futures[future]
            try:
                rows[i] = future.result()
            except Exception as e:
                logger.error(f"Sweep cell {i} ({cells[i].label}) failed: {e}", exc_info=True)
                rows[i] = SweepRow(index=i, cell=cells[i], status=f"failed: {type(e).__name__}: {e}")

    teacher_row = SweepRow(index=-1, cell=None, report=evaluate(teacher, eval_dataset, rig, thresholds))

    efficiency = {TEACHER_LABEL: bench(teacher, rig=rig, iters=bench_iters)}
    for size in sorted({c.student_size for c in cells}):
        efficiency[size] = bench(init_model(_student_config(size, 0, dataset)), rig=rig, iters=bench_iters)

    results = SweepResults(rows, teacher_row, efficiency, thresholds)
    logger.info(f"Sweep finished: {len(cells)} cells, {len(results.failures)} failed")
    return results


def write_sweep_results(results: SweepResults, out_dir: Union[str, Path]) -> Path:
    """
    Write `sweep_results.csv` (deterministic), `efficiency.csv` (timings) and one
    directory per cell with its model, training log and metrics.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results.to_frame().to_csv(out_dir / RESULTS_FILE, index=False, float_format="%.6f")
    results.efficiency_frame().to_csv(out_dir / EFFICIENCY_FILE, index=False, float_format="%.6f")

    for row in results.rows:
        cell_dir = out_dir / "cells" / f"{row.index:03d}_{row.cell.label}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        if row.model is not None:
            save_model(row.model, cell_dir / "student.hkdm")
        if row.train_log_csv is not None:
            (cell_dir / "train_log.csv").write_text(row.train_log_csv)
        if row.report is not None:
            (cell_dir / "metrics.json").write_text(json.dumps(row.report.to_dict(), indent=2, sort_keys=True))
        else:
            (cell_dir / "status.txt").write_text(row.status + "\n")
    logger.info(f"Wrote sweep results to {out_dir}")
    return out_dir


__all__ = [
    "SweepCell",
    "SweepRow",
    "SweepResults",
    "default_grid",
    "parse_grid_file",
    "format_grid_file",
    "run_sweep",
    "write_sweep_results",
]
