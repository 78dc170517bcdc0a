"""
CLI entry point for the hand distillation laboratory.
"""

import sys
import json
import time
import logging
import argparse
from pathlib import Path
from typing import List, Optional, Tuple

from .cache import get_cache
from .data import (
    DEFAULT_DATASET_FOCAL,
    DEFAULT_FRAC_2D_ONLY,
    DEFAULT_N_TRAIN,
    DEFAULT_NOISE_STD,
    DEFAULT_SIGMA,
    load_dataset,
    make_dataset,
    save_dataset,
)
from .formats import FormatError
from .hand_model import DEFAULT_N_VERTICES, load_rig, make_synthetic_rig, save_rig
from .losses import KDConfig, KDMode
from .manifest import RunManifest, default_output_dir
from .metrics import DEFAULT_THRESHOLDS, bench, evaluate
from .nets import NET_PRESETS, NetConfig, freeze, load_model, preset
from .report import build_tables, format_report, load_sweep_results, write_tradeoff_plot
from .sweep import default_grid, format_grid_file, parse_grid_file, run_sweep, write_sweep_results
from .trainer import NumericalAbort, TrainConfig, distill, save_checkpoint, train_teacher
from .validation import summarize_validation, validate_dataset, validate_rig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def setup_logging(verbose: bool = False, log_file: Optional[str] = None):
    """
    Configure logging for the application.

    Args:
        verbose: Enable debug logging
        log_file: Optional path to log file
    """
    level = logging.DEBUG if verbose else logging.INFO

    detailed_formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )
    simple_formatter = logging.Formatter('%(levelname)s: %(message)s')

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    root_logger.handlers.clear()

    # Console handler (less verbose)
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(logging.WARNING if not verbose else logging.DEBUG)
    console_handler.setFormatter(simple_formatter)
    root_logger.addHandler(console_handler)

    # File handler (more detailed)
    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(level)
        file_handler.setFormatter(detailed_formatter)
        root_logger.addHandler(file_handler)
    elif verbose:
        file_handler = logging.FileHandler('hand_kd.log')
        file_handler.setLevel(level)
        file_handler.setFormatter(detailed_formatter)
        root_logger.addHandler(file_handler)

    return root_logger


class UsageError(Exception):
    """Bad command-line usage; exits with code 1."""


class ArgumentParser(argparse.ArgumentParser):
    """argparse reports usage errors with exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"Error: {message}\n")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _parse_thresholds(text: str) -> List[float]:
    try:
        thresholds = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--thresholds must be comma-separated numbers, got '{text}'")
    if not thresholds or min(thresholds) <= 0:
        raise UsageError(f"--thresholds must be positive, got '{text}'")
    return thresholds


def _output_path(explicit: Optional[str], default_name: str) -> Path:
    return Path(explicit) if explicit else default_output_dir() / default_name


def _options(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose", "log_file")}


def _load_rig_arg(path: Optional[str]):
    if path:
        return load_rig(path)
    logger.info("No --rig given; using the default synthetic rig")
    return make_synthetic_rig()


def _train_config(args: argparse.Namespace) -> Tuple[TrainConfig, Optional[NetConfig]]:
    """TrainConfig from `--config` (with an optional "net" block), then explicit flags."""
    data = {}
    if args.config:
        config_path = Path(args.config)
        if not config_path.exists():
            raise FileNotFoundError(f"Config file not found: {config_path}")
        try:
            data = json.loads(config_path.read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f"{config_path}: invalid JSON ({e})") from e
    net_data = data.pop("net", None)
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("seed", "seed"), ("lr", "lr")):
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    cfg = TrainConfig.from_dict(data)
    net_cfg = NetConfig.from_dict(net_data) if net_data is not None else None
    return cfg, net_cfg


def _write_run(model, log, out: Path, manifest: RunManifest) -> None:
    save_checkpoint(out, model, log.optimizer_state, log.projection)
    log_path = out.with_name(out.stem + ".train_log.csv")
    log.write_csv(log_path)
    manifest.extra["timing_epoch_wall_s"] = [round(t, 3) for t in log.wall_times]
    manifest.write_beside(out)
    print(f"Wrote {out} and {log_path}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_rig(args: argparse.Namespace) -> int:
    rig = make_synthetic_rig(seed=args.seed, n_vertices=args.vertices)
    summary = summarize_validation(validate_rig(rig))
    if not summary["is_valid"]:
        print(f"Error: generated rig is invalid: {summary['first_error']}", file=sys.stderr)
        return EXIT_DATA

    out = _output_path(args.out, "rig.hkdr")
    save_rig(rig, out)
    RunManifest("gen-rig", _options(args), seed=args.seed).write_beside(out)
    print(f"Wrote rig with {rig.n_vertices} vertices to {out}")
    return EXIT_OK


def cmd_gen_data(args: argparse.Namespace) -> int:
    rig = _load_rig_arg(args.rig)
    dataset = make_dataset(
        args.n,
        args.seed,
        rig,
        frac_2d_only=args.frac_2d_only,
        sigma=args.sigma,
        noise_std=args.noise_std,
        focal=args.focal,
        max_workers=args.jobs,
    )
    summary = summarize_validation(validate_dataset(dataset, rig))
    if not summary["is_valid"]:
        print(f"Error: generated dataset is invalid: {summary['first_error']}", file=sys.stderr)
        return EXIT_DATA

    out = _output_path(args.out, "data.hkdd")
    save_dataset(dataset, out)
    manifest = RunManifest("gen-data", _options(args), seed=args.seed)
    if args.rig:
        manifest.add_input("rig", args.rig)
    manifest.write_beside(out)
    print(f"Wrote {len(dataset)} samples ({dataset.n_only_2d} 2D-only) to {out}")
    return EXIT_OK


def cmd_train_teacher(args: argparse.Namespace) -> int:
    rig = _load_rig_arg(args.rig)
    dataset = load_dataset(args.data)
    eval_dataset = load_dataset(args.eval_data) if args.eval_data else None
    cfg, net_cfg = _train_config(args)
    net_cfg = net_cfg or preset(args.preset, cfg.seed)

    model, log = train_teacher(dataset, cfg, rig, net_cfg=net_cfg, eval_dataset=eval_dataset)
    freeze(model)

    out = _output_path(args.out, "teacher.hkdm")
    manifest = RunManifest("train-teacher", {**_options(args), "train": cfg.to_dict(), "net": net_cfg.to_dict()},
                           seed=cfg.seed)
    manifest.add_input("data", args.data)
    _write_run(model, log, out, manifest)
    return EXIT_OK


def cmd_distill(args: argparse.Namespace) -> int:
    rig = _load_rig_arg(args.rig)
    teacher = freeze(load_model(args.teacher))
    dataset = load_dataset(args.data)
    eval_dataset = load_dataset(args.eval_data) if args.eval_data else None
    cfg, net_cfg = _train_config(args)

    if args.mode is not None:
        mode = KDMode.parse(args.mode)
    else:
        mode = cfg.kd.mode if args.config else KDMode.COMBINED
    lambda_kd = args.lambda_kd if args.lambda_kd is not None else cfg.kd.lambda_kd
    gamma_fd = args.gamma_fd if args.gamma_fd is not None else cfg.kd.gamma_fd
    if mode is KDMode.NONE:
        if args.lambda_kd is not None:
            logger.warning(f"--lambda-kd {args.lambda_kd} is ignored in mode 'none'; training a baseline")
        cfg.kd = KDConfig(KDMode.NONE, 0.0, 0.0)
    else:
        if not mode.uses_features and args.gamma_fd is not None:
            logger.warning(f"--gamma-fd {args.gamma_fd} is ignored in mode '{mode.value}'")
        cfg.kd = KDConfig(mode, lambda_kd, gamma_fd if mode.uses_features else 0.0)
    student_cfg = net_cfg or preset(args.student_size, cfg.seed)

    cache = get_cache(enabled=not args.no_cache)
    student, log = distill(teacher, student_cfg, cfg, dataset, rig, eval_dataset=eval_dataset, cache=cache)

    out = _output_path(args.out, f"student_{args.student_size}_{mode.value}.hkdm")
    manifest = RunManifest("distill", {**_options(args), "train": cfg.to_dict(), "net": student_cfg.to_dict()},
                           seed=cfg.seed)
    manifest.add_input("teacher", args.teacher)
    manifest.add_input("data", args.data)
    _write_run(student, log, out, manifest)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    rig = _load_rig_arg(args.rig)
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    thresholds = _parse_thresholds(args.thresholds)

    report = evaluate(model, dataset, rig, thresholds)
    print(report.to_text())

    out = _output_path(args.out, "eval.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(",".join(report.csv_header()) + "\n" + ",".join(report.to_csv_row()) + "\n")
    manifest = RunManifest("eval", _options(args))
    manifest.add_input("model", args.model)
    manifest.add_input("data", args.data)
    manifest.write_beside(out)
    print(f"Wrote {out}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    rig = _load_rig_arg(args.rig)
    model = load_model(args.model)
    cfg = model.config
    shape = (args.batch_size, cfg.input_channels) + cfg.input_size
    result = bench(model, input_shape=shape, warmup=args.warmup, iters=args.iters, rig=rig)
    if args.json:
        print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    else:
        print(result.to_text())
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    if args.grid_file:
        grid_path = Path(args.grid_file)
        if not grid_path.exists():
            raise FileNotFoundError(f"Grid file not found: {grid_path}")
        cells = parse_grid_file(grid_path.read_text())
    else:
        cells = default_grid()
        logger.info(f"No --grid-file given; using the default grid of {len(cells)} cells")

    out_dir = Path(args.out_dir) if args.out_dir else default_output_dir() / "sweep"
    if args.write_grid:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "grid.txt").write_text(format_grid_file(cells))

    rig = _load_rig_arg(args.rig)
    teacher = freeze(load_model(args.teacher))
    dataset = load_dataset(args.data)
    eval_dataset = load_dataset(args.eval_data) if args.eval_data else None
    base_cfg, _ = _train_config(args)
    thresholds = _parse_thresholds(args.thresholds)

    start = time.perf_counter()
    results = run_sweep(
        cells,
        dataset,
        rig,
        teacher,
        base_cfg=base_cfg,
        eval_dataset=eval_dataset,
        jobs=args.jobs,
        cache=get_cache(enabled=not args.no_cache),
        thresholds=thresholds,
        bench_iters=args.bench_iters,
    )
    write_sweep_results(results, out_dir)

    manifest = RunManifest("sweep", {**_options(args), "train": base_cfg.to_dict()}, seed=base_cfg.seed)
    manifest.add_input("teacher", args.teacher)
    manifest.add_input("data", args.data)
    if args.eval_data:
        manifest.add_input("eval_data", args.eval_data)
    manifest.extra["timing_sweep_s"] = round(time.perf_counter() - start, 3)
    manifest.extra["failed_cells"] = [row.index for row in results.failures]
    manifest.write(out_dir / "manifest.json")

    print(f"Sweep of {len(cells)} cells written to {out_dir} ({len(results.failures)} failed)")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    frame, efficiency = load_sweep_results(args.sweep_dir)
    text = format_report(build_tables(frame, efficiency), args.format)
    if args.out:
        Path(args.out).write_text(text)
        print(f"Wrote {args.out}")
    else:
        print(text, end="")
    if args.plot:
        if efficiency is None:
            logger.warning("--plot needs efficiency.csv; skipping the plot")
        else:
            write_tradeoff_plot(frame, efficiency, args.plot)
    return EXIT_OK


def cmd_cache(args: argparse.Namespace) -> int:
    cache = get_cache()
    if args.clear:
        cleared = cache.clear(older_than_seconds=args.older_than)
        print(f"Cleared {cleared} cache entries")
    else:
        print(json.dumps(cache.get_stats(), indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, help="JSON file with TrainConfig fields and an optional 'net' block")
    parser.add_argument("--epochs", type=int, help="Training epochs (overrides --config)")
    parser.add_argument("--lr", type=float, help="Adam learning rate (overrides --config)")
    parser.add_argument("--batch-size", type=int, help="Minibatch size (overrides --config)")
    parser.add_argument("--seed", type=int, help="Training seed (overrides --config)")
    parser.add_argument("--eval-data", type=str, help="Dataset scored after each epoch")


def build_parser() -> ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="Enable verbose logging (DEBUG level)")
    common.add_argument("--log-file", type=str, help="Path to log file (default: hand_kd.log if verbose)")
    common.add_argument("--no-cache", action="store_true", help="Disable the teacher-output cache")

    parser = ArgumentParser(
        prog="hand_kd",
        description="Distill 3D hand reconstruction networks into smaller students on synthetic data.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate a rig and train/eval datasets
  python -m hand_kd gen-rig --out runs/rig.hkdr
  python -m hand_kd gen-data --rig runs/rig.hkdr --n 2000 --seed 0 --out runs/train.hkdd
  python -m hand_kd gen-data --rig runs/rig.hkdr --n 500 --seed 1 --out runs/eval.hkdd

  # Train and freeze a teacher, then distill a small student
  python -m hand_kd train-teacher --rig runs/rig.hkdr --data runs/train.hkdd --out runs/teacher.hkdm
  python -m hand_kd distill --rig runs/rig.hkdr --teacher runs/teacher.hkdm --data runs/train.hkdd \\
      --mode combined --lambda-kd 0.5 --gamma-fd 6 --student-size small --out runs/student.hkdm

  # Score, time and sweep
  python -m hand_kd eval --rig runs/rig.hkdr --model runs/student.hkdm --data runs/eval.hkdd
  python -m hand_kd sweep --rig runs/rig.hkdr --teacher runs/teacher.hkdm --data runs/train.hkdd \\
      --eval-data runs/eval.hkdd --jobs 4 --out-dir runs/sweep
  python -m hand_kd report --sweep-dir runs/sweep --format md --plot runs/tradeoff.html
        """
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    sub.required = True

    p = sub.add_parser("gen-rig", parents=[common], help="Generate a synthetic hand rig")
    p.add_argument("--seed", type=int, default=0, help="Rig seed (default: 0)")
    p.add_argument("--vertices", type=int, default=DEFAULT_N_VERTICES,
                   help=f"Mesh vertex count (default: {DEFAULT_N_VERTICES})")
    p.add_argument("--out", type=str, help="Output rig file (default: $HAND_KD_OUTPUT_DIR/rig.hkdr)")
    p.set_defaults(func=cmd_gen_rig)

    p = sub.add_parser("gen-data", parents=[common], help="Generate a synthetic dataset")
    p.add_argument("--rig", type=str, help="Rig file (default: the synthetic rig with seed 0)")
    p.add_argument("--n", type=int, default=DEFAULT_N_TRAIN, help=f"Number of samples (default: {DEFAULT_N_TRAIN})")
    p.add_argument("--seed", type=int, default=0, help="Dataset seed (default: 0)")
    p.add_argument("--frac-2d-only", type=float, default=DEFAULT_FRAC_2D_ONLY,
                   help=f"Fraction of samples with 2D labels only (default: {DEFAULT_FRAC_2D_ONLY})")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA, help=f"Heatmap σ in px (default: {DEFAULT_SIGMA})")
    p.add_argument("--noise-std", type=float, default=DEFAULT_NOISE_STD,
                   help=f"Heatmap noise std (default: {DEFAULT_NOISE_STD})")
    p.add_argument("--focal", type=float, default=DEFAULT_DATASET_FOCAL,
                   help=f"Focal length in px (default: {DEFAULT_DATASET_FOCAL:g})")
    p.add_argument("--jobs", type=int, default=1, help="Worker threads (default: 1)")
    p.add_argument("--out", type=str, help="Output dataset file (default: $HAND_KD_OUTPUT_DIR/data.hkdd)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", parents=[common], help="Train and freeze a teacher network")
    p.add_argument("--data", type=str, required=True, help="Training dataset")
    p.add_argument("--rig", type=str, help="Rig file the dataset was generated with")
    p.add_argument("--preset", type=str, default="teacher", choices=sorted(NET_PRESETS),
                   help="Network preset when --config has no 'net' block (default: teacher)")
    _add_training_flags(p)
    p.add_argument("--out", type=str, help="Output model file (default: $HAND_KD_OUTPUT_DIR/teacher.hkdm)")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", parents=[common], help="Distill a student from a frozen teacher")
    p.add_argument("--teacher", type=str, required=True, help="Teacher model file")
    p.add_argument("--data", type=str, required=True, help="Training dataset")
    p.add_argument("--rig", type=str, help="Rig file the dataset was generated with")
    p.add_argument("--mode", type=str, choices=[m.value for m in KDMode],
                   help="Distillation mode (default: from --config, else combined)")
    p.add_argument("--lambda-kd", type=float, help="Distillation weight λ_KD (default: 0.5)")
    p.add_argument("--gamma-fd", type=float, help="Feature weight γ_FD (default: 6)")
    p.add_argument("--student-size", type=str, default="small",
                   choices=sorted(n for n in NET_PRESETS if n != "teacher"), help="Student preset (default: small)")
    _add_training_flags(p)
    p.add_argument("--out", type=str, help="Output model file")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", parents=[common], help="Score a model on a dataset")
    p.add_argument("--model", type=str, required=True, help="Model file")
    p.add_argument("--data", type=str, required=True, help="Evaluation dataset")
    p.add_argument("--rig", type=str, help="Rig file the dataset was generated with")
    p.add_argument("--thresholds", type=str, default=",".join(f"{t:g}" for t in DEFAULT_THRESHOLDS),
                   help="Comma-separated F-score thresholds in mm (default: 5,15)")
    p.add_argument("--out", type=str, help="Metrics CSV (default: $HAND_KD_OUTPUT_DIR/eval.csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="Report parameters, MACs and throughput")
    p.add_argument("--model", type=str, required=True, help="Model file")
    p.add_argument("--rig", type=str, help="Rig file (default: the synthetic rig with seed 0)")
    p.add_argument("--iters", type=int, default=20, help="Timed forwards (default: 20)")
    p.add_argument("--warmup", type=int, default=3, help="Untimed forwards (default: 3)")
    p.add_argument("--batch-size", type=int, default=1, help="Images per forward (default: 1)")
    p.add_argument("--json", action="store_true", help="Print JSON instead of text")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", parents=[common], help="Run the distillation ablation grid")
    p.add_argument("--grid-file", type=str, help="Grid file, one 'mode lambda gamma student_size seed' per line")
    p.add_argument("--teacher", type=str, required=True, help="Teacher model file")
    p.add_argument("--data", type=str, required=True, help="Training dataset")
    p.add_argument("--rig", type=str, help="Rig file the dataset was generated with")
    p.add_argument("--jobs", type=int, default=1, help="Cells trained concurrently (default: 1)")
    p.add_argument("--thresholds", type=str, default=",".join(f"{t:g}" for t in DEFAULT_THRESHOLDS),
                   help="Comma-separated F-score thresholds in mm (default: 5,15)")
    p.add_argument("--bench-iters", type=int, default=20, help="Timed forwards per backbone (default: 20)")
    p.add_argument("--write-grid", action="store_true", help="Also write the grid as grid.txt in the output directory")
    _add_training_flags(p)
    p.add_argument("--out-dir", type=str, help="Output directory (default: $HAND_KD_OUTPUT_DIR/sweep)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="Format sweep results as tables")
    p.add_argument("--sweep-dir", type=str, required=True, help="Directory written by 'sweep'")
    p.add_argument("--format", type=str, default="md", choices=["md", "csv"], help="Output format (default: md)")
    p.add_argument("--out", type=str, help="Write the report here instead of stdout")
    p.add_argument("--plot", type=str, help="Write an accuracy-vs-throughput plot (HTML)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("cache", parents=[common], help="Show or clear the teacher-output cache")
    p.add_argument("--clear", action="store_true", help="Delete cache entries")
    p.add_argument("--older-than", type=int, help="With --clear, only entries older than this many seconds")
    p.set_defaults(func=cmd_cache)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)

    setup_logging(verbose=args.verbose, log_file=args.log_file)
    logger.info(f"Starting hand_kd {args.command}")

    try:
        return args.func(args)
    except UsageError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as e:
        logger.error(f"Numerical abort: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, FormatError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
