"""
Hand Distillation Laboratory

Knowledge distillation for parametric 3D hand reconstruction on synthetic data: a
differentiable hand model, teacher and student networks, output-level and feature-level
distillation losses, Procrustes-aligned evaluation and an ablation sweep.
"""

__version__ = "0.1.0"

from .autodiff import (
    Tensor,
    ShapeError,
    no_grad,
    backward,
    custom_op,
    finite_diff_check,
    GradCheckReport,
)
from .hand_model import (
    HandRig,
    HandParams,
    HandOutput,
    KEYPOINT_ORDER,
    forward,
    make_synthetic_rig,
    rig_fingerprint,
    save_rig,
    load_rig,
)
from .camera import CameraParams, DepthError, project
from .losses import (
    KDMode,
    AnnotationMode,
    KDConfig,
    LossWeights,
    Projection,
    Prediction,
    FeatureMap,
    GroundTruth,
    loss_gt,
    loss_kd_out,
    loss_kd_feat,
    total_loss,
)
from .nets import (
    NetConfig,
    NET_PRESETS,
    Model,
    preset,
    init_model,
    freeze,
    param_count,
    flop_count,
    predict,
    save_model,
    load_model,
)
from .data import Dataset, Sample, sample_gt, render_input, make_dataset, check_rig, save_dataset, load_dataset
from .trainer import (
    TrainConfig,
    TrainLog,
    NumericalAbort,
    train_teacher,
    distill,
    save_checkpoint,
    load_checkpoint,
)
from .metrics import (
    procrustes_align,
    pa_mpjpe,
    pa_mpvpe,
    f_score,
    MetricsReport,
    evaluate,
    bench,
)
from .sweep import SweepCell, default_grid, run_sweep, write_sweep_results
from .report import load_sweep_results, build_tables, format_report
from .cache import TeacherOutputCache, get_cache
from .validation import ValidationWarning, validate_rig, validate_dataset, validate_grid
from .formats import FormatError
from .manifest import RunManifest

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "backward",
    "custom_op",
    "finite_diff_check",
    "GradCheckReport",
    "HandRig",
    "HandParams",
    "HandOutput",
    "KEYPOINT_ORDER",
    "forward",
    "make_synthetic_rig",
    "rig_fingerprint",
    "save_rig",
    "load_rig",
    "CameraParams",
    "DepthError",
    "project",
    "KDMode",
    "AnnotationMode",
    "KDConfig",
    "LossWeights",
    "Projection",
    "Prediction",
    "FeatureMap",
    "GroundTruth",
    "loss_gt",
    "loss_kd_out",
    "loss_kd_feat",
    "total_loss",
    "NetConfig",
    "NET_PRESETS",
    "Model",
    "preset",
    "init_model",
    "freeze",
    "param_count",
    "flop_count",
    "predict",
    "save_model",
    "load_model",
    "Dataset",
    "Sample",
    "sample_gt",
    "render_input",
    "make_dataset",
    "check_rig",
    "save_dataset",
    "load_dataset",
    "TrainConfig",
    "TrainLog",
    "NumericalAbort",
    "train_teacher",
    "distill",
    "save_checkpoint",
    "load_checkpoint",
    "procrustes_align",
    "pa_mpjpe",
    "pa_mpvpe",
    "f_score",
    "MetricsReport",
    "evaluate",
    "bench",
    "SweepCell",
    "default_grid",
    "run_sweep",
    "write_sweep_results",
    "load_sweep_results",
    "build_tables",
    "format_report",
    "TeacherOutputCache",
    "get_cache",
    "ValidationWarning",
    "validate_rig",
    "validate_dataset",
    "validate_grid",
    "FormatError",
    "RunManifest",
]
