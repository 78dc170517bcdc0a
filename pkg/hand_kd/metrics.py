"""
Evaluation metrics: Procrustes-aligned joint and vertex errors, F-scores at distance
thresholds, student/teacher agreement, and a parameter/throughput benchmark.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import svd
from scipy.spatial.distance import cdist

from .autodiff import no_grad
from .data import check_rig
from .hand_model import HandParams, HandRig, forward, make_synthetic_rig
from .losses import loss_kd_out
from .nets import Model, flop_count, param_count, predict

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (5.0, 15.0)  # mm
ORTHOGONALITY_TOLERANCE = 1e-10
EVAL_BATCH_SIZE = 64

# Maps sample indices to (keypoints B×K×3, vertices B×N_v×3)
PredictFn = Callable[[Sequence[int]], Tuple[np.ndarray, np.ndarray]]


@dataclass
class SimilarityTransform:
    """x ↦ s·R·x + t with s > 0 and R a proper rotation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if not self.scale > 0:
            raise ValueError(f"Similarity scale must be positive, got {self.scale}")
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("Rotation must be 3×3 and translation a 3-vector")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), rtol=0, atol=ORTHOGONALITY_TOLERANCE):
            raise ValueError("Rotation is not orthogonal")
        if abs(np.linalg.det(self.rotation) - 1.0) > ORTHOGONALITY_TOLERANCE:
            raise ValueError("Rotation is a reflection")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def procrustes_align(source: np.ndarray, target: np.ndarray) -> SimilarityTransform:
    """
    Closed-form similarity minimizing Σ‖s·R·pᵢ + t − qᵢ‖².

    Centers both sets, takes the SVD of the 3×3 cross-covariance with a determinant sign
    fix against reflections, and sets the scale from the variance ratio.

    Raises:
        ValueError: For fewer than 3 points, mismatched shapes, or a source or target whose
            points all coincide
    """
    p = np.asarray(source, dtype=np.float64)
    q = np.asarray(target, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"Expected two N×3 point sets, got {p.shape} and {q.shape}")
    if p.shape[0] < 3:
        raise ValueError(f"Alignment needs at least 3 points, got {p.shape[0]}")

    mu_p, mu_q = p.mean(axis=0), q.mean(axis=0)
    pc, qc = p - mu_p, q - mu_q
    var_p = np.sum(pc * pc) / len(p)
    if var_p <= 0:
        raise ValueError("Source points are all coincident; alignment is undefined")
    if np.sum(qc * qc) <= 0:
        raise ValueError("Target points are all coincident; alignment is undefined")

    u, sigma, vt = svd(qc.T @ pc / len(p))
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    rotation = u @ np.diag(d) @ vt
    scale = float(np.sum(sigma * d) / var_p)
    translation = mu_q - scale * rotation @ mu_p
    return SimilarityTransform(scale, rotation, translation)


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance between corresponding points, without alignment."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"Shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def pa_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-joint error (mm) after aligning `pred` onto `gt`."""
    return mpjpe(procrustes_align(pred, gt).apply(pred), gt)


def pa_mpvpe(pred_verts: np.ndarray, gt_verts: np.ndarray) -> float:
    """Mean per-vertex error (mm) after aligning `pred_verts` onto `gt_verts`."""
    return pa_mpjpe(pred_verts, gt_verts)


def f_score(pred: np.ndarray, gt: np.ndarray, threshold: float, aligned: bool = True) -> float:
    """
    Harmonic mean of precision (pred points within `threshold` of some gt point) and
    recall (the converse); 0 when both are 0.
    """
    if threshold <= 0:
        raise ValueError(f"Threshold must be positive, got {threshold}")
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.size == 0 or gt.size == 0:
        raise ValueError("F-score needs non-empty point clouds")
    if aligned:
        pred = procrustes_align(pred, gt).apply(pred)
    distances = cdist(pred, gt)
    precision = float(np.mean(distances.min(axis=1) < threshold))
    recall = float(np.mean(distances.min(axis=0) < threshold))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class MetricsReport:
    j_err: float
    v_err: float
    f_at: Dict[float, float]
    n_samples: int
    params_total: int = 0
    params_trainable: int = 0
    throughput: Optional[float] = None
    per_sample: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.j_err < 0 or self.v_err < 0:
            raise ValueError("Errors must be non-negative")
        for t, score in self.f_at.items():
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"F@{t} = {score} is outside [0, 1]")

    def csv_header(self) -> List[str]:
        header = ["j_err", "v_err"] + [f"f@{t:g}" for t in sorted(self.f_at)]
        header += ["n_samples", "params_total", "params_trainable", "throughput"]
        return header

    def to_csv_row(self) -> List[str]:
        row = [f"{self.j_err:.6f}", f"{self.v_err:.6f}"]
        row += [f"{self.f_at[t]:.6f}" for t in sorted(self.f_at)]
        row += [
            str(self.n_samples),
            str(self.params_total),
            str(self.params_trainable),
            f"{self.throughput:.3f}" if self.throughput is not None else "",
        ]
        return row

    def to_text(self) -> str:
        lines = [
            f"Samples:           {self.n_samples}",
            f"PA-MPJPE (J_err):  {self.j_err:.3f} mm",
            f"PA-MPVPE (V_err):  {self.v_err:.3f} mm",
        ]
        lines += [f"{f'F@{t:g}mm:':<19}{self.f_at[t]:.4f}" for t in sorted(self.f_at)]
        lines.append(f"Params:            {self.params_trainable:,} trainable / {self.params_total:,} total")
        if self.throughput is not None:
            lines.append(f"Throughput:        {self.throughput:.1f} forwards/s")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "j_err": self.j_err,
            "v_err": self.v_err,
            "f_at": {f"{t:g}": v for t, v in sorted(self.f_at.items())},
            "n_samples": self.n_samples,
            "params_total": self.params_total,
            "params_trainable": self.params_trainable,
            "throughput": self.throughput,
        }


def _true_meshes(dataset, rig: HandRig, indices: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    theta, beta, _ = dataset.true_arrays(indices)
    with no_grad():
        output = forward(rig, HandParams(theta, beta))
    return output.joints3d.data, output.vertices.data


def _model_predict_fn(model: Model, dataset, rig: HandRig) -> PredictFn:
    def _predict(indices):
        with no_grad():
            pred, _ = predict(model, dataset.images(indices), rig, dataset.focal, dataset.image_size)
        return pred.k3d.data, pred.vertices.data

    return _predict


def evaluate(
    model: Optional[Model],
    dataset,
    rig: HandRig,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    predict_fn: Optional[PredictFn] = None,
    batch_size: int = EVAL_BATCH_SIZE,
) -> MetricsReport:
    """
    Score predictions against the meshes posed from each sample's true parameters.

    Args:
        model: Network to evaluate (may be None when `predict_fn` is given)
        dataset: Dataset with true parameters
        rig: Hand rig
        thresholds: F-score thresholds in mm
        predict_fn: Overrides the model's predictions
        batch_size: Samples per forward pass

    Returns:
        MetricsReport with means over samples and the per-sample values

    Raises:
        ValueError: If neither a model nor a predict_fn is given, or the dataset was generated
            with another rig
    """
    if model is None and predict_fn is None:
        raise ValueError("evaluate needs a model or a predict_fn")
    check_rig(dataset, rig)
    predict_fn = predict_fn or _model_predict_fn(model, dataset, rig)
    thresholds = sorted(float(t) for t in thresholds)

    j_errs, v_errs = [], []
    f_scores: Dict[float, List[float]] = {t: [] for t in thresholds}
    for start in range(0, len(dataset), batch_size):
        indices = list(range(start, min(start + batch_size, len(dataset))))
        pred_joints, pred_verts = predict_fn(indices)
        gt_joints, gt_verts = _true_meshes(dataset, rig, indices)
        for row in range(len(indices)):
            j_errs.append(pa_mpjpe(pred_joints[row], gt_joints[row]))
            aligned = procrustes_align(pred_verts[row], gt_verts[row]).apply(pred_verts[row])
            v_errs.append(mpjpe(aligned, gt_verts[row]))
            for t in thresholds:
                f_scores[t].append(f_score(aligned, gt_verts[row], t, aligned=False))

    report = MetricsReport(
        j_err=float(np.mean(j_errs)),
        v_err=float(np.mean(v_errs)),
        f_at={t: float(np.mean(v)) for t, v in f_scores.items()},
        n_samples=len(dataset),
        params_total=param_count(model, trainable_only=False) if model is not None else 0,
        params_trainable=param_count(model) if model is not None else 0,
        per_sample={
            "j_err": np.asarray(j_errs),
            "v_err": np.asarray(v_errs),
            **{f"f@{t:g}": np.asarray(v) for t, v in f_scores.items()},
        },
    )
    logger.info(f"Evaluated {len(dataset)} samples: J_err {report.j_err:.3f} mm, V_err {report.v_err:.3f} mm")
    return report


def teacher_agreement(
    student: Model,
    teacher: Model,
    dataset,
    rig: HandRig,
    batch_size: int = EVAL_BATCH_SIZE,
) -> float:
    """Sample-weighted mean of the output-distillation loss between student and teacher."""
    check_rig(dataset, rig)
    total = 0.0
    for start in range(0, len(dataset), batch_size):
        indices = list(range(start, min(start + batch_size, len(dataset))))
        images = dataset.images(indices)
        with no_grad():
            pred_s, _ = predict(student, images, rig, dataset.focal, dataset.image_size)
            pred_t, _ = predict(teacher, images, rig, dataset.focal, dataset.image_size)
            total += loss_kd_out(pred_s, pred_t).item() * len(indices)
    return total / len(dataset)


@dataclass
class BenchResult:
    params_total: int
    params_trainable: int
    macs: int
    throughput: float
    iters: int
    batch_size: int

    def to_dict(self) -> dict:
        return {
            "params_total": self.params_total,
            "params_trainable": self.params_trainable,
            "macs": self.macs,
            "throughput": self.throughput,
            "iters": self.iters,
            "batch_size": self.batch_size,
        }

    def to_text(self) -> str:
        return "\n".join([
            f"Params:      {self.params_trainable:,} trainable / {self.params_total:,} total",
            f"MACs:        {self.macs / 1e6:.2f} M per forward",
            f"Throughput:  {self.throughput:.1f} forwards/s (batch {self.batch_size}, {self.iters} iters)",
        ])


def bench(
    model: Model,
    input_shape: Optional[Tuple[int, ...]] = None,
    warmup: int = 3,
    iters: int = 20,
    rig: Optional[HandRig] = None,
    seed: int = 0,
) -> BenchResult:
    """
    Time full forwards (network, hand model and projection) on a fixed random input.

    Args:
        model: Network to time
        input_shape: B×C×H×W input; defaults to one image of the configured size
        warmup: Untimed forwards before measuring
        iters: Timed forwards
        rig: Hand rig (default synthetic rig)
        seed: Seed of the random input

    Returns:
        BenchResult with parameter counts, MACs and forwards per second
    """
    if iters < 1:
        raise ValueError(f"iters must be ≥ 1, got {iters}")
    cfg = model.config
    input_shape = input_shape or (1, cfg.input_channels) + cfg.input_size
    rig = rig or make_synthetic_rig()
    images = np.random.default_rng(seed).uniform(0.0, 1.0, input_shape)

    with no_grad():
        for _ in range(warmup):
            predict(model, images, rig)
        start = time.perf_counter()
        for _ in range(iters):
            predict(model, images, rig)
        elapsed = time.perf_counter() - start

    batch = input_shape[0] if len(input_shape) == 4 else 1
    result = BenchResult(
        params_total=param_count(model, trainable_only=False),
        params_trainable=param_count(model),
        macs=flop_count(model) * batch,
        throughput=iters * batch / max(elapsed, 1e-12),
        iters=iters,
        batch_size=batch,
    )
    logger.info(f"Bench: {result.throughput:.1f} forwards/s, {result.params_total} parameters")
    return result


__all__ = [
    "DEFAULT_THRESHOLDS",
    "SimilarityTransform",
    "procrustes_align",
    "mpjpe",
    "pa_mpjpe",
    "pa_mpvpe",
    "f_score",
    "MetricsReport",
    "evaluate",
    "teacher_agreement",
    "BenchResult",
    "bench",
]
