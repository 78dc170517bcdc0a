"""
Training objectives: ground-truth supervision, output-level and feature-level
distillation, and the totals that combine them.

Every squared-L2 term is mean-normalized: keypoint terms divide by the number of
keypoints in the batch, parameter and feature terms by their scalar count. Teacher
quantities are always detached, so no gradient ever reaches the teacher.

    NONE      L_GT
    OUTPUT    L_GT + λ·L_out
    FEATURE   L_GT + λ·(γ·L_feat)
    COMBINED  L_GT + λ·(L_out + γ·L_feat)
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    bilinear_resize,
    concat,
    conv_1x1,
    reshape,
    sq_l2,
    take,
)
from .camera import CameraParams

logger = logging.getLogger(__name__)


class KDMode(Enum):
    """Which distillation terms enter the total loss."""

    NONE = "none"
    OUTPUT = "output"
    FEATURE = "feature"
    COMBINED = "combined"

    @property
    def uses_outputs(self) -> bool:
        return self in (KDMode.OUTPUT, KDMode.COMBINED)

    @property
    def uses_features(self) -> bool:
        return self in (KDMode.FEATURE, KDMode.COMBINED)

    @classmethod
    def parse(cls, value: Union[str, "KDMode"]) -> "KDMode":
        if isinstance(value, KDMode):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ValueError(f"Unknown distillation mode '{value}' (choose from {choices})") from None


class AnnotationMode(Enum):
    FULL_3D = "full_3d"
    ONLY_2D = "only_2d"


@dataclass
class LossWeights:
    """Per-term weights of L_GT."""

    w_2d: float = 1.0
    w_3d: float = 1.0
    w_mano: float = 1.0

    def __post_init__(self):
        for name in ("w_2d", "w_3d", "w_mano"):
            if getattr(self, name) < 0:
                raise ValueError(f"Loss weight {name} must be non-negative, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return {"w_2d": self.w_2d, "w_3d": self.w_3d, "w_mano": self.w_mano}

    @classmethod
    def from_dict(cls, data: dict) -> "LossWeights":
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass
class Projection:
    """Learnable 1×1 convolution mapping teacher feature channels to student channels."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"Projection weight {self.weight.shape} / bias {self.bias.shape} are inconsistent")

    @classmethod
    def initialize(cls, teacher_channels: int, student_channels: int, seed: int = 0) -> "Projection":
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(teacher_channels)
        weight = rng.uniform(-bound, bound, (student_channels, teacher_channels))
        bias = rng.uniform(-bound, bound, student_channels)
        return cls(Tensor(weight, requires_grad=True), Tensor(bias, requires_grad=True))

    @classmethod
    def identity(cls, channels: int) -> "Projection":
        return cls(Tensor(np.eye(channels), requires_grad=True), Tensor(np.zeros(channels), requires_grad=True))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, features: Tensor) -> Tensor:
        return conv_1x1(features, self.weight, self.bias)

    def parameters(self) -> Dict[str, Tensor]:
        return {"phi.weight": self.weight, "phi.bias": self.bias}


@dataclass
class KDConfig:
    """
    Distillation mode and weights.

    `phi` is attached once teacher and student channel counts are known (see
    `with_projection`); it may only be present for modes that use features.
    """

    mode: KDMode = KDMode.NONE
    lambda_kd: float = 0.5
    gamma_fd: float = 6.0
    phi: Optional[Projection] = None

    def __post_init__(self):
        self.mode = KDMode.parse(self.mode)
        if self.lambda_kd < 0 or self.gamma_fd < 0:
            raise ValueError(f"λ_KD and γ_FD must be non-negative, got {self.lambda_kd} and {self.gamma_fd}")
        if self.phi is not None and not self.mode.uses_features:
            raise ValueError(f"A feature projection is only meaningful for feature modes, not '{self.mode.value}'")

    def with_projection(self, teacher_channels: int, student_channels: int, seed: int = 0) -> "KDConfig":
        phi = Projection.initialize(teacher_channels, student_channels, seed) if self.mode.uses_features else None
        return KDConfig(self.mode, self.lambda_kd, self.gamma_fd, phi)

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "lambda_kd": self.lambda_kd, "gamma_fd": self.gamma_fd}

    @classmethod
    def from_dict(cls, data: dict) -> "KDConfig":
        return cls(
            mode=KDMode.parse(data.get("mode", "none")),
            lambda_kd=float(data.get("lambda_kd", 0.5)),
            gamma_fd=float(data.get("gamma_fd", 6.0)),
        )


@dataclass
class FeatureMap:
    """Backbone activation grid, C×H×W or B×C×H×W."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim not in (3, 4) or min(self.values.shape) < 1:
            raise ValueError(f"Feature map must be C×H×W or B×C×H×W with positive extents, got {self.values.shape}")

    @property
    def batched(self) -> bool:
        return self.values.ndim == 4

    @property
    def channels(self) -> int:
        return self.values.shape[-3]

    @property
    def height(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]

    def detach(self) -> "FeatureMap":
        return FeatureMap(self.values.detach())


@dataclass
class Prediction:
    """
    Network output for a batch: keypoints (B×21×3, B×21×2), pose (B×48), shape (B×10),
    camera and, when available, the posed mesh (B×N_v×3).
    """

    k3d: Tensor
    k2d: Tensor
    theta: Tensor
    beta: Tensor
    camera: CameraParams
    vertices: Optional[Tensor] = None

    @property
    def batch_size(self) -> int:
        return self.k3d.shape[0]

    def theta_beta(self) -> Tensor:
        return concat([self.theta, self.beta], axis=-1)

    def detach(self) -> "Prediction":
        return Prediction(
            self.k3d.detach(),
            self.k2d.detach(),
            self.theta.detach(),
            self.beta.detach(),
            self.camera.detach(),
            self.vertices.detach() if self.vertices is not None else None,
        )


@dataclass
class GroundTruth:
    """Labels for one sample; 3D fields exist only for FULL_3D samples."""

    k2d: Optional[np.ndarray]
    annotation_mode: AnnotationMode = AnnotationMode.FULL_3D
    k3d: Optional[np.ndarray] = None
    mano_params: Optional[np.ndarray] = None

    def __post_init__(self):
        self.annotation_mode = AnnotationMode(self.annotation_mode)
        has_3d = self.k3d is not None or self.mano_params is not None
        if self.annotation_mode is AnnotationMode.ONLY_2D and has_3d:
            raise ValueError("ONLY_2D ground truth cannot carry 3D keypoints or hand parameters")
        if self.annotation_mode is AnnotationMode.FULL_3D and (self.k3d is None or self.mano_params is None):
            raise ValueError("FULL_3D ground truth needs both 3D keypoints and hand parameters")

    @property
    def is_full_3d(self) -> bool:
        return self.annotation_mode is AnnotationMode.FULL_3D


@dataclass
class GroundTruthBatch:
    """
    Stacked labels. `full_3d_rows` indexes the FULL_3D samples; `k3d` and `mano_params`
    hold only those rows.
    """

    k2d: np.ndarray
    full_3d_rows: np.ndarray
    k3d: np.ndarray
    mano_params: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.k2d.shape[0]

    @classmethod
    def from_samples(cls, labels: Sequence[GroundTruth]) -> "GroundTruthBatch":
        if not labels:
            raise ValueError("Cannot build a ground-truth batch from zero samples")
        for i, gt in enumerate(labels):
            if gt.k2d is None:
                raise ValueError(f"Ground truth {i} is missing the required 2D keypoints")
        rows = [i for i, gt in enumerate(labels) if gt.is_full_3d]
        k2d = np.stack([np.asarray(gt.k2d, dtype=np.float64) for gt in labels])
        n_kp = k2d.shape[1]
        if rows:
            k3d = np.stack([np.asarray(labels[i].k3d, dtype=np.float64) for i in rows])
            mano = np.stack([np.asarray(labels[i].mano_params, dtype=np.float64) for i in rows])
        else:
            k3d = np.zeros((0, n_kp, 3))
            mano = np.zeros((0, 0))
        return cls(k2d, np.asarray(rows, dtype=np.int64), k3d, mano)


@dataclass
class LossBreakdown:
    """Total loss with its components, for logging and the divergence guard."""

    total: Tensor
    gt: Tensor
    kd_out: Optional[Tensor] = None
    kd_feat: Optional[Tensor] = None

    def values(self) -> Dict[str, float]:
        return {
            "loss_total": self.total.item(),
            "loss_gt": self.gt.item(),
            "loss_kd_out": self.kd_out.item() if self.kd_out is not None else 0.0,
            "loss_kd_feat": self.kd_feat.item() if self.kd_feat is not None else 0.0,
        }

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.values().values())


def _with_batch(t: Tensor, ndim: int) -> Tensor:
    return reshape(t, (1,) + t.shape) if t.ndim == ndim - 1 else t


def _prediction_tensors(pred: Prediction):
    k3d = _with_batch(pred.k3d, 3)
    k2d = _with_batch(pred.k2d, 3)
    params = _with_batch(pred.theta_beta(), 2)
    return k3d, k2d, params


def loss_gt(
    pred: Prediction,
    gt: Union[GroundTruth, GroundTruthBatch, Sequence[GroundTruth]],
    weights: Optional[LossWeights] = None,
) -> Tensor:
    """
    Ground-truth loss: w_2D·L_2D always, plus w_3D·L_3D + w_MANO·L_MANO on FULL_3D rows.

    ONLY_2D rows never enter the 3D terms, so their 3D labels cannot affect the value or
    the gradient.

    Raises:
        ValueError: If 2D keypoints are missing or batch sizes disagree
    """
    weights = weights or LossWeights()
    if isinstance(gt, GroundTruth):
        gt = GroundTruthBatch.from_samples([gt])
    elif not isinstance(gt, GroundTruthBatch):
        gt = GroundTruthBatch.from_samples(list(gt))

    k3d, k2d, params = _prediction_tensors(pred)
    batch, n_kp = k2d.shape[0], k2d.shape[1]
    if gt.batch_size != batch:
        raise ValueError(f"Prediction batch {batch} does not match ground-truth batch {gt.batch_size}")

    total = sq_l2(k2d, gt.k2d) * (weights.w_2d / (batch * n_kp))
    rows = gt.full_3d_rows
    if rows.size:
        l3d = sq_l2(take(k3d, rows, axis=0), gt.k3d) / float(batch * n_kp)
        lmano = sq_l2(take(params, rows, axis=0), gt.mano_params) / float(batch * params.shape[1])
        total = total + l3d * weights.w_3d + lmano * weights.w_mano
    return total


def loss_kd_out(pred_s: Prediction, pred_t: Prediction) -> Tensor:
    """Output-level distillation over 3D keypoints, 2D keypoints and θ‖β."""
    k3d_s, k2d_s, params_s = _prediction_tensors(pred_s)
    k3d_t, k2d_t, params_t = _prediction_tensors(pred_t.detach())
    batch, n_kp = k3d_s.shape[0], k3d_s.shape[1]
    return (
        sq_l2(k3d_s, k3d_t) / float(batch * n_kp)
        + sq_l2(k2d_s, k2d_t) / float(batch * n_kp)
        + sq_l2(params_s, params_t) / float(params_s.size)
    )


def loss_kd_feat(f_s: FeatureMap, f_t: FeatureMap, phi: Projection) -> Tensor:
    """
    Feature-level distillation: project the teacher map with φ, resize it to the
    student's grid when extents differ, then take the mean squared difference.

    Raises:
        ValueError: If φ does not map the teacher's channels to the student's
    """
    if phi is None:
        raise ValueError("Feature distillation needs a projection φ")
    if phi.in_channels != f_t.channels or phi.out_channels != f_s.channels:
        raise ValueError(
            f"Projection maps {phi.in_channels}→{phi.out_channels} channels but teacher has "
            f"{f_t.channels} and student {f_s.channels}"
        )
    if f_s.batched != f_t.batched:
        raise ValueError("Student and teacher feature maps must both be batched or both single")
    projected = phi(f_t.values.detach())
    if (f_t.height, f_t.width) != (f_s.height, f_s.width):
        projected = bilinear_resize(projected, f_s.height, f_s.width)
    return sq_l2(f_s.values, projected) / float(f_s.values.size)


def loss_terms(
    mode: Union[KDMode, str],
    pred_s: Prediction,
    pred_t: Optional[Prediction],
    f_s: Optional[FeatureMap],
    f_t: Optional[FeatureMap],
    gt,
    cfg: KDConfig,
    weights: Optional[LossWeights] = None,
) -> LossBreakdown:
    """
    Assemble the total loss for `mode` and keep its components.

    Raises:
        ValueError: If `mode` differs from `cfg.mode`, or teacher outputs are present in NONE
            mode or missing in a mode that uses them
    """
    mode = KDMode.parse(mode)
    if mode is not cfg.mode:
        raise ValueError(
            f"Loss mode '{mode.value}' disagrees with the distillation config mode '{cfg.mode.value}'"
        )
    if mode is KDMode.NONE and (pred_t is not None or f_t is not None):
        raise ValueError("Mode 'none' takes no teacher predictions or feature maps")
    l_gt = loss_gt(pred_s, gt, weights)
    if mode is KDMode.NONE:
        return LossBreakdown(total=l_gt, gt=l_gt)

    kd_out = kd_feat = None
    if mode.uses_outputs:
        if pred_t is None:
            raise ValueError(f"Mode '{mode.value}' needs teacher predictions")
        kd_out = loss_kd_out(pred_s, pred_t)
    if mode.uses_features:
        if f_s is None or f_t is None:
            raise ValueError(f"Mode '{mode.value}' needs student and teacher feature maps")
        kd_feat = loss_kd_feat(f_s, f_t, cfg.phi)

    if mode is KDMode.OUTPUT:
        kd = kd_out
    elif mode is KDMode.FEATURE:
        kd = kd_feat * cfg.gamma_fd
    else:
        kd = kd_out + kd_feat * cfg.gamma_fd
    return LossBreakdown(total=l_gt + kd * cfg.lambda_kd, gt=l_gt, kd_out=kd_out, kd_feat=kd_feat)


def total_loss(
    mode: Union[KDMode, str],
    pred_s: Prediction,
    pred_t: Optional[Prediction],
    f_s: Optional[FeatureMap],
    f_t: Optional[FeatureMap],
    gt,
    cfg: KDConfig,
    weights: Optional[LossWeights] = None,
) -> Tensor:
    return loss_terms(mode, pred_s, pred_t, f_s, f_t, gt, cfg, weights).total


def constant_prediction(
    k3d: np.ndarray,
    k2d: np.ndarray,
    theta: np.ndarray,
    beta: np.ndarray,
    translation: np.ndarray,
    focal: float,
    image_size,
    vertices: Optional[np.ndarray] = None,
) -> Prediction:
    """Wrap stored arrays (cached teacher outputs, test fixtures) as a Prediction."""
    return Prediction(
        k3d=as_tensor(np.asarray(k3d, dtype=np.float64)),
        k2d=as_tensor(np.asarray(k2d, dtype=np.float64)),
        theta=as_tensor(np.asarray(theta, dtype=np.float64)),
        beta=as_tensor(np.asarray(beta, dtype=np.float64)),
        camera=CameraParams(np.asarray(translation, dtype=np.float64), focal, image_size),
        vertices=as_tensor(vertices) if vertices is not None else None,
    )


__all__: List[str] = [
    "KDMode",
    "AnnotationMode",
    "LossWeights",
    "Projection",
    "KDConfig",
    "FeatureMap",
    "Prediction",
    "GroundTruth",
    "GroundTruthBatch",
    "LossBreakdown",
    "loss_gt",
    "loss_kd_out",
    "loss_kd_feat",
    "loss_terms",
    "total_loss",
    "constant_prediction",
]
