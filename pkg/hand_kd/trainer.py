"""
Teacher pretraining and student distillation.

Both runs share one loop: a seeded permutation fixes the batch order of every epoch, the
student (or teacher being trained) predicts from the rendered inputs, the loss for the
configured distillation mode is assembled, and Adam updates the trainable parameters
(plus the projection φ for feature modes). The frozen teacher's outputs are computed
once under no_grad and sliced per batch.
"""

import csv
import io
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor, backward, no_grad, zero_grads
from .cache import TeacherOutputCache
from .camera import CameraParams, DepthError
from .data import Dataset, check_rig
from .formats import FormatError, write_atomic
from .hand_model import HandRig, rig_fingerprint
from .losses import FeatureMap, KDConfig, KDMode, LossWeights, Prediction, Projection, loss_terms
from .nets import Model, NetConfig, init_model, model_from_bytes, model_to_bytes, predict, preset

logger = logging.getLogger(__name__)

TEACHER_BATCH_SIZE = 64


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss or an invalid prediction."""

    def __init__(self, message: str, epoch: int, batch: int, components: Optional[Dict[str, float]] = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.components = components or {}


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, data: dict) -> "AdamHyper":
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    v: Dict[str, np.ndarray] = field(default_factory=OrderedDict)


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, Optional[np.ndarray]],
    state: AdamState,
    hyper: AdamHyper,
) -> AdamState:
    """
    One bias-corrected Adam update. Parameter arrays are replaced, never written in place;
    a missing gradient counts as zero.
    """
    state.step += 1
    c1 = 1.0 - hyper.beta1 ** state.step
    c2 = 1.0 - hyper.beta2 ** state.step
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
        state.m[name], state.v[name] = m, v
        tensor.data = tensor.data - hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return state


def collect_trainable(model: Model, phi: Optional[Projection] = None) -> "OrderedDict[str, Tensor]":
    """
    Parameters the optimizer may update.

    Raises:
        ValueError: If the model is frozen
    """
    if model.frozen:
        raise ValueError("Frozen models cannot be registered with the optimizer")
    params = OrderedDict(model.trainable_parameters())
    if phi is not None:
        params.update(phi.parameters())
    return params


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    adam: AdamHyper = field(default_factory=AdamHyper)
    seed: int = 0
    kd: KDConfig = field(default_factory=KDConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be ≥ 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be ≥ 1, got {self.batch_size}")
        if self.adam.lr < 0:
            raise ValueError(f"Learning rate must be non-negative, got {self.adam.lr}")
        if self.adam.lr == 0:
            logger.warning("Learning rate is 0: parameters will not change")

    @property
    def learning_rate(self) -> float:
        return self.adam.lr

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "adam": self.adam.to_dict(),
            "seed": self.seed,
            "kd": self.kd.to_dict(),
            "weights": self.weights.to_dict(),
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        adam = AdamHyper.from_dict(data.get("adam", {}))
        if "lr" in data:
            adam.lr = float(data["lr"])
        return cls(
            epochs=int(data.get("epochs", 30)),
            batch_size=int(data.get("batch_size", 32)),
            adam=adam,
            seed=int(data.get("seed", 0)),
            kd=KDConfig.from_dict(data.get("kd", {})),
            weights=LossWeights.from_dict(data.get("weights", {})),
            eval_every=int(data.get("eval_every", 1)),
        )


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_gt: float
    loss_kd_out: float
    loss_kd_feat: float
    eval_j_err: Optional[float] = None
    eval_v_err: Optional[float] = None
    wall_time: float = 0.0


CSV_COLUMNS = ["epoch", "loss_total", "loss_gt", "loss_kd_out", "loss_kd_feat", "eval_j_err", "eval_v_err"]


@dataclass
class TrainLog:
    """Per-epoch means; the CSV omits wall time so equal runs give equal bytes."""

    records: List[EpochRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    optimizer_state: Optional[AdamState] = field(default=None, repr=False)
    projection: Optional[Projection] = field(default=None, repr=False)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError(f"Epoch {record.epoch} does not follow epoch {self.records[-1].epoch}")
        self.records.append(record)

    @property
    def wall_times(self) -> List[float]:
        return [r.wall_time for r in self.records]

    def to_csv(self, include_timing: bool = False) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_COLUMNS + (["wall_time"] if include_timing else []))
        for r in self.records:
            row = [
                r.epoch,
                repr(r.loss_total),
                repr(r.loss_gt),
                repr(r.loss_kd_out),
                repr(r.loss_kd_feat),
                "" if r.eval_j_err is None else repr(r.eval_j_err),
                "" if r.eval_v_err is None else repr(r.eval_v_err),
            ]
            if include_timing:
                row.append(f"{r.wall_time:.3f}")
            writer.writerow(row)
        return buffer.getvalue()

    def write_csv(self, path: Union[str, Path]) -> Path:
        return write_atomic(path, self.to_csv().encode("utf-8"))


@dataclass
class TeacherOutputs:
    """Frozen-teacher predictions and feature maps for every sample of a dataset."""

    k3d: np.ndarray
    k2d: np.ndarray
    theta: np.ndarray
    beta: np.ndarray
    translation: np.ndarray
    features: np.ndarray

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {
            "k3d": self.k3d,
            "k2d": self.k2d,
            "theta": self.theta,
            "beta": self.beta,
            "translation": self.translation,
            "features": self.features,
        }

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "TeacherOutputs":
        return cls(**{k: arrays[k] for k in ("k3d", "k2d", "theta", "beta", "translation", "features")})

    def batch(self, indices: Sequence[int], focal: float, image_size) -> Tuple[Prediction, FeatureMap]:
        idx = np.asarray(indices)
        pred = Prediction(
            k3d=Tensor(self.k3d[idx]),
            k2d=Tensor(self.k2d[idx]),
            theta=Tensor(self.theta[idx]),
            beta=Tensor(self.beta[idx]),
            camera=CameraParams(self.translation[idx], focal, image_size),
        )
        return pred, FeatureMap(Tensor(self.features[idx]))


def precompute_teacher_outputs(
    teacher: Model,
    dataset: Dataset,
    rig: HandRig,
    cache: Optional[TeacherOutputCache] = None,
    batch_size: int = TEACHER_BATCH_SIZE,
) -> TeacherOutputs:
    """Run the teacher once over the dataset, or fetch the result from the cache."""
    key = None
    if cache is not None and cache.enabled:
        key = cache.make_key(
            teacher.checksum(), dataset.checksum(), rig_fingerprint(rig), dataset.focal, dataset.image_size
        )
        arrays = cache.get(key)
        if arrays is not None:
            return TeacherOutputs.from_arrays(arrays)

    parts: Dict[str, List[np.ndarray]] = {k: [] for k in ("k3d", "k2d", "theta", "beta", "translation", "features")}
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            indices = list(range(start, min(start + batch_size, len(dataset))))
            pred, features = predict(teacher, dataset.images(indices), rig, dataset.focal, dataset.image_size)
            parts["k3d"].append(pred.k3d.data)
            parts["k2d"].append(pred.k2d.data)
            parts["theta"].append(pred.theta.data)
            parts["beta"].append(pred.beta.data)
            parts["translation"].append(pred.camera.translation_array)
            parts["features"].append(features.values.data)
    outputs = TeacherOutputs.from_arrays({k: np.concatenate(v) for k, v in parts.items()})
    logger.info(f"Computed teacher outputs for {len(dataset)} samples")

    if key is not None:
        cache.set(key, outputs.to_arrays())
    return outputs


def _fit(
    model: Model,
    dataset: Dataset,
    rig: HandRig,
    cfg: TrainConfig,
    kd: KDConfig,
    teacher_outputs: Optional[TeacherOutputs] = None,
    eval_dataset: Optional[Dataset] = None,
    label: str = "train",
) -> Tuple[TrainLog, AdamState]:
    from .metrics import evaluate

    if len(dataset) == 0:
        raise ValueError("Cannot train on an empty dataset")
    params = collect_trainable(model, kd.phi)
    state = AdamState()
    log = TrainLog(config=cfg.to_dict())
    n = len(dataset)

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(n)
        sums = {"loss_total": 0.0, "loss_gt": 0.0, "loss_kd_out": 0.0, "loss_kd_feat": 0.0}

        for b, start in enumerate(range(0, n, cfg.batch_size)):
            indices = order[start:start + cfg.batch_size]
            try:
                pred_s, f_s = predict(model, dataset.images(indices), rig, dataset.focal, dataset.image_size)
            except DepthError as e:
                raise NumericalAbort(f"{label}: prediction behind the camera at epoch {epoch}, batch {b}: {e}", epoch, b) from e
            except ValueError as e:
                if all(np.all(np.isfinite(p.data)) for p in params.values()):
                    raise
                raise NumericalAbort(f"{label}: parameters diverged at epoch {epoch}, batch {b}: {e}", epoch, b) from e
            pred_t = f_t = None
            if teacher_outputs is not None:
                pred_t, f_t = teacher_outputs.batch(indices, dataset.focal, dataset.image_size)

            terms = loss_terms(kd.mode, pred_s, pred_t, f_s, f_t, dataset.ground_truth(indices), kd, cfg.weights)
            values = terms.values()
            if not terms.is_finite():
                raise NumericalAbort(
                    f"{label}: non-finite loss at epoch {epoch}, batch {b}: {values}", epoch, b, values
                )

            zero_grads(params.values())
            backward(terms.total)
            adam_step(params, {k: p.grad for k, p in params.items()}, state, cfg.adam)
            for k in sums:
                sums[k] += values[k] * len(indices)
            logger.debug(f"{label} epoch {epoch} batch {b}: loss {values['loss_total']:.6g}")

        record = EpochRecord(epoch=epoch, **{k: v / n for k, v in sums.items()})
        if eval_dataset is not None and cfg.eval_every > 0 and (
            (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1
        ):
            report = evaluate(model, eval_dataset, rig)
            record.eval_j_err, record.eval_v_err = report.j_err, report.v_err
        record.wall_time = time.perf_counter() - started
        log.append(record)
        logger.info(
            f"{label} epoch {epoch + 1}/{cfg.epochs}: loss {record.loss_total:.6g} "
            f"(gt {record.loss_gt:.6g}) in {record.wall_time:.1f}s"
        )

    zero_grads(params.values())
    log.optimizer_state = state
    log.projection = kd.phi
    return log, state


def train_teacher(
    dataset: Dataset,
    cfg: TrainConfig,
    rig: HandRig,
    net_cfg: Optional[NetConfig] = None,
    eval_dataset: Optional[Dataset] = None,
) -> Tuple[Model, TrainLog]:
    """
    Train a network on ground truth alone; the caller freezes it before distillation.
    """
    check_rig(dataset, rig)
    if eval_dataset is not None:
        check_rig(eval_dataset, rig)
    if cfg.kd.mode is not KDMode.NONE:
        logger.warning(f"Teacher training ignores distillation mode '{cfg.kd.mode.value}'")
    model = init_model(net_cfg or preset("teacher", cfg.seed))
    log, _ = _fit(model, dataset, rig, cfg, KDConfig(KDMode.NONE), eval_dataset=eval_dataset, label="teacher")
    return model, log


def distill(
    teacher: Model,
    student_cfg: NetConfig,
    train_cfg: TrainConfig,
    dataset: Dataset,
    rig: HandRig,
    eval_dataset: Optional[Dataset] = None,
    cache: Optional[TeacherOutputCache] = None,
    teacher_outputs: Optional[TeacherOutputs] = None,
    student: Optional[Model] = None,
) -> Tuple[Model, TrainLog]:
    """
    Train a student against ground truth plus the distillation terms of `train_cfg.kd`.

    Args:
        teacher: Frozen teacher
        student_cfg: Student architecture (ignored when `student` is given)
        train_cfg: Optimization and distillation settings
        dataset: Training data
        rig: Hand rig the data was generated with
        eval_dataset: Optional data scored after each evaluated epoch
        cache: Teacher-output cache
        teacher_outputs: Precomputed teacher outputs (skips the teacher pass)
        student: Initial student (default: freshly initialized from `student_cfg`)

    Returns:
        (trained student, training log)

    Raises:
        ValueError: If the teacher is not frozen or a dataset was generated with another rig
        NumericalAbort: On divergence
    """
    if not teacher.frozen:
        raise ValueError("Teacher must be frozen before distillation")
    check_rig(dataset, rig)
    if eval_dataset is not None:
        check_rig(eval_dataset, rig)
    teacher_checksum = teacher.checksum()

    student = student or init_model(student_cfg)
    kd = train_cfg.kd
    if kd.mode.uses_features and kd.phi is None:
        c_t = teacher.config.channel_widths[-1]
        c_s = student.config.channel_widths[-1]
        kd = kd.with_projection(c_t, c_s, seed=train_cfg.seed)

    if kd.mode is not KDMode.NONE and teacher_outputs is None:
        teacher_outputs = precompute_teacher_outputs(teacher, dataset, rig, cache)
    elif kd.mode is KDMode.NONE:
        teacher_outputs = None

    log, _ = _fit(student, dataset, rig, train_cfg, kd, teacher_outputs, eval_dataset, label=f"distill[{kd.mode.value}]")
    if teacher.checksum() != teacher_checksum:
        raise RuntimeError("Teacher parameters changed during distillation")
    return student, log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    path: Union[str, Path],
    model: Model,
    state: AdamState,
    phi: Optional[Projection] = None,
) -> Path:
    """Model file with the optimizer state (and φ) appended as extra sections."""
    extra: "OrderedDict[str, np.ndarray]" = OrderedDict()
    if phi is not None:
        for name, tensor in phi.parameters().items():
            extra[name] = tensor.data
    extra["adam.step"] = np.array([state.step], dtype=np.float64)
    for name in state.m:
        extra[f"adam.m.{name}"] = state.m[name]
        extra[f"adam.v.{name}"] = state.v[name]
    path = write_atomic(path, model_to_bytes(model, extra))
    logger.info(f"Saved checkpoint at step {state.step} to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Model, AdamState, Optional[Projection]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    model, extra = model_from_bytes(path.read_bytes(), str(path))
    if "adam.step" not in extra:
        raise FormatError(f"{path}: missing section 'adam.step'")

    state = AdamState(step=int(extra["adam.step"][0]))
    shapes = {name: t.shape for name, t in model.params.items()}
    phi = None
    if "phi.weight" in extra:
        bias = extra["phi.bias"]
        weight = extra["phi.weight"].reshape(bias.size, -1)
        phi = Projection(Tensor(weight, requires_grad=True), Tensor(bias, requires_grad=True))
        shapes.update({"phi.weight": weight.shape, "phi.bias": bias.shape})
    for name, values in extra.items():
        for prefix, target in (("adam.m.", state.m), ("adam.v.", state.v)):
            if name.startswith(prefix):
                param = name[len(prefix):]
                if param not in shapes:
                    raise FormatError(f"{path}: section '{name}' names unknown parameter '{param}'")
                target[param] = values.reshape(shapes[param])
    return model, state, phi


__all__ = [
    "NumericalAbort",
    "AdamHyper",
    "AdamState",
    "adam_step",
    "collect_trainable",
    "TrainConfig",
    "EpochRecord",
    "TrainLog",
    "TeacherOutputs",
    "precompute_teacher_outputs",
    "train_teacher",
    "distill",
    "save_checkpoint",
    "load_checkpoint",
]
