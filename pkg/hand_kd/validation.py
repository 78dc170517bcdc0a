"""
Data validation for rigs, datasets and sweep grids.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import no_grad
from .camera import CameraParams, DepthError, project
from .losses import AnnotationMode, KDMode

logger = logging.getLogger(__name__)

CONVEX_TOLERANCE = 1e-9
LABEL_TOLERANCE = 1e-9  # px
STANDARD_JOINTS = 16
STANDARD_KEYPOINTS = 21


@dataclass
class ValidationWarning:
    """Represents a validation warning or error."""

    severity: str  # 'error', 'warning', 'info'
    message: str
    field: Optional[str] = None

    def __str__(self):
        field_str = f" [{self.field}]" if self.field else ""
        return f"[{self.severity.upper()}]{field_str} {self.message}"

    def to_dict(self) -> dict:
        """Convert to dictionary for JSON serialization."""
        return {
            "severity": self.severity,
            "message": self.message,
            "field": self.field
        }


def _check_convex_rows(name: str, weights: np.ndarray) -> List[ValidationWarning]:
    warnings = []
    if np.any(weights < 0):
        row = int(np.argwhere(weights < 0)[0][0])
        warnings.append(ValidationWarning("error", f"Negative weight in row {row}", name))
    sums = weights.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > CONVEX_TOLERANCE)
    if bad.size:
        warnings.append(
            ValidationWarning(
                "error",
                f"Row {int(bad[0])} sums to {sums[bad[0]]:.12g}, expected 1 ({bad.size} rows affected)",
                name
            )
        )
    return warnings


def validate_rig(rig) -> List[ValidationWarning]:
    """
    Validate hand rig invariants.

    Checks:
    - All arrays finite
    - Skinning, joint and keypoint regressor rows are convex (nonnegative, sum to 1)
    - Parents form a tree rooted at joint 0 with parents preceding children
    - Joint and keypoint counts match the standard hand (info only)

    Args:
        rig: HandRig to check

    Returns:
        List of validation warnings
    """
    warnings = []

    for name in ("template_vertices", "shape_blendshapes", "joint_regressor", "skinning_weights", "keypoint_regressor"):
        if not np.all(np.isfinite(getattr(rig, name))):
            warnings.append(ValidationWarning("error", "Non-finite values", name))
    if warnings:
        return warnings

    warnings.extend(_check_convex_rows("skinning_weights", rig.skinning_weights))
    warnings.extend(_check_convex_rows("joint_regressor", rig.joint_regressor))
    warnings.extend(_check_convex_rows("keypoint_regressor", rig.keypoint_regressor))

    parents = rig.parents
    if parents[0] != -1:
        warnings.append(ValidationWarning("error", f"Root joint has parent {parents[0]}, expected -1", "parents"))
    for j in range(1, len(parents)):
        if not 0 <= parents[j] < j:
            warnings.append(
                ValidationWarning("error", f"Joint {j} has parent {parents[j]}; parents must precede children", "parents")
            )
            break

    if rig.n_joints != STANDARD_JOINTS:
        warnings.append(ValidationWarning("info", f"Non-standard joint count {rig.n_joints}", "parents"))
    if rig.n_keypoints != STANDARD_KEYPOINTS:
        warnings.append(
            ValidationWarning("info", f"Non-standard keypoint count {rig.n_keypoints}", "keypoint_regressor")
        )

    logger.info(f"Rig validation complete: {len(warnings)} warnings")
    return warnings


def validate_dataset(dataset, rig, tolerance: float = LABEL_TOLERANCE, chunk: int = 64) -> List[ValidationWarning]:
    """
    Validate a dataset against the rig it was generated with.

    Checks:
    - Header agrees with the rig (fingerprint, vertex count)
    - The first ⌈n·frac_2d_only⌉ samples are ONLY_2D, the rest FULL_3D
    - 2D labels equal the projection of the true parameters (and 3D labels their keypoints)

    Args:
        dataset: Dataset to check
        rig: HandRig the dataset claims to come from
        tolerance: Largest accepted label deviation (px for 2D, mm for 3D)
        chunk: Samples posed per batched forward pass

    Returns:
        List of validation warnings
    """
    from .data import _only_2d_count
    from .hand_model import HandParams, forward, rig_fingerprint

    warnings = []

    if dataset.rig_fingerprint != rig_fingerprint(rig):
        warnings.append(
            ValidationWarning(
                "error",
                f"Dataset was generated with rig {dataset.rig_fingerprint:012x}, not {rig_fingerprint(rig):012x}",
                "rig_fingerprint"
            )
        )
        return warnings
    if dataset.rig_vertices != rig.n_vertices:
        warnings.append(
            ValidationWarning("error", f"Header lists {dataset.rig_vertices} vertices, rig has {rig.n_vertices}", "rig_vertices")
        )

    n_only_2d = _only_2d_count(len(dataset), dataset.frac_2d_only)
    for sample in dataset.samples:
        expected = AnnotationMode.ONLY_2D if sample.index < n_only_2d else AnnotationMode.FULL_3D
        if sample.annotation_mode is not expected:
            warnings.append(
                ValidationWarning(
                    "error",
                    f"Sample {sample.index} is {sample.annotation_mode.value}, expected {expected.value}",
                    "annotation_mode"
                )
            )
            break

    worst_2d = worst_3d = 0.0
    for start in range(0, len(dataset), chunk):
        indices = list(range(start, min(start + chunk, len(dataset))))
        theta, beta, t = dataset.true_arrays(indices)
        camera = CameraParams(t, dataset.focal, dataset.image_size)
        try:
            with no_grad():
                joints = forward(rig, HandParams(theta, beta)).joints3d
                k2d = project(joints, camera).data
        except DepthError as e:
            warnings.append(
                ValidationWarning("error", f"Sample {start + e.batch_index} lies behind the camera", "true_params")
            )
            continue
        for row, i in enumerate(indices):
            gt = dataset.samples[i].gt
            worst_2d = max(worst_2d, float(np.max(np.abs(k2d[row] - gt.k2d))))
            if gt.annotation_mode is AnnotationMode.FULL_3D:
                worst_3d = max(worst_3d, float(np.max(np.abs(joints.data[row] - gt.k3d))))

    if worst_2d > tolerance:
        warnings.append(
            ValidationWarning("error", f"2D labels deviate from the true parameters by {worst_2d:.3g} px", "k2d")
        )
    if worst_3d > tolerance:
        warnings.append(
            ValidationWarning("error", f"3D labels deviate from the true parameters by {worst_3d:.3g} mm", "k3d")
        )

    logger.info(f"Dataset validation complete: {len(dataset)} samples, {len(warnings)} warnings")
    return warnings


def validate_grid(cells: Sequence) -> List[ValidationWarning]:
    """
    Validate a sweep grid.

    Checks:
    - Grid is not empty
    - Duplicate cells
    - NONE cells with a nonzero λ (λ is ignored)
    - FEATURE/COMBINED cells with γ = 0 (feature term disabled)
    - OUTPUT/FEATURE/COMBINED cells with λ = 0 (identical to the baseline)

    Args:
        cells: Sweep cells with mode, lambda_kd, gamma_fd, student_size and seed

    Returns:
        List of validation warnings
    """
    warnings = []

    if not cells:
        warnings.append(ValidationWarning("error", "Sweep grid is empty"))
        return warnings

    seen = set()
    for i, cell in enumerate(cells):
        mode = KDMode.parse(cell.mode)
        key = (mode, cell.lambda_kd, cell.gamma_fd, cell.student_size, cell.seed)
        where = f"cell {i}"
        if key in seen:
            warnings.append(ValidationWarning("warning", "Duplicate of an earlier cell", where))
        seen.add(key)

        if mode is KDMode.NONE and cell.lambda_kd != 0:
            warnings.append(ValidationWarning("info", f"λ_KD={cell.lambda_kd} is ignored in mode none", where))
        elif mode is not KDMode.NONE and cell.lambda_kd == 0:
            warnings.append(ValidationWarning("warning", f"λ_KD=0 makes mode {mode.value} equal to the baseline", where))
        if mode.uses_features and cell.gamma_fd == 0:
            warnings.append(ValidationWarning("warning", f"γ_FD=0 disables the feature term in mode {mode.value}", where))

    logger.info(f"Grid validation complete: {len(cells)} cells, {len(warnings)} warnings")
    return warnings


def summarize_validation(warnings: List[ValidationWarning]) -> dict:
    """
    Summarize a list of validation warnings.

    Returns:
        Dictionary with counts, validity flag and serialized warnings
    """
    error_count = sum(1 for w in warnings if w.severity == "error")
    warning_count = sum(1 for w in warnings if w.severity == "warning")

    summary = {
        "has_errors": error_count > 0,
        "has_warnings": warning_count > 0,
        "error_count": error_count,
        "warning_count": warning_count,
        "is_valid": error_count == 0,
        "warnings": [w.to_dict() for w in warnings],
        "first_error": next((w.message for w in warnings if w.severity == "error"), None),
    }

    if error_count > 0:
        logger.error(f"Validation failed: {error_count} errors, {warning_count} warnings")
    elif warning_count > 0:
        logger.warning(f"Validation passed with warnings: {warning_count} warnings")
    else:
        logger.info("Validation passed with no issues")

    return summary
