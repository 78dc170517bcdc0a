"""
Differentiable MANO-style hand model.

A rig maps pose θ (axis-angle per joint, joint 0 = global orientation) and shape β
(blendshape coefficients) to a posed mesh and 21 keypoints:

    T(β) = template + Σ_k β_k·blendshape_k
    J    = joint_regressor · T(β)
    G_j  = G_parent(j) ∘ [rodrigues(θ_j) | J_j − J_parent(j)]
    v_i  = Σ_j w_ij · (G_j relative to rest) · T(β)_i
    K3D  = keypoint_regressor · v

There are no pose-corrective blendshapes. All lengths are millimeters.
"""

import hashlib
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .autodiff import Tensor, as_tensor, expand, matmul, no_grad, reshape, rodrigues, stack, transpose
from .formats import BinaryReader, BinaryWriter, FormatError, write_atomic

logger = logging.getLogger(__name__)

N_JOINTS = 16
N_BETAS = 10
N_KEYPOINTS = 21
POSE_DIM = 3 * N_JOINTS
MIN_SYNTHETIC_VERTICES = N_JOINTS
DEFAULT_N_VERTICES = 97

RIG_MAGIC = b"HKDR"

# Kinematic tree: wrist, then index, middle, little, ring and thumb chains of three joints
MANO_PARENTS: Tuple[int, ...] = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14)

FINGER_CHAINS = {
    "index": (1, 2, 3),
    "middle": (4, 5, 6),
    "little": (7, 8, 9),
    "ring": (10, 11, 12),
    "thumb": (13, 14, 15),
}

# 21 keypoints: wrist, then each finger from base to tip (thumb, index, middle, ring, little).
# Entries are joint indices; strings name fingertips.
KEYPOINT_ORDER: Tuple[Union[int, str], ...] = (
    0,
    13, 14, 15, "thumb",
    1, 2, 3, "index",
    4, 5, 6, "middle",
    10, 11, 12, "ring",
    7, 8, 9, "little",
)

WRIST_POSITION = np.array([0.0, -45.0, 0.0])

# base offset from the wrist (mm), pointing direction, bone lengths base→tip (mm), radius (mm)
_FINGER_LAYOUT = {
    "index": ((-22.0, 15.0, 0.0), (-0.10, 1.0, 0.0), (38.0, 24.0, 20.0), 7.0),
    "middle": ((-4.0, 18.0, 0.0), (0.0, 1.0, 0.0), (42.0, 27.0, 22.0), 7.5),
    "ring": ((13.0, 16.0, 0.0), (0.08, 1.0, 0.0), (39.0, 25.0, 21.0), 7.0),
    "little": ((28.0, 11.0, 0.0), (0.18, 1.0, 0.0), (31.0, 19.0, 18.0), 6.0),
    "thumb": ((-18.0, -8.0, 6.0), (-0.75, 0.6, 0.3), (32.0, 28.0, 24.0), 9.0),
}

PALM_HALF_WIDTH = 26.0
SKINNING_TEMPERATURE = 4.0  # mm
REGRESSOR_NEIGHBOURS = 4


@dataclass(frozen=True, eq=False)
class HandRig:
    """
    Constants of the hand model. Arrays are made read-only on construction.

    Attributes:
        template_vertices: N_v×3 rest mesh (mm)
        shape_blendshapes: n_betas×N_v×3 displacement per unit β (mm)
        joint_regressor: N_j×N_v convex weights
        parents: N_j parent indices, -1 for the root
        skinning_weights: N_v×N_j convex weights
        keypoint_regressor: K×N_v convex weights (K = 21 for the standard hand)
    """

    template_vertices: np.ndarray
    shape_blendshapes: np.ndarray
    joint_regressor: np.ndarray
    parents: np.ndarray
    skinning_weights: np.ndarray
    keypoint_regressor: np.ndarray

    def __post_init__(self):
        for name in (
            "template_vertices",
            "shape_blendshapes",
            "joint_regressor",
            "skinning_weights",
            "keypoint_regressor",
        ):
            array = np.array(getattr(self, name), dtype=np.float64)
            array.flags.writeable = False
            object.__setattr__(self, name, array)
        parents = np.array(self.parents, dtype=np.int64)
        parents.flags.writeable = False
        object.__setattr__(self, "parents", parents)

        n_v, n_j = self.n_vertices, self.n_joints
        expected = {
            "template_vertices": (n_v, 3),
            "shape_blendshapes": (self.n_betas, n_v, 3),
            "joint_regressor": (n_j, n_v),
            "skinning_weights": (n_v, n_j),
            "keypoint_regressor": (self.n_keypoints, n_v),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"Rig field {name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.parents.shape != (n_j,):
            raise ValueError(f"Rig parents has {self.parents.shape[0]} entries, expected {n_j}")

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_regressor.shape[0]

    @property
    def n_betas(self) -> int:
        return self.shape_blendshapes.shape[0]

    @property
    def n_keypoints(self) -> int:
        return self.keypoint_regressor.shape[0]

    @property
    def pose_dim(self) -> int:
        return 3 * self.n_joints

    @cached_property
    def _constants(self) -> dict:
        return {
            "template": Tensor(self.template_vertices[None]),
            "blendshapes": Tensor(self.shape_blendshapes.reshape(self.n_betas, -1)),
            "joint_regressor": Tensor(self.joint_regressor),
            "skinning_weights": Tensor(self.skinning_weights),
            "keypoint_regressor": Tensor(self.keypoint_regressor),
        }

    def rest_joints(self) -> np.ndarray:
        return self.joint_regressor @ self.template_vertices

    def __eq__(self, other) -> bool:
        if not isinstance(other, HandRig):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in (
                "template_vertices",
                "shape_blendshapes",
                "joint_regressor",
                "parents",
                "skinning_weights",
                "keypoint_regressor",
            )
        )

    __hash__ = None


@dataclass
class HandParams:
    """
    Pose and shape for one hand (theta: 48, beta: 10) or a batch (B×48, B×10).

    Values may be arrays or Tensors; Tensors keep the parameters differentiable.
    """

    theta: Union[Tensor, np.ndarray]
    beta: Union[Tensor, np.ndarray]

    @classmethod
    def zeros(cls, n_joints: int = N_JOINTS, n_betas: int = N_BETAS) -> "HandParams":
        return cls(np.zeros(3 * n_joints), np.zeros(n_betas))

    @classmethod
    def from_vector(cls, vector: np.ndarray, n_joints: int = N_JOINTS) -> "HandParams":
        """Split a θ‖β vector (or rows of them)."""
        vector = np.asarray(vector, dtype=np.float64)
        return cls(vector[..., :3 * n_joints].copy(), vector[..., 3 * n_joints:].copy())

    def as_vector(self) -> np.ndarray:
        theta = self.theta.data if isinstance(self.theta, Tensor) else np.asarray(self.theta, dtype=np.float64)
        beta = self.beta.data if isinstance(self.beta, Tensor) else np.asarray(self.beta, dtype=np.float64)
        return np.concatenate([theta, beta], axis=-1)


@dataclass
class HandOutput:
    """Posed mesh (N_v×3) and keypoints (K×3), with a leading batch axis when batched."""

    vertices: Tensor
    joints3d: Tensor


def _apply_weights(weights: Tensor, x: Tensor) -> Tensor:
    """Contract a K×N weight matrix with the second axis of a B×N×… tensor."""
    batch, n = x.shape[0], x.shape[1]
    rest = x.shape[2:]
    axes = (1, 0) + tuple(range(2, x.ndim))
    flat = reshape(transpose(x, axes), (n, -1))
    mixed = matmul(weights, flat)
    return transpose(reshape(mixed, (weights.shape[0], batch) + rest), axes)


def forward(rig: HandRig, params: HandParams) -> HandOutput:
    """
    Pose the rig.

    Args:
        rig: Hand model constants
        params: Single or batched pose/shape parameters

    Returns:
        HandOutput with vertices and keypoints; batched iff params are batched

    Raises:
        ValueError: On non-finite parameters or wrong parameter sizes
    """
    theta = as_tensor(params.theta)
    beta = as_tensor(params.beta)
    single = theta.ndim == 1
    if single:
        theta = reshape(theta, (1, -1))
        beta = reshape(beta, (1, -1))
    if theta.ndim != 2 or beta.ndim != 2 or theta.shape[0] != beta.shape[0]:
        raise ValueError(f"Pose {theta.shape} and shape {beta.shape} are not matching batches")
    if theta.shape[1] != rig.pose_dim:
        raise ValueError(f"Pose has {theta.shape[1]} values, rig expects {rig.pose_dim}")
    if beta.shape[1] != rig.n_betas:
        raise ValueError(f"Shape has {beta.shape[1]} coefficients, rig expects {rig.n_betas}")
    if not (np.all(np.isfinite(theta.data)) and np.all(np.isfinite(beta.data))):
        raise ValueError("Hand parameters must be finite")

    consts = rig._constants
    batch, n_v, n_j = theta.shape[0], rig.n_vertices, rig.n_joints

    offsets = reshape(matmul(beta, consts["blendshapes"]), (batch, n_v, 3))
    shaped = offsets + expand(consts["template"], (batch, n_v, 3))

    joints = reshape(_apply_weights(consts["joint_regressor"], shaped), (batch, n_j, 3, 1))
    rotations = rodrigues(reshape(theta, (batch, n_j, 3)))

    world_r: List[Tensor] = []
    world_t: List[Tensor] = []
    rest_offsets: List[Tensor] = []
    for j in range(n_j):
        local_r = rotations[:, j]
        joint = joints[:, j]
        parent = int(rig.parents[j])
        if parent < 0:
            g_r, g_t = local_r, joint
        else:
            g_r = matmul(world_r[parent], local_r)
            g_t = matmul(world_r[parent], joint - joints[:, parent]) + world_t[parent]
        world_r.append(g_r)
        world_t.append(g_t)
        rest_offsets.append(g_t - matmul(g_r, joint))

    blend_r = _apply_weights(consts["skinning_weights"], stack(world_r, axis=1))
    blend_t = _apply_weights(consts["skinning_weights"], reshape(stack(rest_offsets, axis=1), (batch, n_j, 3)))

    posed = matmul(reshape(blend_r, (batch * n_v, 3, 3)), reshape(shaped, (batch * n_v, 3, 1)))
    vertices = reshape(posed, (batch, n_v, 3)) + blend_t
    joints3d = _apply_weights(consts["keypoint_regressor"], vertices)

    if single:
        vertices = reshape(vertices, (n_v, 3))
        joints3d = reshape(joints3d, (rig.n_keypoints, 3))
    return HandOutput(vertices=vertices, joints3d=joints3d)


# ---------------------------------------------------------------------------
# Synthetic rig
# ---------------------------------------------------------------------------

def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _segment_distances(points: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Distances from each point (N×3) to each segment (M×3 starts/ends) as N×M."""
    direction = ends - starts
    length_sq = np.maximum(np.sum(direction * direction, axis=1), 1e-12)
    rel = points[:, None, :] - starts[None, :, :]
    u = np.clip(np.sum(rel * direction[None], axis=2) / length_sq[None], 0.0, 1.0)
    closest = starts[None] + u[..., None] * direction[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def _nearest_average(vertices: np.ndarray, targets: np.ndarray, k: int) -> np.ndarray:
    k = min(k, vertices.shape[0])
    distances = np.linalg.norm(targets[:, None, :] - vertices[None, :, :], axis=2)
    regressor = np.zeros((targets.shape[0], vertices.shape[0]))
    for row, order in enumerate(np.argsort(distances, axis=1, kind="stable")):
        regressor[row, order[:k]] = 1.0 / k
    return regressor


def _skeleton(rng: np.random.Generator):
    """Rest joint positions (16×3), fingertip positions by finger, per-bone radius."""
    joints = np.zeros((N_JOINTS, 3))
    joints[0] = WRIST_POSITION + rng.normal(0.0, 1.0, 3)
    tips = {}
    radius = np.zeros(N_JOINTS)
    radius[0] = 12.0
    for finger, chain in FINGER_CHAINS.items():
        base, direction, lengths, finger_radius = _FINGER_LAYOUT[finger]
        direction = _unit(np.asarray(direction) + rng.normal(0.0, 0.03, 3))
        scale = 1.0 + rng.normal(0.0, 0.03)
        position = joints[0] + np.asarray(base) + rng.normal(0.0, 1.5, 3)
        for joint, length in zip(chain, lengths):
            joints[joint] = position
            radius[joint] = finger_radius
            position = position + direction * length * scale
        tips[finger] = position
    return joints, tips, radius


def make_synthetic_rig(seed: int = 0, n_vertices: int = DEFAULT_N_VERTICES) -> HandRig:
    """
    Build a deterministic hand-like rig.

    Vertices are scattered around the 16 bones (palm plus three bones per finger).
    Skinning weights are a distance softmax over each vertex's two nearest bones.
    Regressors average the nearest vertices to each joint and fingertip.

    Args:
        seed: Generator seed; identical (seed, n_vertices) give bit-identical rigs
        n_vertices: Vertex count, at least one per joint

    Raises:
        ValueError: If n_vertices < 16
    """
    if n_vertices < MIN_SYNTHETIC_VERTICES:
        raise ValueError(f"A synthetic rig needs at least {MIN_SYNTHETIC_VERTICES} vertices, got {n_vertices}")

    rng = np.random.default_rng(seed)
    joints, tips, radius = _skeleton(rng)

    # Bone j runs from joint j to its child (or fingertip); the wrist bone spans the palm.
    bone_end = np.zeros_like(joints)
    bone_end[0] = joints[FINGER_CHAINS["middle"][0]]
    for finger, chain in FINGER_CHAINS.items():
        for a, b in zip(chain[:-1], chain[1:]):
            bone_end[a] = joints[b]
        bone_end[chain[-1]] = tips[finger]

    vertices = np.zeros((n_vertices, 3))
    radial = np.zeros((n_vertices, 3))
    owner = np.arange(n_vertices) % N_JOINTS
    for i, bone in enumerate(owner):
        start, end = joints[bone], bone_end[bone]
        axis = _unit(end - start)
        u = rng.uniform(0.05, 1.0 if bone in (3, 6, 9, 12, 15) else 0.95)
        if bone == 0:
            lateral = np.array([rng.uniform(-PALM_HALF_WIDTH, PALM_HALF_WIDTH), 0.0, 0.0])
            depth = np.array([0.0, 0.0, rng.choice([-1.0, 1.0]) * rng.uniform(4.0, 9.0)])
            vertices[i] = start + u * (end - start) + lateral + depth
            radial[i] = _unit(depth)
        else:
            around = rng.normal(size=3)
            around -= axis * np.dot(around, axis)
            around = _unit(around)
            vertices[i] = start + u * (end - start) + around * radius[bone]
            radial[i] = around

    distances = _segment_distances(vertices, joints, bone_end)
    skinning = np.zeros((n_vertices, N_JOINTS))
    nearest = np.argsort(distances, axis=1, kind="stable")[:, :2]
    for i, pair in enumerate(nearest):
        logits = -distances[i, pair] / SKINNING_TEMPERATURE
        w = np.exp(logits - logits.max())
        skinning[i, pair] = w / w.sum()
    skinning /= skinning.sum(axis=1, keepdims=True)

    keypoint_targets = np.array(
        [joints[k] if isinstance(k, int) else tips[k] for k in KEYPOINT_ORDER]
    )
    joint_regressor = _nearest_average(vertices, joints, REGRESSOR_NEIGHBOURS)
    keypoint_regressor = _nearest_average(vertices, keypoint_targets, REGRESSOR_NEIGHBOURS)

    wrist = joints[0]
    centered = (vertices - wrist) / 100.0
    finger_axis = np.zeros((n_vertices, 3))
    finger_extent = np.zeros(n_vertices)
    for i, bone in enumerate(owner):
        if bone == 0:
            continue
        chain = next(c for c in FINGER_CHAINS.values() if bone in c)
        finger_axis[i] = _unit(bone_end[chain[-1]] - joints[chain[0]])
        finger_extent[i] = np.dot(vertices[i] - joints[chain[0]], finger_axis[i])

    blendshapes = np.zeros((N_BETAS, n_vertices, 3))
    blendshapes[0] = (vertices - wrist) * 0.06
    blendshapes[1] = finger_axis * (finger_extent * 0.08)[:, None]
    blendshapes[2, :, 0] = (vertices[:, 0] - wrist[0]) * 0.08
    blendshapes[3] = radial * 1.5
    for k in range(4, N_BETAS):
        field = rng.normal(0.0, 3.0, (3, 3))
        blendshapes[k] = centered @ field.T

    rig = HandRig(
        template_vertices=vertices,
        shape_blendshapes=blendshapes,
        joint_regressor=joint_regressor,
        parents=np.array(MANO_PARENTS),
        skinning_weights=skinning,
        keypoint_regressor=keypoint_regressor,
    )
    logger.info(f"Synthetic rig built: seed={seed}, {n_vertices} vertices, fingerprint {rig_fingerprint(rig):012x}")
    return rig


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def rig_to_bytes(rig: HandRig) -> bytes:
    writer = BinaryWriter(RIG_MAGIC)
    writer.u32(rig.n_vertices).u32(rig.n_joints)
    writer.section("template", rig.template_vertices)
    writer.section("blendshapes", rig.shape_blendshapes)
    writer.section("joint_regressor", rig.joint_regressor)
    writer.section("parents", rig.parents.astype(np.float64))
    writer.section("skinning_weights", rig.skinning_weights)
    writer.section("keypoint_regressor", rig.keypoint_regressor)
    return writer.getvalue()


def rig_fingerprint(rig: HandRig) -> int:
    """48-bit identifier of a rig's contents (exactly representable as f64)."""
    return int(hashlib.sha256(rig_to_bytes(rig)).hexdigest()[:12], 16)


def save_rig(rig: HandRig, path: Union[str, Path]) -> Path:
    path = write_atomic(path, rig_to_bytes(rig))
    logger.info(f"Saved rig ({rig.n_vertices} vertices) to {path}")
    return path


def rig_from_bytes(payload: bytes, source: str = "<bytes>") -> HandRig:
    reader = BinaryReader(payload, source)
    reader.expect_header(RIG_MAGIC, "rig")
    n_v = reader.u32("vertex count")
    n_j = reader.u32("joint count")
    if n_v < 1 or n_j < 1:
        raise FormatError(f"{source}: rig declares {n_v} vertices and {n_j} joints")

    template = reader.read_section("template", n_v * 3).reshape(n_v, 3)
    blend = reader.read_section("blendshapes")
    if blend.size % (n_v * 3):
        raise FormatError(f"{source}: section 'blendshapes' size {blend.size} is not a multiple of {n_v * 3}")
    blend = blend.reshape(-1, n_v, 3)
    joint_regressor = reader.read_section("joint_regressor", n_j * n_v).reshape(n_j, n_v)
    parents = reader.read_section("parents", n_j)
    skinning = reader.read_section("skinning_weights", n_v * n_j).reshape(n_v, n_j)
    keypoints = reader.read_section("keypoint_regressor")
    if keypoints.size % n_v:
        raise FormatError(f"{source}: section 'keypoint_regressor' size {keypoints.size} is not a multiple of {n_v}")
    reader.expect_end()

    if not np.array_equal(parents, np.round(parents)):
        raise FormatError(f"{source}: section 'parents' holds non-integer indices")

    rig = HandRig(
        template_vertices=template,
        shape_blendshapes=blend,
        joint_regressor=joint_regressor,
        parents=parents.astype(np.int64),
        skinning_weights=skinning,
        keypoint_regressor=keypoints.reshape(-1, n_v),
    )

    from .validation import validate_rig

    errors = [w for w in validate_rig(rig) if w.severity == "error"]
    if errors:
        raise FormatError(f"{source}: rig violates its invariants: {errors[0]}")
    return rig


def load_rig(path: Union[str, Path]) -> HandRig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Rig file not found: {path}")
    rig = rig_from_bytes(path.read_bytes(), str(path))
    logger.info(f"Loaded rig from {path}: {rig.n_vertices} vertices, {rig.n_joints} joints")
    return rig


def hand_mesh_for(rig: HandRig, params: HandParams) -> Tuple[np.ndarray, np.ndarray]:
    """Vertices and keypoints as plain arrays (no graph), for labels and metrics."""
    with no_grad():
        output = forward(rig, params)
    return output.vertices.data, output.joints3d.data
