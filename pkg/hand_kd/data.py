"""
Deterministic synthetic hand dataset.

Each sample draws hand parameters and a camera, poses the rig, projects the keypoints and
renders a 21-channel heatmap image around them. The first ⌈n·frac_2d_only⌉ samples hide
their 3D labels (ONLY_2D); the true parameters are always kept for evaluation.

Samples are generated from per-index seeds, so the dataset bytes do not depend on how
generation is scheduled across threads.
"""

import hashlib
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from tenacity import before_sleep_log, retry, retry_if_exception_type, stop_after_attempt

from .autodiff import no_grad
from .camera import CameraParams, DepthError, project
from .formats import BinaryReader, BinaryWriter, FormatError, write_atomic
from .hand_model import HandOutput, HandParams, HandRig, forward, rig_fingerprint
from .losses import AnnotationMode, GroundTruth, GroundTruthBatch

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"HKDD"

DEFAULT_N_TRAIN = 2000
DEFAULT_N_EVAL = 500
DEFAULT_FRAC_2D_ONLY = 0.3
DEFAULT_SIGMA = 2.0
DEFAULT_NOISE_STD = 0.05
DEFAULT_DATASET_FOCAL = 80.0
DEFAULT_IMAGE_SIZE = (64, 64)

MAX_RESAMPLE_ATTEMPTS = 100

# Sampling ranges (radians, mm)
GLOBAL_ROTATION_RANGE = math.pi / 4
JOINT_ANGLE_RANGE = 0.6
BETA_CLIP = 2.0
TRANSLATION_XY_RANGE = 50.0
DEPTH_RANGE = (400.0, 800.0)

_MODE_CODES = {AnnotationMode.FULL_3D: 0, AnnotationMode.ONLY_2D: 1}
_CODE_MODES = {code: mode for mode, code in _MODE_CODES.items()}
_HEADER_FIELDS = (
    "n",
    "seed",
    "rig_fingerprint",
    "rig_vertices",
    "frac_2d_only",
    "sigma",
    "noise_std",
    "focal",
    "image_height",
    "image_width",
    "n_keypoints",
    "pose_dim",
    "n_betas",
)


@dataclass(frozen=True)
class RenderSettings:
    image_size: Tuple[int, int] = DEFAULT_IMAGE_SIZE
    sigma: float = DEFAULT_SIGMA
    noise_std: float = DEFAULT_NOISE_STD

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"Heatmap sigma must be positive, got {self.sigma}")
        if self.noise_std < 0:
            raise ValueError(f"Noise std must be non-negative, got {self.noise_std}")
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    def to_dict(self) -> dict:
        return {"image_size": list(self.image_size), "sigma": self.sigma, "noise_std": self.noise_std}

    @classmethod
    def from_dict(cls, data: dict) -> "RenderSettings":
        return cls(
            image_size=tuple(data.get("image_size", DEFAULT_IMAGE_SIZE)),
            sigma=float(data.get("sigma", DEFAULT_SIGMA)),
            noise_std=float(data.get("noise_std", DEFAULT_NOISE_STD)),
        )


@dataclass
class Sample:
    """One synthetic example with its rendered K×H×W input image."""

    index: int
    gt: GroundTruth
    hand: HandParams
    camera: CameraParams
    image: np.ndarray
    render: RenderSettings = field(default_factory=RenderSettings)

    @property
    def annotation_mode(self) -> AnnotationMode:
        return self.gt.annotation_mode

    @property
    def true_params(self) -> Tuple[HandParams, CameraParams]:
        return self.hand, self.camera


@dataclass
class Dataset:
    samples: List[Sample]
    seed: int
    rig_fingerprint: int
    rig_vertices: int
    frac_2d_only: float
    focal: float = DEFAULT_DATASET_FOCAL
    render: RenderSettings = field(default_factory=RenderSettings)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.render.image_size

    @property
    def n_only_2d(self) -> int:
        return sum(1 for s in self.samples if s.annotation_mode is AnnotationMode.ONLY_2D)

    def images(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """Stack of input images, B×21×H×W."""
        indices = range(len(self)) if indices is None else indices
        return np.stack([self.samples[i].image for i in indices])

    def ground_truth(self, indices: Optional[Sequence[int]] = None) -> GroundTruthBatch:
        indices = range(len(self)) if indices is None else indices
        return GroundTruthBatch.from_samples([self.samples[i].gt for i in indices])

    def true_arrays(self, indices: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """True (θ B×48, β B×10, t B×3) for the selected samples."""
        indices = range(len(self)) if indices is None else indices
        theta = np.stack([np.asarray(self.samples[i].hand.theta, dtype=np.float64) for i in indices])
        beta = np.stack([np.asarray(self.samples[i].hand.beta, dtype=np.float64) for i in indices])
        t = np.stack([self.samples[i].camera.translation_array for i in indices])
        return theta, beta, t

    def to_bytes(self) -> bytes:
        return dataset_to_bytes(self)

    def checksum(self) -> str:
        """SHA-256 of the serialized dataset, hashed record by record."""
        digest = hashlib.sha256()
        length = 0
        for chunk in _dataset_chunks(self):
            digest.update(chunk)
            length += len(chunk)
        digest.update(struct.pack("<Q", length))
        return digest.hexdigest()


@retry(
    stop=stop_after_attempt(MAX_RESAMPLE_ATTEMPTS),
    retry=retry_if_exception_type(DepthError),
    before_sleep=before_sleep_log(logger, logging.DEBUG),
    reraise=True,
)
def sample_gt(
    rng: np.random.Generator,
    rig: HandRig,
    focal: float = DEFAULT_DATASET_FOCAL,
    image_size: Tuple[int, int] = DEFAULT_IMAGE_SIZE,
) -> Tuple[HandParams, CameraParams, HandOutput, np.ndarray]:
    """
    Draw hand parameters and a camera, then pose and project.

    Draws are resampled while any vertex or keypoint would sit behind the camera; after
    MAX_RESAMPLE_ATTEMPTS the last DepthError propagates.

    Returns:
        (hand parameters, camera, posed output, K×2 projected keypoints)
    """
    theta = np.empty(rig.pose_dim)
    theta[:3] = rng.uniform(-GLOBAL_ROTATION_RANGE, GLOBAL_ROTATION_RANGE, 3)
    theta[3:] = rng.uniform(-JOINT_ANGLE_RANGE, JOINT_ANGLE_RANGE, rig.pose_dim - 3)
    beta = np.clip(rng.standard_normal(rig.n_betas), -BETA_CLIP, BETA_CLIP)
    translation = np.array([
        rng.uniform(-TRANSLATION_XY_RANGE, TRANSLATION_XY_RANGE),
        rng.uniform(-TRANSLATION_XY_RANGE, TRANSLATION_XY_RANGE),
        rng.uniform(*DEPTH_RANGE),
    ])

    params = HandParams(theta, beta)
    camera = CameraParams(translation, focal, image_size)
    with no_grad():
        output = forward(rig, params)
        project(output.vertices, camera)
        k2d = project(output.joints3d, camera).data
    return params, camera, output, k2d


def render_input(
    k2d: np.ndarray,
    image_size: Tuple[int, int] = DEFAULT_IMAGE_SIZE,
    sigma: float = DEFAULT_SIGMA,
    noise_std: float = DEFAULT_NOISE_STD,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    One Gaussian bump per keypoint (peak 1 at the keypoint, std `sigma` px) plus
    N(0, noise_std²) noise. Keypoints outside the frame are clipped to its border.

    Returns:
        K×H×W image
    """
    height, width = image_size
    k2d = np.asarray(k2d, dtype=np.float64)
    u = np.clip(k2d[:, 0], 0.0, width - 1.0)
    v = np.clip(k2d[:, 1], 0.0, height - 1.0)
    gx = np.exp(-((np.arange(width)[None, :] - u[:, None]) ** 2) / (2.0 * sigma ** 2))
    gy = np.exp(-((np.arange(height)[None, :] - v[:, None]) ** 2) / (2.0 * sigma ** 2))
    image = gy[:, :, None] * gx[:, None, :]
    if noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng()
        image = image + rng.normal(0.0, noise_std, image.shape)
    return image


def _only_2d_count(n: int, frac_2d_only: float) -> int:
    # round() absorbs float error such as 10 * 0.3 = 3.0000000000000004
    return int(math.ceil(round(n * frac_2d_only, 9)))


def _make_sample(
    index: int,
    seed: int,
    rig: HandRig,
    n_only_2d: int,
    focal: float,
    render: RenderSettings,
) -> Sample:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    params, camera, output, k2d = sample_gt(rng, rig, focal, render.image_size)
    if index < n_only_2d:
        gt = GroundTruth(k2d=k2d, annotation_mode=AnnotationMode.ONLY_2D)
    else:
        gt = GroundTruth(
            k2d=k2d,
            annotation_mode=AnnotationMode.FULL_3D,
            k3d=output.joints3d.data.copy(),
            mano_params=params.as_vector(),
        )
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, index, 1]))
    image = render_input(k2d, render.image_size, render.sigma, render.noise_std, noise_rng)
    return Sample(index, gt, params, camera, image, render)


def make_dataset(
    n: int,
    seed: int,
    rig: HandRig,
    frac_2d_only: float = DEFAULT_FRAC_2D_ONLY,
    sigma: float = DEFAULT_SIGMA,
    noise_std: float = DEFAULT_NOISE_STD,
    focal: float = DEFAULT_DATASET_FOCAL,
    image_size: Tuple[int, int] = DEFAULT_IMAGE_SIZE,
    max_workers: int = 1,
) -> Dataset:
    """
    Generate `n` samples.

    Raises:
        ValueError: If n < 1 or frac_2d_only is outside [0, 1]
    """
    if n < 1:
        raise ValueError(f"Dataset size must be at least 1, got {n}")
    if not 0.0 <= frac_2d_only <= 1.0:
        raise ValueError(f"frac_2d_only must lie in [0, 1], got {frac_2d_only}")
    render = RenderSettings(image_size, sigma, noise_std)
    n_only_2d = _only_2d_count(n, frac_2d_only)

    samples: List[Optional[Sample]] = [None] * n
    if max_workers <= 1:
        for i in range(n):
            samples[i] = _make_sample(i, seed, rig, n_only_2d, focal, render)
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            futures = {
                executor.submit(_make_sample, i, seed, rig, n_only_2d, focal, render): i
                for i in range(n)
            }
            for future in as_completed(futures):
                samples[futures[future]] = future.result()

    dataset = Dataset(
        samples=samples,
        seed=seed,
        rig_fingerprint=rig_fingerprint(rig),
        rig_vertices=rig.n_vertices,
        frac_2d_only=frac_2d_only,
        focal=focal,
        render=render,
    )
    logger.info(f"Generated dataset: {n} samples ({n_only_2d} 2D-only), seed {seed}")
    return dataset


def check_rig(dataset: Dataset, rig: HandRig) -> None:
    """
    Raises:
        ValueError: If the dataset was not generated with `rig`
    """
    if dataset.rig_fingerprint != rig_fingerprint(rig):
        raise ValueError(
            f"Dataset was generated with rig {dataset.rig_fingerprint:012x}, not {rig_fingerprint(rig):012x}"
        )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _record_size(n_kp: int, pose_dim: int, n_betas: int, image_size: Tuple[int, int]) -> int:
    # image, K2D, K3D, θ‖β label, true θ, true β, true t
    image = n_kp * image_size[0] * image_size[1]
    return image + 2 * n_kp + 3 * n_kp + (pose_dim + n_betas) + pose_dim + n_betas + 3


def _dataset_chunks(ds: Dataset) -> Iterator[bytes]:
    """The file body without its trailer: magic, version and header, then one chunk per record."""
    first = ds.samples[0]
    n_kp = np.asarray(first.gt.k2d).shape[0]
    pose_dim = np.asarray(first.hand.theta).shape[0]
    n_betas = np.asarray(first.hand.beta).shape[0]
    image_shape = (n_kp, *ds.render.image_size)
    header = [
        len(ds),
        ds.seed,
        ds.rig_fingerprint,
        ds.rig_vertices,
        ds.frac_2d_only,
        ds.render.sigma,
        ds.render.noise_std,
        ds.focal,
        ds.render.image_size[0],
        ds.render.image_size[1],
        n_kp,
        pose_dim,
        n_betas,
    ]

    writer = BinaryWriter(DATASET_MAGIC)
    writer.section("header", np.asarray(header, dtype=np.float64))
    yield writer.getvalue()

    no_k3d = np.zeros(3 * n_kp)
    no_mano = np.zeros(pose_dim + n_betas)
    for sample in ds.samples:
        gt = sample.gt
        if np.shape(sample.image) != image_shape:
            raise ValueError(f"Sample {sample.index} image has shape {np.shape(sample.image)}, expected {image_shape}")
        record = np.concatenate([
            np.ravel(sample.image),
            np.ravel(gt.k2d),
            np.ravel(gt.k3d) if gt.is_full_3d else no_k3d,
            np.ravel(gt.mano_params) if gt.is_full_3d else no_mano,
            np.ravel(sample.hand.theta),
            np.ravel(sample.hand.beta),
            sample.camera.translation_array,
        ])
        yield struct.pack("<B", _MODE_CODES[gt.annotation_mode]) + np.ascontiguousarray(record, dtype="<f8").tobytes()


def dataset_to_bytes(ds: Dataset) -> bytes:
    body = b"".join(_dataset_chunks(ds))
    return body + struct.pack("<Q", len(body))


def save_dataset(ds: Dataset, path: Union[str, Path]) -> Path:
    path = write_atomic(path, dataset_to_bytes(ds))
    logger.info(f"Saved dataset ({len(ds)} samples) to {path}")
    return path


def dataset_from_bytes(payload: bytes, source: str = "<bytes>") -> Dataset:
    """
    Raises:
        FormatError: On bad magic or version, a trailer that disagrees with the file length
            (partial write), or a missing or truncated section
    """
    reader = BinaryReader(payload, source)
    reader.expect_header(DATASET_MAGIC, "dataset")
    if len(payload) < 16:
        raise FormatError(f"{source}: truncated before section 'header'")
    recorded = int(np.frombuffer(payload[-8:], dtype="<u8")[0])
    if recorded != len(payload) - 8:
        raise FormatError(
            f"{source}: trailing length records {recorded} bytes but the file holds "
            f"{len(payload) - 8}; partial write"
        )
    body = BinaryReader(payload[:-8], source)
    body.expect_header(DATASET_MAGIC, "dataset")

    values = body.read_section("header", len(_HEADER_FIELDS))
    header = dict(zip(_HEADER_FIELDS, values))
    n = int(header["n"])
    n_kp, pose_dim, n_betas = int(header["n_keypoints"]), int(header["pose_dim"]), int(header["n_betas"])
    if n < 1:
        raise FormatError(f"{source}: section 'header' declares {n} samples")
    render = RenderSettings(
        (int(header["image_height"]), int(header["image_width"])),
        float(header["sigma"]),
        float(header["noise_std"]),
    )
    focal = float(header["focal"])
    size = _record_size(n_kp, pose_dim, n_betas, render.image_size)
    image_shape = (n_kp, *render.image_size)
    offsets = np.cumsum([0, math.prod(image_shape), 2 * n_kp, 3 * n_kp, pose_dim + n_betas, pose_dim, n_betas, 3])

    samples = []
    for i in range(n):
        code = body.u8(f"sample {i} annotation mode")
        if code not in _CODE_MODES:
            raise FormatError(f"{source}: sample {i} has unknown annotation mode {code}")
        record = body.f64(size, f"sample {i} record")
        parts = [record[offsets[j]:offsets[j + 1]] for j in range(len(offsets) - 1)]
        image, k2d, k3d, mano, theta, beta, t = parts
        mode = _CODE_MODES[code]
        if mode is AnnotationMode.FULL_3D:
            gt = GroundTruth(k2d.reshape(n_kp, 2), mode, k3d.reshape(n_kp, 3), mano.copy())
        else:
            gt = GroundTruth(k2d.reshape(n_kp, 2), mode)
        samples.append(Sample(
            index=i,
            gt=gt,
            hand=HandParams(theta.copy(), beta.copy()),
            camera=CameraParams(t.copy(), focal, render.image_size),
            image=image.reshape(image_shape).copy(),
            render=render,
        ))
    body.expect_end()

    return Dataset(
        samples=samples,
        seed=int(header["seed"]),
        rig_fingerprint=int(header["rig_fingerprint"]),
        rig_vertices=int(header["rig_vertices"]),
        frac_2d_only=float(header["frac_2d_only"]),
        focal=focal,
        render=render,
    )


def load_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    ds = dataset_from_bytes(path.read_bytes(), str(path))
    logger.info(f"Loaded dataset from {path}: {len(ds)} samples ({ds.n_only_2d} 2D-only)")
    return ds


__all__ = [
    "DATASET_MAGIC",
    "DEFAULT_N_TRAIN",
    "DEFAULT_N_EVAL",
    "DEFAULT_FRAC_2D_ONLY",
    "DEFAULT_DATASET_FOCAL",
    "RenderSettings",
    "Sample",
    "Dataset",
    "sample_gt",
    "render_input",
    "make_dataset",
    "check_rig",
    "dataset_to_bytes",
    "dataset_from_bytes",
    "save_dataset",
    "load_dataset",
]
