"""
Teacher and student networks.

Both share one architecture and differ only in width: a stack of stride-2 3×3
convolutions with tanh produces the feature map F; a head with one learned query token
cross-attends over the H·W tokens of F and a two-layer perceptron regresses pose θ (48),
shape β (10) and camera translation t (3). Keypoints come from the hand model and the
camera, so the whole prediction is differentiable end to end.
"""

import copy
import hashlib
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    concat,
    conv3x3,
    exp,
    expand,
    matmul,
    reshape,
    softmax,
    tanh,
    transpose,
)
from .camera import CameraParams, project
from .data import DEFAULT_DATASET_FOCAL, DEFAULT_IMAGE_SIZE
from .formats import BinaryReader, BinaryWriter, FormatError, write_atomic
from .hand_model import N_BETAS, N_KEYPOINTS, POSE_DIM, HandParams, HandRig, forward
from .losses import FeatureMap, Prediction

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"HKDM"

TRANSLATION_DIM = 3
OUTPUT_DIM = POSE_DIM + N_BETAS + TRANSLATION_DIM
BETA_INIT_SCALE = 0.1
CAMERA_XY_SCALE = 50.0  # mm
CAMERA_DEPTH_SCALE = 600.0  # mm
CAMERA_DEPTH_RATE = 0.5


@dataclass
class NetConfig:
    """
    Architecture of one network.

    Attributes:
        channel_widths: Output channels of each backbone stage
        head_dim: Attention and hidden-layer width of the head
        input_channels: Channels of the input image (one heatmap per keypoint)
        input_size: (height, width) of the input image
        seed: Initialization seed
    """

    channel_widths: Tuple[int, ...] = (8, 16, 32)
    head_dim: int = 32
    input_channels: int = N_KEYPOINTS
    input_size: Tuple[int, int] = DEFAULT_IMAGE_SIZE
    seed: int = 0

    def __post_init__(self):
        self.channel_widths = tuple(int(w) for w in self.channel_widths)
        self.input_size = (int(self.input_size[0]), int(self.input_size[1]))
        self.validate()

    def validate(self) -> None:
        if not self.channel_widths:
            raise ValueError("Backbone needs at least one stage")
        if min(self.channel_widths) < 1:
            raise ValueError(f"Channel widths must be ≥ 1, got {list(self.channel_widths)}")
        if self.head_dim < 1:
            raise ValueError(f"head_dim must be ≥ 1, got {self.head_dim}")
        if self.input_channels < 1 or min(self.input_size) < 1:
            raise ValueError(f"Input extents must be ≥ 1, got {self.input_channels}×{self.input_size}")

    @property
    def stages(self) -> int:
        return len(self.channel_widths)

    def stage_sizes(self) -> List[Tuple[int, int]]:
        """Spatial extent after each stage."""
        h, w = self.input_size
        sizes = []
        for _ in self.channel_widths:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
            sizes.append((h, w))
        return sizes

    def feature_shape(self) -> Tuple[int, int, int]:
        h, w = self.stage_sizes()[-1]
        return self.channel_widths[-1], h, w

    def to_dict(self) -> dict:
        return {
            "channel_widths": list(self.channel_widths),
            "head_dim": self.head_dim,
            "input_channels": self.input_channels,
            "input_size": list(self.input_size),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetConfig":
        return cls(
            channel_widths=tuple(data.get("channel_widths", (8, 16, 32))),
            head_dim=int(data.get("head_dim", 32)),
            input_channels=int(data.get("input_channels", N_KEYPOINTS)),
            input_size=tuple(data.get("input_size", DEFAULT_IMAGE_SIZE)),
            seed=int(data.get("seed", 0)),
        )


NET_PRESETS: Dict[str, NetConfig] = {
    "teacher": NetConfig(channel_widths=(32, 64, 128), head_dim=128),
    "small": NetConfig(channel_widths=(8, 16, 32), head_dim=32),
    "large": NetConfig(channel_widths=(16, 32, 64), head_dim=64),
}


def preset(name: str, seed: int = 0) -> NetConfig:
    """Copy of a named configuration with the given seed."""
    if name not in NET_PRESETS:
        raise ValueError(f"Unknown network preset '{name}' (choose from {', '.join(NET_PRESETS)})")
    cfg = copy.deepcopy(NET_PRESETS[name])
    cfg.seed = seed
    return cfg


def parameter_shapes(cfg: NetConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Names and shapes of every parameter, in file order."""
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    c_in = cfg.input_channels
    for i, c_out in enumerate(cfg.channel_widths):
        shapes[f"backbone.conv{i}.weight"] = (c_out, c_in, 3, 3)
        shapes[f"backbone.conv{i}.bias"] = (c_out,)
        c_in = c_out
    d = cfg.head_dim
    shapes["head.query"] = (c_in,)
    shapes["head.w_q"] = (c_in, d)
    shapes["head.w_k"] = (c_in, d)
    shapes["head.w_v"] = (c_in, d)
    shapes["head.mlp1.weight"] = (d, d)
    shapes["head.mlp1.bias"] = (d,)
    shapes["head.mlp2.weight"] = (d, OUTPUT_DIM)
    shapes["head.mlp2.bias"] = (OUTPUT_DIM,)
    return shapes


def _fan_in(name: str, shape: Tuple[int, ...], cfg: NetConfig) -> int:
    if name.startswith("backbone.conv"):
        stage = int(name.split(".")[1][len("conv"):])
        c_in = cfg.input_channels if stage == 0 else cfg.channel_widths[stage - 1]
        return c_in * 9
    if name == "head.query":
        return shape[0]
    if name.endswith(".bias"):
        return cfg.head_dim
    return shape[0]


@dataclass
class Model:
    """
    Parameters of one network. A frozen model exposes no trainable parameters and its
    tensors do not require gradients.
    """

    config: NetConfig
    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    frozen: bool = False

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def trainable_parameters(self) -> "OrderedDict[str, Tensor]":
        if self.frozen:
            return OrderedDict()
        return OrderedDict((k, v) for k, v in self.params.items() if v.requires_grad)

    def checksum(self) -> str:
        """sha256 over parameter names and bytes."""
        digest = hashlib.sha256()
        for name, tensor in self.params.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
        return digest.hexdigest()

    def copy(self, frozen: Optional[bool] = None) -> "Model":
        frozen = self.frozen if frozen is None else frozen
        params = OrderedDict(
            (name, Tensor(t.data.copy(), requires_grad=not frozen)) for name, t in self.params.items()
        )
        return Model(copy.deepcopy(self.config), params, frozen)


def init_model(cfg: NetConfig) -> Model:
    """
    Fan-in scaled uniform initialization from `cfg.seed`; the β columns of the last
    layer are scaled down so early meshes stay near the template.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        bound = 1.0 / math.sqrt(_fan_in(name, shape, cfg))
        values = rng.uniform(-bound, bound, shape)
        if name.startswith("head.mlp2"):
            values[..., POSE_DIM:POSE_DIM + N_BETAS] *= BETA_INIT_SCALE
        params[name] = Tensor(values, requires_grad=True)
    logger.debug(f"Initialized model {list(cfg.channel_widths)}/{cfg.head_dim} with seed {cfg.seed}")
    return Model(cfg, params, frozen=False)


def freeze(model: Model) -> Model:
    """Mark the model frozen in place; its tensors stop recording gradients."""
    model.frozen = True
    for tensor in model.params.values():
        tensor.requires_grad = False
        tensor.grad = None
    return model


def conv_param_count(c_in: int, c_out: int, bias: bool = True) -> int:
    return c_in * c_out * 9 + (c_out if bias else 0)


def param_count(model: Model, trainable_only: bool = True) -> int:
    """Scalar parameter count; a frozen model has no trainable parameters."""
    tensors = model.trainable_parameters() if trainable_only else model.params
    return int(sum(t.size for t in tensors.values()))


def flop_count(cfg_or_model: Union[NetConfig, Model]) -> int:
    """Multiply-accumulates of one network forward (the hand model is not counted)."""
    cfg = cfg_or_model.config if isinstance(cfg_or_model, Model) else cfg_or_model
    macs = 0
    c_in = cfg.input_channels
    for c_out, (h, w) in zip(cfg.channel_widths, cfg.stage_sizes()):
        macs += c_out * c_in * 9 * h * w
        c_in = c_out
    c, h, w = cfg.feature_shape()
    tokens, d = h * w, cfg.head_dim
    macs += c * d  # query projection
    macs += 2 * tokens * c * d  # keys and values
    macs += 2 * tokens * d  # scores and weighted sum
    macs += d * d + d * OUTPUT_DIM
    return int(macs)


def _image_tensor(model: Model, image) -> Tensor:
    x = as_tensor(np.asarray(image, dtype=np.float64) if not isinstance(image, Tensor) else image)
    expected = (model.config.input_channels,) + model.config.input_size
    if x.ndim not in (3, 4) or x.shape[-3:] != expected:
        raise ValueError(f"Input image has shape {x.shape}, model expects {expected} (optionally batched)")
    return x


def forward_backbone(model: Model, image) -> FeatureMap:
    """
    Run the convolution stages.

    Raises:
        ValueError: If the image does not match the configured channels and size
    """
    x = _image_tensor(model, image)
    for i in range(model.config.stages):
        x = tanh(conv3x3(x, model[f"backbone.conv{i}.weight"], model[f"backbone.conv{i}.bias"], stride=2))
    return FeatureMap(x)


def _row_bias(bias: Tensor, rows: int) -> Tensor:
    return expand(reshape(bias, (1, bias.shape[0])), (rows, bias.shape[0]))


def cross_attend(model: Model, features: FeatureMap) -> Tuple[Tensor, Tensor]:
    """
    Single-head scaled dot-product attention of the learned query over the feature tokens.

    Returns:
        (attended values B×d, attention weights B×(H·W))
    """
    f = features.values
    if not features.batched:
        f = reshape(f, (1,) + f.shape)
    batch, c, h, w = f.shape
    n, d = h * w, model.config.head_dim
    if c != model["head.query"].shape[0]:
        raise ValueError(f"Feature map has {c} channels, head expects {model['head.query'].shape[0]}")

    tokens = reshape(transpose(reshape(f, (batch, c, n)), (0, 2, 1)), (batch * n, c))
    keys = matmul(tokens, model["head.w_k"])
    values = reshape(matmul(tokens, model["head.w_v"]), (batch, n, d))
    query = matmul(reshape(model["head.query"], (1, c)), model["head.w_q"])

    scores = reshape(matmul(keys, transpose(query, (1, 0))), (batch, n)) * (1.0 / math.sqrt(d))
    weights = softmax(scores, axis=-1)
    attended = reshape(matmul(reshape(weights, (batch, 1, n)), values), (batch, d))
    return attended, weights


def _camera_translation(raw: Tensor) -> Tensor:
    """t = (50·r_x, 50·r_y, 600·exp(0.5·r_z)); depth stays positive."""
    txy = raw[:, 0:2] * CAMERA_XY_SCALE
    tz = exp(raw[:, 2:3] * CAMERA_DEPTH_RATE) * CAMERA_DEPTH_SCALE
    return concat([txy, tz], axis=1)


def forward_head(
    model: Model,
    features: FeatureMap,
    rig: HandRig,
    focal: float = DEFAULT_DATASET_FOCAL,
    image_size: Optional[Tuple[int, int]] = None,
) -> Prediction:
    """
    Regress θ, β and t from the feature map, then pose the rig and project its keypoints.

    Returns:
        Batched Prediction (a single feature map gives a batch of one)
    """
    if rig.pose_dim != POSE_DIM or rig.n_betas != N_BETAS:
        raise ValueError(f"Head regresses {POSE_DIM}+{N_BETAS} parameters, rig needs {rig.pose_dim}+{rig.n_betas}")
    image_size = image_size or model.config.input_size
    attended, _ = cross_attend(model, features)
    batch = attended.shape[0]

    hidden = tanh(matmul(attended, model["head.mlp1.weight"]) + _row_bias(model["head.mlp1.bias"], batch))
    out = matmul(hidden, model["head.mlp2.weight"]) + _row_bias(model["head.mlp2.bias"], batch)
    theta = out[:, :POSE_DIM]
    beta = out[:, POSE_DIM:POSE_DIM + N_BETAS]
    translation = _camera_translation(out[:, POSE_DIM + N_BETAS:])

    posed = forward(rig, HandParams(theta, beta))
    camera = CameraParams(translation, focal, image_size)
    k2d = project(posed.joints3d, camera)
    return Prediction(posed.joints3d, k2d, theta, beta, camera, posed.vertices)


def predict(
    model: Model,
    images,
    rig: HandRig,
    focal: float = DEFAULT_DATASET_FOCAL,
    image_size: Optional[Tuple[int, int]] = None,
) -> Tuple[Prediction, FeatureMap]:
    features = forward_backbone(model, images)
    return forward_head(model, features, rig, focal, image_size), features


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _config_vector(cfg: NetConfig) -> np.ndarray:
    return np.asarray(
        [cfg.stages, *cfg.channel_widths, cfg.head_dim, cfg.input_channels, *cfg.input_size, cfg.seed],
        dtype=np.float64,
    )


def _config_from_vector(values: np.ndarray, source: str) -> NetConfig:
    if values.size < 1 or int(values[0]) < 1 or values.size != int(values[0]) + 6:
        raise FormatError(f"{source}: section 'config' is malformed ({values.size} values)")
    stages = int(values[0])
    try:
        return NetConfig(
            channel_widths=tuple(int(v) for v in values[1:1 + stages]),
            head_dim=int(values[1 + stages]),
            input_channels=int(values[2 + stages]),
            input_size=(int(values[3 + stages]), int(values[4 + stages])),
            seed=int(values[5 + stages]),
        )
    except ValueError as e:
        raise FormatError(f"{source}: section 'config' is invalid: {e}") from e


def model_to_bytes(model: Model, extra: Optional[Dict[str, np.ndarray]] = None) -> bytes:
    """Serialize; `extra` sections (optimizer state) follow the parameters."""
    extra = extra or {}
    writer = BinaryWriter(MODEL_MAGIC)
    writer.u32(1 + len(model.params) + len(extra))
    writer.section("config", _config_vector(model.config))
    for name, tensor in model.params.items():
        writer.section(name, tensor.data)
    for name, values in extra.items():
        writer.section(name, values)
    writer.u8(1 if model.frozen else 0)
    return writer.getvalue()


def model_from_bytes(payload: bytes, source: str = "<bytes>") -> Tuple[Model, "OrderedDict[str, np.ndarray]"]:
    """
    Returns:
        (model, extra sections in file order)

    Raises:
        FormatError: On bad magic or version, missing or misshapen sections, or truncation
    """
    reader = BinaryReader(payload, source)
    reader.expect_header(MODEL_MAGIC, "model")
    n_sections = reader.u32("section count")
    cfg = _config_from_vector(reader.read_section("config"), source)

    shapes = parameter_shapes(cfg)
    if n_sections < 1 + len(shapes):
        raise FormatError(f"{source}: model declares {n_sections} sections, needs at least {1 + len(shapes)}")
    values = OrderedDict()
    for name, shape in shapes.items():
        values[name] = reader.read_section(name, int(np.prod(shape))).reshape(shape)
    extra: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(n_sections - 1 - len(shapes)):
        name, data = reader.next_section()
        extra[name] = data
    frozen = reader.u8("frozen flag")
    if frozen not in (0, 1):
        raise FormatError(f"{source}: frozen flag is {frozen}, expected 0 or 1")
    reader.expect_end()

    params = OrderedDict((name, Tensor(v, requires_grad=not frozen)) for name, v in values.items())
    return Model(cfg, params, bool(frozen)), extra


def save_model(model: Model, path: Union[str, Path]) -> Path:
    path = write_atomic(path, model_to_bytes(model))
    logger.info(f"Saved model ({param_count(model, trainable_only=False)} parameters) to {path}")
    return path


def load_model(path: Union[str, Path]) -> Model:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model file not found: {path}")
    model, extra = model_from_bytes(path.read_bytes(), str(path))
    if extra:
        logger.info(f"Ignoring {len(extra)} optimizer sections in {path}")
    logger.info(f"Loaded model {list(model.config.channel_widths)}/{model.config.head_dim} from {path}")
    return model


__all__ = [
    "MODEL_MAGIC",
    "OUTPUT_DIM",
    "NetConfig",
    "NET_PRESETS",
    "preset",
    "parameter_shapes",
    "Model",
    "init_model",
    "freeze",
    "conv_param_count",
    "param_count",
    "flop_count",
    "forward_backbone",
    "cross_attend",
    "forward_head",
    "predict",
    "model_to_bytes",
    "model_from_bytes",
    "save_model",
    "load_model",
]
