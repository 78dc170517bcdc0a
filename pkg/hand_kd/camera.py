"""
Full-perspective pinhole projection of model-frame points to pixels.

The camera is a regressed translation t plus a fixed focal length with the principal
point at the image center:

    u = f·(x + t_x)/(z + t_z) + W/2,   v = f·(y + t_y)/(z + t_z) + H/2
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .autodiff import Tensor, as_tensor, expand, reshape

logger = logging.getLogger(__name__)

DEFAULT_FOCAL = 1000.0
DEFAULT_IMAGE_SIZE = (64, 64)
MIN_DEPTH = 1e-3  # mm


class DepthError(ValueError):
    """A point sits at or behind the camera plane."""

    def __init__(self, message: str, index: int, batch_index: Optional[int] = None):
        super().__init__(message)
        self.index = index
        self.batch_index = batch_index


@dataclass
class CameraParams:
    """
    Camera for one sample (translation of shape 3) or a batch (B×3).

    Attributes:
        translation: t in mm, array or Tensor
        focal: Focal length in pixels
        image_size: (height, width) in pixels
    """

    translation: Union[Tensor, np.ndarray]
    focal: float = DEFAULT_FOCAL
    image_size: Tuple[int, int] = DEFAULT_IMAGE_SIZE

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"Focal length must be positive, got {self.focal}")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise ValueError(f"Image size must be two positive extents, got {self.image_size}")
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    @property
    def translation_array(self) -> np.ndarray:
        t = self.translation
        return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)

    def detach(self) -> "CameraParams":
        t = self.translation
        return CameraParams(
            t.detach() if isinstance(t, Tensor) else np.array(t, dtype=np.float64),
            self.focal,
            self.image_size,
        )


def project(points3d: Union[Tensor, np.ndarray], cam: CameraParams) -> Tensor:
    """
    Project N×3 points (or B×N×3 batches) to N×2 (B×N×2) pixel coordinates.

    Differentiable in the points and in the camera translation.

    Raises:
        DepthError: If any z + t_z is not above MIN_DEPTH; carries the point index
    """
    points = as_tensor(points3d)
    translation = as_tensor(cam.translation)
    if points.ndim not in (2, 3) or points.shape[-1] != 3:
        raise ValueError(f"Expected N×3 or B×N×3 points, got shape {points.shape}")
    batched = points.ndim == 3
    expected = (points.shape[0], 3) if batched else (3,)
    if translation.shape != expected:
        raise ValueError(f"Camera translation has shape {translation.shape}, expected {expected}")

    rows = reshape(translation, (points.shape[0], 1, 3) if batched else (1, 3))
    in_camera = points + expand(rows, points.shape)

    depth = in_camera.data[..., 2]
    offending = np.argwhere(~(depth > MIN_DEPTH))
    if offending.size:
        first = offending[0]
        if batched:
            batch_index, index = int(first[0]), int(first[1])
            where = f"point {index} of sample {batch_index}"
        else:
            batch_index, index = None, int(first[0])
            where = f"point {index}"
        raise DepthError(
            f"Nonpositive effective depth {depth[tuple(first)]:.6g} mm at {where}",
            index=index,
            batch_index=batch_index,
        )

    xy = in_camera[..., 0:2]
    z = in_camera[..., 2:3]
    ratio = xy / expand(z, xy.shape)
    height, width = cam.image_size
    center = np.broadcast_to(np.array([width / 2.0, height / 2.0]), xy.shape)
    return ratio * float(cam.focal) + Tensor(center)
