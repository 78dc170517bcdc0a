"""
Shared fixtures: random rigs of any size, the synthetic rig, and small datasets and
networks sized for fast tests.
"""

import numpy as np
import pytest

from hand_kd.hand_model import MANO_PARENTS, HandRig, make_synthetic_rig
from hand_kd.data import make_dataset
from hand_kd.nets import NetConfig


def _convex_rows(rng, rows, cols):
    weights = rng.uniform(0.1, 1.0, (rows, cols))
    return weights / weights.sum(axis=1, keepdims=True)


def random_rig(
    seed=0,
    n_vertices=10,
    parents=MANO_PARENTS,
    n_betas=10,
    n_keypoints=21,
    scale=50.0,
):
    """Rig with random template, blendshapes and convex regressors/skinning."""
    rng = np.random.default_rng(seed)
    n_joints = len(parents)
    return HandRig(
        template_vertices=rng.uniform(-scale, scale, (n_vertices, 3)),
        shape_blendshapes=rng.normal(0.0, scale / 10.0, (n_betas, n_vertices, 3)),
        joint_regressor=_convex_rows(rng, n_joints, n_vertices),
        parents=np.asarray(parents),
        skinning_weights=_convex_rows(rng, n_vertices, n_joints),
        keypoint_regressor=_convex_rows(rng, n_keypoints, n_vertices),
    )


@pytest.fixture(scope="session")
def rig_factory():
    return random_rig


@pytest.fixture(scope="session")
def tiny_rig():
    """10 vertices, 16 joints, 10 shape coefficients and 21 keypoints."""
    return random_rig(seed=0, n_vertices=10)


@pytest.fixture(scope="session")
def synthetic_rig():
    return make_synthetic_rig(seed=0)


@pytest.fixture(scope="session")
def small_dataset(synthetic_rig):
    """Six 16×16 samples, the first two annotated in 2D only."""
    return make_dataset(6, seed=0, rig=synthetic_rig, frac_2d_only=1 / 3, focal=20.0, image_size=(16, 16))


@pytest.fixture(scope="session")
def small_eval_dataset(synthetic_rig):
    return make_dataset(4, seed=1, rig=synthetic_rig, frac_2d_only=0.0, focal=20.0, image_size=(16, 16))


@pytest.fixture
def student_cfg():
    return NetConfig(channel_widths=(4, 8), head_dim=8, input_size=(16, 16), seed=0)


@pytest.fixture
def teacher_cfg():
    return NetConfig(channel_widths=(8, 16), head_dim=16, input_size=(16, 16), seed=0)
