"""
Unit tests for hand_model module.
"""

import struct

import numpy as np
import pytest

from hand_kd.autodiff import Tensor, finite_diff_check, rodrigues, tensor_sum
from hand_kd.formats import FormatError
from hand_kd.hand_model import (
    N_KEYPOINTS,
    HandParams,
    forward,
    hand_mesh_for,
    load_rig,
    make_synthetic_rig,
    rig_fingerprint,
    rig_from_bytes,
    rig_to_bytes,
    save_rig,
)


def _axis_angle_matrix(v):
    angle = np.linalg.norm(v)
    if angle == 0.0:
        return np.eye(3)
    k = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]) / angle
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _skin_by_hand(rig, theta, beta):
    """Vertex-by-vertex linear blend skinning with 4×4 homogeneous transforms."""
    shaped = rig.template_vertices + np.tensordot(beta, rig.shape_blendshapes, axes=1)
    joints = rig.joint_regressor @ shaped
    world = []
    for j, parent in enumerate(rig.parents):
        local = np.eye(4)
        local[:3, :3] = _axis_angle_matrix(theta[3 * j:3 * j + 3])
        local[:3, 3] = joints[j] - (joints[parent] if parent >= 0 else 0.0)
        world.append(local if parent < 0 else world[parent] @ local)
    relative = []
    for j, transform in enumerate(world):
        unposed = np.eye(4)
        unposed[:3, 3] = -joints[j]
        relative.append(transform @ unposed)

    vertices = np.zeros_like(shaped)
    for i, v in enumerate(shaped):
        blended = sum(rig.skinning_weights[i, j] * relative[j] for j in range(rig.n_joints))
        vertices[i] = (blended @ np.append(v, 1.0))[:3]
    return vertices, rig.keypoint_regressor @ vertices


class TestForward:
    """Test posing the rig."""

    def test_rest_pose_returns_template(self, tiny_rig):
        """Test zero pose and shape leave the template in place"""
        vertices, joints = hand_mesh_for(tiny_rig, HandParams.zeros())
        np.testing.assert_allclose(vertices, tiny_rig.template_vertices, atol=1e-10)
        np.testing.assert_allclose(joints, tiny_rig.keypoint_regressor @ tiny_rig.template_vertices, atol=1e-10)

    def test_root_rotation_is_rigid(self, tiny_rig):
        """Test a root-only pose rotates the rest mesh about the root joint"""
        g = np.array([0.3, -0.5, 0.2])
        theta = np.zeros(48)
        theta[:3] = g
        vertices, _ = hand_mesh_for(tiny_rig, HandParams(theta, np.zeros(10)))
        root = tiny_rig.rest_joints()[0]
        expected = (tiny_rig.template_vertices - root) @ rodrigues(Tensor(g)).data.T + root
        np.testing.assert_allclose(vertices, expected, atol=1e-10)

    def test_shape_is_linear_at_rest(self, tiny_rig):
        """Test β = e_1 adds the first blendshape"""
        beta = np.zeros(10)
        beta[0] = 1.0
        vertices, _ = hand_mesh_for(tiny_rig, HandParams(np.zeros(48), beta))
        np.testing.assert_allclose(vertices, tiny_rig.template_vertices + tiny_rig.shape_blendshapes[0], atol=1e-10)

    def test_matches_vertex_by_vertex_skinning(self, rig_factory):
        """Test a 5-vertex, 3-joint rig against explicit homogeneous skinning"""
        rig = rig_factory(seed=3, n_vertices=5, parents=[-1, 0, 1], n_betas=2, n_keypoints=4, scale=1.0)
        rng = np.random.default_rng(0)
        for _ in range(100):
            theta = rng.normal(0.0, 1.0, 9)
            beta = rng.normal(0.0, 1.0, 2)
            vertices, joints = hand_mesh_for(rig, HandParams(theta, beta))
            expected_v, expected_k = _skin_by_hand(rig, theta, beta)
            np.testing.assert_allclose(vertices, expected_v, atol=1e-12)
            np.testing.assert_allclose(joints, expected_k, atol=1e-12)

    def test_batched_matches_single(self, tiny_rig):
        """Test a batch poses each row independently"""
        rng = np.random.default_rng(1)
        theta, beta = rng.normal(0.0, 0.3, (3, 48)), rng.normal(0.0, 1.0, (3, 10))
        vertices, joints = hand_mesh_for(tiny_rig, HandParams(theta, beta))
        assert vertices.shape == (3, 10, 3)
        assert joints.shape == (3, N_KEYPOINTS, 3)
        for b in range(3):
            single_v, single_k = hand_mesh_for(tiny_rig, HandParams(theta[b], beta[b]))
            np.testing.assert_allclose(vertices[b], single_v, atol=1e-12)
            np.testing.assert_allclose(joints[b], single_k, atol=1e-12)

    def test_deterministic(self, tiny_rig):
        """Test identical inputs give bit-identical outputs"""
        params = HandParams(np.full(48, 0.1), np.full(10, 0.2))
        first = hand_mesh_for(tiny_rig, params)
        second = hand_mesh_for(tiny_rig, params)
        assert np.array_equal(first[0], second[0])
        assert np.array_equal(first[1], second[1])

    def test_wrong_pose_size_rejected(self, tiny_rig):
        """Test a 45-value pose is refused"""
        with pytest.raises(ValueError):
            forward(tiny_rig, HandParams(np.zeros(45), np.zeros(10)))

    def test_non_finite_rejected(self, tiny_rig):
        """Test NaN parameters are refused"""
        theta = np.zeros(48)
        theta[4] = np.nan
        with pytest.raises(ValueError):
            forward(tiny_rig, HandParams(theta, np.zeros(10)))

    def test_gradients(self, tiny_rig):
        """Test keypoint gradients in pose and shape"""
        rng = np.random.default_rng(2)
        weights = Tensor(rng.normal(size=(N_KEYPOINTS, 3)))
        beta = Tensor(rng.normal(0.0, 0.5, 10))
        theta = Tensor(rng.normal(0.0, 0.4, 48))

        pose_report = finite_diff_check(
            lambda t: tensor_sum(forward(tiny_rig, HandParams(t, beta)).joints3d * weights), theta
        )
        assert pose_report.passed, str(pose_report)
        shape_report = finite_diff_check(
            lambda b: tensor_sum(forward(tiny_rig, HandParams(theta.detach(), b)).joints3d * weights), beta
        )
        assert shape_report.passed, str(shape_report)


class TestHandParams:
    """Test parameter packing."""

    def test_vector_round_trip(self):
        """Test θ‖β splits back into its parts"""
        vector = np.arange(58.0)
        params = HandParams.from_vector(vector)
        assert params.theta.shape == (48,)
        assert params.beta.shape == (10,)
        np.testing.assert_array_equal(params.as_vector(), vector)


class TestSyntheticRig:
    """Test the procedural rig."""

    def test_dimensions(self, synthetic_rig):
        """Test default synthetic rig sizes"""
        assert synthetic_rig.n_vertices == 97
        assert synthetic_rig.n_joints == 16
        assert synthetic_rig.n_betas == 10
        assert synthetic_rig.n_keypoints == 21

    def test_convex_weights(self, synthetic_rig):
        """Test every weight row is nonnegative and sums to one"""
        for weights in (synthetic_rig.skinning_weights, synthetic_rig.joint_regressor, synthetic_rig.keypoint_regressor):
            assert np.all(weights >= 0)
            np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)

    def test_deterministic(self):
        """Test the same seed builds the same rig"""
        assert make_synthetic_rig(seed=4, n_vertices=40) == make_synthetic_rig(seed=4, n_vertices=40)
        assert rig_fingerprint(make_synthetic_rig(seed=4, n_vertices=40)) != rig_fingerprint(
            make_synthetic_rig(seed=5, n_vertices=40)
        )

    def test_too_few_vertices_rejected(self):
        """Test fewer vertices than joints is refused"""
        with pytest.raises(ValueError):
            make_synthetic_rig(n_vertices=15)

    def test_arrays_are_read_only(self, synthetic_rig):
        """Test rig arrays cannot be modified in place"""
        with pytest.raises(ValueError):
            synthetic_rig.template_vertices[0, 0] = 1.0


class TestRigPersistence:
    """Test the binary rig format."""

    def test_save_load(self, synthetic_rig, tmp_path):
        """Test a rig survives save and load unchanged"""
        path = save_rig(synthetic_rig, tmp_path / "rig.bin")
        assert load_rig(path) == synthetic_rig

    def test_truncated_file_rejected(self, synthetic_rig):
        """Test truncation is reported with the section being read"""
        payload = rig_to_bytes(synthetic_rig)
        with pytest.raises(FormatError, match="truncated"):
            rig_from_bytes(payload[: len(payload) - 100])

    def test_bad_magic_rejected(self, synthetic_rig):
        """Test a foreign file is refused"""
        payload = b"XXXX" + rig_to_bytes(synthetic_rig)[4:]
        with pytest.raises(FormatError, match="not a rig file"):
            rig_from_bytes(payload)

    def test_unknown_version_rejected(self, synthetic_rig):
        """Test a newer format version is refused"""
        payload = rig_to_bytes(synthetic_rig)
        payload = payload[:4] + struct.pack("<I", 2) + payload[8:]
        with pytest.raises(FormatError, match="version 2"):
            rig_from_bytes(payload)

    def test_trailing_bytes_rejected(self, synthetic_rig):
        """Test extra bytes after the last section are refused"""
        with pytest.raises(FormatError, match="trailing"):
            rig_from_bytes(rig_to_bytes(synthetic_rig) + b"\x00")

    def test_missing_file(self, tmp_path):
        """Test a missing path raises FileNotFoundError"""
        with pytest.raises(FileNotFoundError):
            load_rig(tmp_path / "absent.bin")
