"""
Unit tests for camera module.
"""

import numpy as np
import pytest

from hand_kd.autodiff import Tensor, backward, finite_diff_check, tensor_sum
from hand_kd.camera import CameraParams, DepthError, project


class TestProject:
    """Test pinhole projection."""

    def test_point_on_x_axis(self):
        """Test (10, 0, 0) at 500 mm with focal 500 lands at (42, 32)"""
        cam = CameraParams(np.array([0.0, 0.0, 500.0]), focal=500.0, image_size=(64, 64))
        out = project(np.array([[10.0, 0.0, 0.0]]), cam)
        np.testing.assert_allclose(out.data, [[42.0, 32.0]])

    def test_principal_point_is_image_center(self):
        """Test the optical axis hits the center of a non-square image"""
        cam = CameraParams(np.array([0.0, 0.0, 300.0]), focal=80.0, image_size=(48, 64))
        np.testing.assert_allclose(project(np.zeros((1, 3)), cam).data, [[32.0, 24.0]])

    def test_batched_projection(self):
        """Test per-sample translations in a B×N×3 batch"""
        points = np.zeros((2, 1, 3))
        cam = CameraParams(np.array([[0.0, 0.0, 100.0], [5.0, -5.0, 100.0]]), focal=100.0)
        out = project(points, cam).data
        np.testing.assert_allclose(out[0, 0], [32.0, 32.0])
        np.testing.assert_allclose(out[1, 0], [37.0, 27.0])

    def test_translation_shape_checked(self):
        """Test a batch translation cannot drive a single point set"""
        cam = CameraParams(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            project(np.zeros((4, 3)), cam)

    def test_point_behind_camera_raises(self):
        """Test DepthError names the offending point"""
        points = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -600.0]])
        with pytest.raises(DepthError) as info:
            project(points, CameraParams(np.array([0.0, 0.0, 500.0])))
        assert info.value.index == 1
        assert info.value.batch_index is None

    def test_batched_depth_error_names_sample(self):
        """Test DepthError carries the batch index for batched input"""
        points = np.zeros((3, 2, 3))
        t = np.array([[0.0, 0.0, 10.0], [0.0, 0.0, 10.0], [0.0, 0.0, 0.0]])
        with pytest.raises(DepthError) as info:
            project(points, CameraParams(t))
        assert info.value.batch_index == 2
        assert info.value.index == 0

    def test_invalid_camera_rejected(self):
        """Test nonpositive focal length is refused"""
        with pytest.raises(ValueError):
            CameraParams(np.zeros(3), focal=0.0)

    def test_gradients(self):
        """Test gradients in points and translation"""
        rng = np.random.default_rng(0)
        points = rng.normal(size=(5, 3)) * 30.0
        t = Tensor(np.array([3.0, -2.0, 400.0]))
        report = finite_diff_check(
            lambda p: tensor_sum(project(p, CameraParams(t, focal=500.0)) * 0.1),
            Tensor(points),
        )
        assert report.passed, str(report)

        p = Tensor(points)
        t.requires_grad = True
        backward(tensor_sum(project(p, CameraParams(t, focal=500.0))))
        assert t.grad is not None and np.all(np.isfinite(t.grad))
