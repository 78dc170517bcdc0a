"""
Unit tests for data module.
"""

import dataclasses
import hashlib
import struct

import numpy as np
import pytest

from hand_kd.data import (
    dataset_from_bytes,
    load_dataset,
    make_dataset,
    render_input,
    sample_gt,
    save_dataset,
)
from hand_kd.formats import FormatError
from hand_kd.hand_model import hand_mesh_for
from hand_kd.losses import AnnotationMode
from hand_kd.validation import validate_dataset


class TestRenderInput:
    """Test heatmap rendering."""

    def test_peak_at_keypoint(self):
        """Test a noiseless bump peaks at exactly 1 on its keypoint"""
        k2d = np.array([[10.0, 20.0], [3.0, 4.0]])
        image = render_input(k2d, (32, 32), sigma=2.0, noise_std=0.0)
        assert image.shape == (2, 32, 32)
        assert image[0, 20, 10] == 1.0
        assert image[1, 4, 3] == 1.0
        assert image[0].max() == 1.0

    def test_off_frame_keypoint_is_clipped(self):
        """Test a keypoint outside the frame peaks on the border"""
        image = render_input(np.array([[-5.0, 40.0]]), (16, 16), sigma=1.0, noise_std=0.0)
        assert image[0, 15, 0] == 1.0

    def test_noise_is_seeded(self):
        """Test the same generator state reproduces the noise"""
        k2d = np.array([[8.0, 8.0]])
        first = render_input(k2d, (16, 16), noise_std=0.1, rng=np.random.default_rng(3))
        second = render_input(k2d, (16, 16), noise_std=0.1, rng=np.random.default_rng(3))
        assert np.array_equal(first, second)


class TestSampleGT:
    """Test drawing labelled samples."""

    def test_labels_match_hand_model(self, synthetic_rig):
        """Test returned keypoints are the posed rig's keypoints"""
        params, camera, output, k2d = sample_gt(np.random.default_rng(0), synthetic_rig)
        _, joints = hand_mesh_for(synthetic_rig, params)
        np.testing.assert_allclose(output.joints3d.data, joints, atol=1e-12)
        assert k2d.shape == (21, 2)
        assert 400.0 <= camera.translation_array[2] <= 800.0


class TestMakeDataset:
    """Test dataset generation."""

    def test_deterministic(self, synthetic_rig, small_dataset):
        """Test the same seed gives byte-identical datasets"""
        again = make_dataset(6, seed=0, rig=synthetic_rig, frac_2d_only=1 / 3, focal=20.0, image_size=(16, 16))
        assert again.to_bytes() == small_dataset.to_bytes()
        np.testing.assert_array_equal(again.images(), small_dataset.images())

    def test_parallel_matches_serial(self, synthetic_rig, small_dataset):
        """Test worker threads do not change the samples"""
        parallel = make_dataset(
            6, seed=0, rig=synthetic_rig, frac_2d_only=1 / 3, focal=20.0, image_size=(16, 16), max_workers=3
        )
        assert parallel.checksum() == small_dataset.checksum()

    def test_first_samples_are_2d_only(self, small_dataset):
        """Test ⌈n·frac⌉ leading samples carry only 2D labels"""
        modes = [s.annotation_mode for s in small_dataset.samples]
        assert modes == [AnnotationMode.ONLY_2D] * 2 + [AnnotationMode.FULL_3D] * 4
        assert small_dataset.n_only_2d == 2

    @pytest.mark.parametrize("frac, expected", [(0.0, 0), (1.0, 3), (0.5, 2)])
    def test_fraction_extremes(self, synthetic_rig, frac, expected):
        """Test the 2D-only count for boundary fractions"""
        ds = make_dataset(3, seed=2, rig=synthetic_rig, frac_2d_only=frac, image_size=(16, 16), focal=20.0)
        assert ds.n_only_2d == expected

    def test_labels_are_consistent(self, synthetic_rig, small_dataset):
        """Test labels agree with the true parameters"""
        errors = [w for w in validate_dataset(small_dataset, synthetic_rig) if w.severity == "error"]
        assert errors == []

    def test_image_matches_labels(self, small_dataset):
        """Test each image is a heatmap around its sample's 2D keypoints"""
        sample = small_dataset[3]
        assert sample.image.shape == (21, 16, 16)
        expected = render_input(sample.gt.k2d, (16, 16), small_dataset.render.sigma, noise_std=0.0)
        assert np.abs(sample.image - expected).max() < 10 * small_dataset.render.noise_std

    def test_invalid_arguments(self, synthetic_rig):
        """Test empty datasets and fractions outside [0, 1] are refused"""
        with pytest.raises(ValueError):
            make_dataset(0, seed=0, rig=synthetic_rig)
        with pytest.raises(ValueError):
            make_dataset(2, seed=0, rig=synthetic_rig, frac_2d_only=1.5)


class TestDatasetPersistence:
    """Test the binary dataset format."""

    def test_round_trip(self, small_dataset, tmp_path):
        """Test save then load keeps every sample"""
        path = save_dataset(small_dataset, tmp_path / "train.bin")
        loaded = load_dataset(path)
        assert loaded.to_bytes() == small_dataset.to_bytes()
        assert loaded.n_only_2d == small_dataset.n_only_2d
        np.testing.assert_array_equal(loaded.images([4]), small_dataset.images([4]))

    def test_images_are_stored(self, small_dataset):
        """Test every record carries its K×H×W f64 image block"""
        payload = small_dataset.to_bytes()
        assert len(payload) > len(small_dataset) * 21 * 16 * 16 * 8
        loaded = dataset_from_bytes(payload)
        for original, restored in zip(small_dataset.samples, loaded.samples):
            assert np.array_equal(restored.image, original.image)

    def test_stored_images_survive_renderer_changes(self, small_dataset, monkeypatch):
        """Test loading reads images from the file rather than rendering them"""
        import hand_kd.data as data_module

        payload = small_dataset.to_bytes()
        monkeypatch.setattr(data_module, "render_input", lambda *args, **kwargs: pytest.fail("rendered on load"))
        loaded = dataset_from_bytes(payload)
        np.testing.assert_array_equal(loaded.images(), small_dataset.images())

    def test_checksum_matches_file_bytes(self, small_dataset):
        """Test the streamed checksum equals the digest of the written bytes"""
        assert small_dataset.checksum() == hashlib.sha256(small_dataset.to_bytes()).hexdigest()

    def test_misshapen_image_is_refused(self, small_dataset):
        """Test an image that does not match the header shape is not written"""
        broken = dataclasses.replace(small_dataset, samples=list(small_dataset.samples))
        broken.samples[1] = dataclasses.replace(broken.samples[1], image=np.zeros((21, 8, 8)))
        with pytest.raises(ValueError, match="Sample 1 image"):
            broken.to_bytes()

    def test_partial_write(self, small_dataset):
        """Test a cut-off file is reported as a partial write"""
        payload = small_dataset.to_bytes()
        with pytest.raises(FormatError, match="partial write"):
            dataset_from_bytes(payload[:-30])

    def test_version_bump(self, small_dataset):
        """Test a future format version is refused"""
        payload = small_dataset.to_bytes()
        payload = payload[:4] + struct.pack("<I", 99) + payload[8:]
        with pytest.raises(FormatError, match="version 99"):
            dataset_from_bytes(payload)

    def test_wrong_magic(self, small_dataset):
        """Test a foreign file is refused"""
        with pytest.raises(FormatError, match="not a dataset file"):
            dataset_from_bytes(b"HKDM" + small_dataset.to_bytes()[4:])

    def test_missing_file(self, tmp_path):
        """Test a missing path raises FileNotFoundError"""
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope.bin")
