"""
Unit tests for cache module.
"""

import os
import time

import numpy as np
import pytest

from hand_kd.cache import TeacherOutputCache, get_cache, reset_global_cache
from hand_kd.nets import freeze, init_model
from hand_kd.trainer import precompute_teacher_outputs


@pytest.fixture
def cache(tmp_path):
    return TeacherOutputCache(cache_dir=str(tmp_path / "cache"))


class TestTeacherOutputCache:
    """Test the on-disk cache."""

    def test_set_then_get(self, cache):
        """Test stored arrays come back unchanged"""
        arrays = {"k3d": np.arange(6.0).reshape(2, 3), "features": np.ones((2, 4, 1, 1))}
        assert cache.set("abc", arrays)
        loaded = cache.get("abc")
        assert set(loaded) == {"k3d", "features"}
        np.testing.assert_array_equal(loaded["k3d"], arrays["k3d"])

    def test_miss(self, cache):
        """Test an absent key returns None"""
        assert cache.get("missing") is None

    def test_corrupt_entry(self, cache):
        """Test an unreadable entry is treated as a miss"""
        (cache.cache_dir / "bad.npz").write_bytes(b"not an archive")
        assert cache.get("bad") is None

    def test_key_depends_on_every_input(self):
        """Test changing any input changes the key"""
        base = ("t", "d", 1, 80.0, (64, 64))
        key = TeacherOutputCache.make_key(*base)
        assert key == TeacherOutputCache.make_key(*base)
        for i, other in enumerate(("u", "e", 2, 81.0, (32, 32))):
            changed = list(base)
            changed[i] = other
            assert TeacherOutputCache.make_key(*changed) != key

    def test_clear_and_stats(self, cache):
        """Test stats count entries and clear removes them"""
        cache.set("a", {"x": np.zeros(3)})
        cache.set("b", {"x": np.zeros(3)})
        assert cache.get_stats()["total_entries"] == 2
        assert cache.clear() == 2
        assert cache.get_stats()["total_entries"] == 0

    def test_clear_older_than(self, cache):
        """Test age-limited clearing keeps recent entries"""
        cache.set("old", {"x": np.zeros(1)})
        cache.set("new", {"x": np.zeros(1)})
        past = time.time() - 3600
        os.utime(cache.cache_dir / "old.npz", (past, past))
        assert cache.clear(older_than_seconds=600) == 1
        assert cache.get("new") is not None

    def test_disabled(self, tmp_path):
        """Test a disabled cache stores nothing"""
        cache = TeacherOutputCache(cache_dir=str(tmp_path / "off"), enabled=False)
        assert not cache.set("a", {"x": np.zeros(1)})
        assert cache.get("a") is None
        assert cache.get_stats() == {"enabled": False, "total_entries": 0, "total_size_mb": 0}
        assert not (tmp_path / "off").exists()

    def test_global_instance(self, tmp_path):
        """Test the global cache is shared until reset"""
        reset_global_cache()
        try:
            first = get_cache(cache_dir=str(tmp_path / "global"))
            assert get_cache() is first
            reset_global_cache()
            assert get_cache(cache_dir=str(tmp_path / "other")) is not first
        finally:
            reset_global_cache()


class TestTeacherOutputsThroughCache:
    """Test the teacher pass with a cache."""

    def test_second_pass_reads_cache(self, cache, small_dataset, synthetic_rig, teacher_cfg, monkeypatch):
        """Test cached outputs equal computed ones and skip the teacher"""
        teacher = freeze(init_model(teacher_cfg))
        computed = precompute_teacher_outputs(teacher, small_dataset, synthetic_rig, cache)
        assert cache.get_stats()["total_entries"] == 1

        import hand_kd.trainer as trainer_module

        def fail(*args, **kwargs):
            raise AssertionError("teacher should not run on a cache hit")

        monkeypatch.setattr(trainer_module, "predict", fail)
        cached = precompute_teacher_outputs(teacher, small_dataset, synthetic_rig, cache)
        np.testing.assert_array_equal(cached.k3d, computed.k3d)
        np.testing.assert_array_equal(cached.features, computed.features)
