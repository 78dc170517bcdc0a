"""
Caching module for frozen-teacher outputs.

A frozen teacher's predictions and feature maps on a dataset never change, so they are
computed once and stored on disk. Distillation runs and sweep cells then read them back
instead of re-running the teacher. Entries are content-addressed: the key covers the
teacher parameters, the dataset bytes, the rig and the camera settings.
"""

import hashlib
import json
import logging
import os
import threading
import time
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class TeacherOutputCache:
    """
    File-based cache of teacher outputs, one `.npz` per (teacher, dataset) pair.

    Writes go through a temporary file and an atomic rename, so concurrent readers
    never observe a partial entry.
    """

    def __init__(self, cache_dir: Optional[str] = None, enabled: bool = True):
        """
        Initialize the cache.

        Args:
            cache_dir: Directory for cache files (default: ~/.hand_kd_cache)
            enabled: Whether caching is enabled (default: True)
        """
        self.enabled = enabled

        if not self.enabled:
            logger.info("Teacher output caching is disabled")
            return

        if cache_dir is None:
            cache_dir = os.path.join(os.path.expanduser("~"), ".hand_kd_cache")

        self.cache_dir = Path(cache_dir)

        try:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            logger.info(f"Teacher output cache initialized: {self.cache_dir}")
        except Exception as e:
            logger.error(f"Failed to create cache directory: {e}")
            self.enabled = False

    @staticmethod
    def make_key(
        teacher_checksum: str,
        dataset_checksum: str,
        rig_fingerprint: int,
        focal: float,
        image_size: Tuple[int, int],
    ) -> str:
        cache_data = {
            "teacher": teacher_checksum,
            "dataset": dataset_checksum,
            "rig": rig_fingerprint,
            "focal": focal,
            "image_size": list(image_size),
        }
        data_str = json.dumps(cache_data, sort_keys=True)
        return hashlib.md5(data_str.encode()).hexdigest()

    def _get_cache_file_path(self, cache_key: str) -> Path:
        return self.cache_dir / f"{cache_key}.npz"

    def get(self, cache_key: str) -> Optional[Dict[str, np.ndarray]]:
        """
        Return the cached arrays, or None when absent or unreadable.
        """
        if not self.enabled:
            return None

        cache_file = self._get_cache_file_path(cache_key)
        if not cache_file.exists():
            logger.debug(f"Cache miss for {cache_key}")
            return None

        try:
            with np.load(cache_file, allow_pickle=False) as entry:
                arrays = {name: entry[name] for name in entry.files}
            logger.info(f"Cache hit for teacher outputs {cache_key[:8]}: {len(arrays)} arrays")
            return arrays
        except Exception as e:
            logger.error(f"Error reading cache entry {cache_key}: {e}", exc_info=True)
            return None

    def set(self, cache_key: str, arrays: Dict[str, np.ndarray]) -> bool:
        """
        Store arrays under `cache_key`.

        Returns:
            True if successfully cached, False otherwise
        """
        if not self.enabled:
            return False

        try:
            cache_file = self._get_cache_file_path(cache_key)
            temp_file = cache_file.with_suffix(f".{os.getpid()}.{threading.get_ident()}.tmp")
            with open(temp_file, "wb") as f:
                np.savez(f, **arrays)
            temp_file.replace(cache_file)
            logger.debug(f"Cached teacher outputs {cache_key[:8]}: {len(arrays)} arrays")
            return True
        except Exception as e:
            logger.error(f"Error writing cache entry {cache_key}: {e}", exc_info=True)
            return False

    def clear(self, older_than_seconds: Optional[int] = None) -> int:
        """
        Clear cache entries.

        Args:
            older_than_seconds: Only clear entries older than this (None = clear all)

        Returns:
            Number of entries cleared
        """
        if not self.enabled:
            return 0

        cleared = 0
        current_time = time.time()
        for cache_file in self.cache_dir.glob("*.npz"):
            try:
                if older_than_seconds is not None:
                    if current_time - cache_file.stat().st_mtime < older_than_seconds:
                        continue
                cache_file.unlink()
                cleared += 1
            except Exception as e:
                logger.warning(f"Error deleting cache file {cache_file}: {e}")

        logger.info(f"Cleared {cleared} cache entries")
        return cleared

    def get_stats(self) -> Dict[str, Any]:
        if not self.enabled:
            return {
                "enabled": False,
                "total_entries": 0,
                "total_size_mb": 0,
            }

        cache_files = list(self.cache_dir.glob("*.npz"))
        total_size = sum(f.stat().st_size for f in cache_files)
        return {
            "enabled": True,
            "cache_dir": str(self.cache_dir),
            "total_entries": len(cache_files),
            "total_size_mb": round(total_size / (1024 * 1024), 2),
        }


# Global cache instance (singleton pattern)
_global_cache: Optional[TeacherOutputCache] = None


def get_cache(cache_dir: Optional[str] = None, enabled: bool = True) -> TeacherOutputCache:
    """
    Get or create the global cache instance.

    Args:
        cache_dir: Directory for cache files
        enabled: Whether caching is enabled

    Returns:
        TeacherOutputCache instance
    """
    global _global_cache

    if _global_cache is None:
        _global_cache = TeacherOutputCache(cache_dir=cache_dir, enabled=enabled)

    return _global_cache


def reset_global_cache() -> None:
    """Forget the global instance so the next `get_cache` call builds a fresh one."""
    global _global_cache
    _global_cache = None
