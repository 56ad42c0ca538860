import hashlib
import json
import logging
import os
import pickle
import tempfile
import threading
from datetime import datetime
from typing import Any, Dict, Optional, Tuple

from .transform import GlobalScaler, SplitResult

logger = logging.getLogger(__name__)


class WindowCacheManager:
    """
    Cache for the windowed train/validation/test partition of a panel.

    Entries are pickles with a JSON ``.meta`` sidecar. An entry is valid only
    while the cache version, the panel content hash and the transform config
    hash all match the ones it was written with.
    """

    def __init__(self, cache_dir: Optional[str] = None):
        """
        Args:
            cache_dir: Directory for cache files; defaults to
                ``<tmp>/tfrcast_cache``.
        """
        self.cache_dir = cache_dir or os.path.join(tempfile.gettempdir(), "tfrcast_cache")
        os.makedirs(self.cache_dir, exist_ok=True)
        self._cache_lock = threading.RLock()
        self.cache_version = "1.0"

    def _key(self, panel_hash: str, config_hash: str) -> str:
        return hashlib.sha256(f"{panel_hash}/{config_hash}".encode("utf-8")).hexdigest()[:32]

    def _cache_file_path(self, panel_hash: str, config_hash: str) -> str:
        return os.path.join(self.cache_dir, f"{self._key(panel_hash, config_hash)}.cache")

    def _metadata_path(self, panel_hash: str, config_hash: str) -> str:
        return self._cache_file_path(panel_hash, config_hash) + ".meta"

    def _is_cache_valid(self, panel_hash: str, config_hash: str) -> bool:
        cache_file = self._cache_file_path(panel_hash, config_hash)
        metadata_file = self._metadata_path(panel_hash, config_hash)
        if not os.path.exists(cache_file) or not os.path.exists(metadata_file):
            return False
        try:
            with open(metadata_file, "r", encoding="utf-8") as f:
                metadata = json.load(f)
        except (json.JSONDecodeError, OSError):
            return False
        return (
            metadata.get("cache_version") == self.cache_version
            and metadata.get("panel_hash") == panel_hash
            and metadata.get("config_hash") == config_hash
        )

    def save_split(
        self, panel_hash: str, config_hash: str, split: SplitResult, scaler: GlobalScaler
    ) -> bool:
        """
        Store a partition and its scaler.

        Returns:
            True if saved, False on any I/O failure (partial files removed).
        """
        with self._cache_lock:
            cache_file = self._cache_file_path(panel_hash, config_hash)
            metadata_file = self._metadata_path(panel_hash, config_hash)
            try:
                with open(cache_file, "wb") as f:
                    pickle.dump(
                        {"split": split, "scaler": scaler.to_dict()},
                        f,
                        protocol=pickle.HIGHEST_PROTOCOL,
                    )
                metadata = {
                    "cache_version": self.cache_version,
                    "cached_at": datetime.now().isoformat(),
                    "panel_hash": panel_hash,
                    "config_hash": config_hash,
                    "n_train": len(split.train),
                    "n_validation": len(split.validation),
                    "n_test": len(split.test) if split.test is not None else 0,
                }
                with open(metadata_file, "w", encoding="utf-8") as f:
                    json.dump(metadata, f, indent=2)
                return True
            except (OSError, pickle.PicklingError) as e:
                logger.warning("Could not write window cache: %s", e)
                self._remove(panel_hash, config_hash)
                return False

    def load_split(
        self, panel_hash: str, config_hash: str
    ) -> Optional[Tuple[SplitResult, GlobalScaler]]:
        """The cached partition and scaler, or None when absent or stale."""
        with self._cache_lock:
            if not self._is_cache_valid(panel_hash, config_hash):
                return None
            try:
                with open(self._cache_file_path(panel_hash, config_hash), "rb") as f:
                    data = pickle.load(f)
                split = data["split"]
                if not isinstance(split, SplitResult):
                    raise TypeError("cache entry is not a SplitResult")
                logger.debug("Window cache hit %s", self._key(panel_hash, config_hash))
                return split, GlobalScaler.from_dict(data["scaler"])
            except Exception as e:
                logger.warning("Discarding unreadable window cache: %s", e)
                self._remove(panel_hash, config_hash)
                return None

    def _remove(self, panel_hash: str, config_hash: str):
        for path in (
            self._cache_file_path(panel_hash, config_hash),
            self._metadata_path(panel_hash, config_hash),
        ):
            try:
                if os.path.exists(path):
                    os.remove(path)
            except OSError:
                pass

    def invalidate_cache(self, panel_hash: str, config_hash: str):
        with self._cache_lock:
            self._remove(panel_hash, config_hash)

    def get_cache_info(self, panel_hash: str, config_hash: str) -> Optional[Dict[str, Any]]:
        metadata_file = self._metadata_path(panel_hash, config_hash)
        if not os.path.exists(metadata_file):
            return None
        try:
            with open(metadata_file, "r", encoding="utf-8") as f:
                metadata = json.load(f)
        except (json.JSONDecodeError, OSError):
            return None
        metadata["is_valid"] = self._is_cache_valid(panel_hash, config_hash)
        return metadata
