import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Dict, Iterable, Optional

import pandas as pd

from . import SCHEMA_VERSION, __version__


def hash_file(file_path: str, chunk_size: int = 8192) -> str:
    """
    Calculate the SHA256 hash of a file.

    Args:
        file_path: Path to the file
        chunk_size: Size of chunks to read at a time

    Returns:
        SHA256 hash as hex string
    """
    hash_sha256 = hashlib.sha256()
    with open(file_path, "rb") as f:
        while chunk := f.read(chunk_size):
            hash_sha256.update(chunk)
    return hash_sha256.hexdigest()


def hash_files(paths: Iterable[str]) -> str:
    """Combined digest of several files, order-sensitive."""
    combined = hashlib.sha256()
    for path in paths:
        combined.update(hash_file(path).encode("ascii"))
    return combined.hexdigest()


@dataclass
class RunManifest:
    """Provenance record for one CLI invocation and the files it wrote."""

    command: str
    config_hash: str
    data_hash: str
    seed: int
    version: str = __version__
    schema_version: str = SCHEMA_VERSION
    created_at: str = field(default_factory=lambda: datetime.now().isoformat())
    finished_at: Optional[str] = None
    outputs: Dict[str, str] = field(default_factory=dict)

    @property
    def manifest_id(self) -> str:
        """Digest of the deterministic fields; timestamps do not enter it."""
        payload = json.dumps(
            [
                self.command,
                self.config_hash,
                self.data_hash,
                self.seed,
                self.version,
                self.schema_version,
            ]
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def add_output(self, name: str, path: str):
        self.outputs[name] = path

    def to_dict(self) -> dict:
        data = asdict(self)
        data["manifest_id"] = self.manifest_id
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        data = {k: v for k, v in data.items() if k != "manifest_id"}
        return cls(**data)

    def write(self, out_dir: str) -> str:
        """Stamp the finish time and write ``manifest.json`` into ``out_dir``."""
        self.finished_at = datetime.now().isoformat()
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path


def write_csv(frame: pd.DataFrame, path: str, manifest_id: Optional[str] = None):
    """Write a table as delimited text, prefixed by a ``# manifest=`` line."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        if manifest_id:
            f.write(f"# manifest={manifest_id}\n")
        frame.to_csv(f, index=False, lineterminator="\n")


def read_csv(path: str, **kwargs) -> pd.DataFrame:
    """Read a table written by :func:`write_csv` (comment lines skipped).

    Floats are parsed with the round-trip parser so values written by
    :func:`write_csv` come back bit-identical.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    kwargs.setdefault("float_precision", "round_trip")
    return pd.read_csv(path, comment="#", **kwargs)
