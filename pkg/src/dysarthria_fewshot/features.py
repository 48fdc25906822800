"""On-disk feature store: one MELF file per utterance plus a JSON index.

MELF layout (all little-endian)::

    b"MELF" | u32 version=1 | u32 n_mels | u32 n_frames | float32[n_mels * n_frames] row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .dsp import MelSpectrogram
from .errors import FeatureFormatError, MissingFeatures
from .fsutil import atomic_write_bytes

MAGIC = b"MELF"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
INDEX_NAME = "index.json"


def encode_melf(values: np.ndarray) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError("MELF stores 2-D matrices only")
    n_mels, n_frames = values.shape
    return _HEADER.pack(MAGIC, VERSION, n_mels, n_frames) + values.tobytes(order="C")


def decode_melf(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(payload) < _HEADER.size:
        raise FeatureFormatError(f"{source}: too short for a MELF header")
    magic, version, n_mels, n_frames = _HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise FeatureFormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FeatureFormatError(f"{source}: unsupported MELF version {version}")
    expected = _HEADER.size + 4 * n_mels * n_frames
    if len(payload) != expected:
        raise FeatureFormatError(f"{source}: expected {expected} bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4", offset=_HEADER.size).reshape(n_mels, n_frames).astype(np.float32)


def write_melf(path: str | Path, values: np.ndarray) -> None:
    atomic_write_bytes(Path(path), encode_melf(values))


def read_melf(path: str | Path) -> np.ndarray:
    path = Path(path)
    return decode_melf(path.read_bytes(), str(path))


class FeatureStore:
    """Directory of MELF files with an ``index.json`` mapping utterance id -> relative path."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._index: dict[str, str] = {}
        index_path = self.root / INDEX_NAME
        if index_path.exists():
            self._index = json.loads(index_path.read_text(encoding="utf-8"))

    def __contains__(self, utterance_id: str) -> bool:
        return self.has(utterance_id)

    def __len__(self) -> int:
        return len(self._index)

    def ids(self) -> list[str]:
        return sorted(self._index)

    def path_for(self, utterance_id: str) -> Path:
        rel = self._index.get(utterance_id)
        if rel is None:
            speaker = utterance_id.split("_", 1)[0]
            rel = f"{speaker}/{utterance_id}.melf"
        return self.root / rel

    def has(self, utterance_id: str) -> bool:
        return self.path_for(utterance_id).exists()

    def put(self, utterance_id: str, mel: MelSpectrogram | np.ndarray) -> Path:
        values = mel.values if isinstance(mel, MelSpectrogram) else mel
        path = self.path_for(utterance_id)
        write_melf(path, values)
        self._index[utterance_id] = path.relative_to(self.root).as_posix()
        return path

    def register(self, utterance_id: str) -> None:
        """Record an existing file in the index without rewriting it."""
        path = self.path_for(utterance_id)
        if not path.exists():
            raise MissingFeatures(f"no feature file for utterance {utterance_id!r} at {path}")
        self._index[utterance_id] = path.relative_to(self.root).as_posix()

    def get(self, utterance_id: str) -> np.ndarray:
        path = self.path_for(utterance_id)
        if not path.exists():
            raise MissingFeatures(f"no feature file for utterance {utterance_id!r} at {path}")
        return read_melf(path)

    def flush(self) -> None:
        payload = json.dumps(self._index, sort_keys=True, indent=1) + "\n"
        atomic_write_bytes(self.root / INDEX_NAME, payload.encode("utf-8"))
