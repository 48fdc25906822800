"""Checkpoint and adapter directories.

A directory holds ``config.json`` (format version, kind, encoder / LoRA /
training configs), ``tensors.bin`` (little-endian float32 blobs back to back)
and ``tensors.json`` (ordered index of name, shape, byte offset, byte length).
Directories are written to a scratch location and renamed into place.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptBlob, CorruptIndex, ShapeMismatch, VersionMismatch
from .fsutil import atomic_directory
from .lora import (
    AdapterState,
    LoraConfig,
    adapter_state,
    build,
    is_adapted,
    load_named_tensors,
    restore_adapter,
)
from .model import EncoderConfig, EncoderModel

FORMAT_VERSION = 1
CONFIG_NAME = "config.json"
BLOB_NAME = "tensors.bin"
INDEX_NAME = "tensors.json"


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_tensor_dir(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    index = {"format_version": FORMAT_VERSION, "dtype": "float32", "byte_order": "little", "tensors": entries}
    with atomic_directory(path) as tmp:
        (tmp / BLOB_NAME).write_bytes(b"".join(blobs))
        (tmp / INDEX_NAME).write_text(_dump_json(index), encoding="utf-8")
        (tmp / CONFIG_NAME).write_text(_dump_json(config), encoding="utf-8")


def read_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        config = json.loads((path / CONFIG_NAME).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CorruptIndex(f"{path}: missing {CONFIG_NAME}") from None
    except json.JSONDecodeError as exc:
        raise CorruptIndex(f"{path / CONFIG_NAME}: {exc}") from exc
    version = config.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format_version {version!r}, this build reads {FORMAT_VERSION}")
    return config


def read_tensor_dir(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    config = read_config(path)
    try:
        index = json.loads((path / INDEX_NAME).read_text(encoding="utf-8"))
        entries = index["tensors"]
        if index.get("format_version") != FORMAT_VERSION:
            raise VersionMismatch(f"{path / INDEX_NAME}: format_version {index.get('format_version')!r}")
        if index.get("dtype") != "float32" or index.get("byte_order") != "little":
            raise CorruptIndex(f"{path / INDEX_NAME}: only little-endian float32 is supported")
    except FileNotFoundError:
        raise CorruptIndex(f"{path}: missing {INDEX_NAME}") from None
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise CorruptIndex(f"{path / INDEX_NAME}: {exc}") from exc
    try:
        blob = (path / BLOB_NAME).read_bytes()
    except FileNotFoundError:
        raise CorruptBlob(f"{path}: missing {BLOB_NAME}") from None

    tensors: dict[str, np.ndarray] = {}
    expected = 0
    for i, e in enumerate(entries):
        try:
            name, shape, offset, nbytes = e["name"], tuple(int(s) for s in e["shape"]), int(e["offset"]), int(e["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptIndex(f"{path / INDEX_NAME}: entry {i} malformed ({exc})") from exc
        if offset != expected or nbytes != 4 * int(np.prod(shape, dtype=np.int64)) or name in tensors:
            raise CorruptIndex(f"{path / INDEX_NAME}: entry {i} ({name}) has inconsistent offset/size")
        if offset + nbytes > len(blob):
            raise CorruptBlob(f"{path / BLOB_NAME}: {len(blob)} bytes, index needs {offset + nbytes}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)
        expected = offset + nbytes
    if expected != len(blob):
        raise CorruptBlob(f"{path / BLOB_NAME}: {len(blob)} bytes, index accounts for {expected}")
    return config, tensors


def model_tensors(model: EncoderModel) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}


@dataclass
class LoadedCheckpoint:
    model: EncoderModel
    encoder_config: EncoderConfig
    lora_config: LoraConfig | None
    train_config: dict | None
    metadata: dict


def save_checkpoint(model: EncoderModel, path: str | Path, train_config=None, metadata: dict | None = None) -> None:
    """Write every parameter plus the configs needed to rebuild the model.

    ``metadata`` is stored verbatim (e.g. the feature config the model expects).
    """
    lora_cfg = getattr(model, "lora_config", None) if is_adapted(model) else None
    config = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "encoder": model.config.to_dict(),
        "lora": lora_cfg.to_dict() if lora_cfg else None,
        "train": train_config.to_dict() if hasattr(train_config, "to_dict") else train_config,
        "metadata": metadata or {},
    }
    write_tensor_dir(path, config, model_tensors(model))


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    config, tensors = read_tensor_dir(path)
    if config.get("kind") != "checkpoint":
        raise CorruptIndex(f"{path}: kind {config.get('kind')!r} is not a full checkpoint")
    enc = EncoderConfig.from_dict(config["encoder"])
    lora_cfg = LoraConfig.from_dict(config["lora"]) if config.get("lora") else None
    model = build(enc, lora_cfg)
    load_named_tensors(model, tensors)
    return LoadedCheckpoint(model, enc, lora_cfg, config.get("train"), config.get("metadata") or {})


def save_adapter(adapted: EncoderModel, path: str | Path) -> None:
    state = adapter_state(adapted)
    config = {
        "format_version": FORMAT_VERSION,
        "kind": "adapter",
        "adapter_only": True,
        "encoder": state.encoder_config.to_dict(),
        "lora": state.lora_config.to_dict(),
        "train": None,
    }
    write_tensor_dir(path, config, state.tensors)


def load_adapter(path: str | Path) -> AdapterState:
    config, tensors = read_tensor_dir(path)
    if not config.get("adapter_only"):
        raise CorruptIndex(f"{path}: not an adapter directory")
    return AdapterState(EncoderConfig.from_dict(config["encoder"]), LoraConfig.from_dict(config["lora"]), tensors)


def restore_adapter_from(base: EncoderModel, path: str | Path) -> EncoderModel:
    state = load_adapter(path)
    for name, arr in state.tensors.items():
        if name.startswith("head.") and arr.shape[0] != base.config.n_classes:
            raise ShapeMismatch(f"{name}: adapter head has {arr.shape[0]} classes, base has {base.config.n_classes}")
    return restore_adapter(base, state)
