"""Checkpoint file format.

Layout (all integers little-endian)::

    8 bytes   magic  b"DRCKPT01"
    8 bytes   uint64 length N of the JSON header
    N bytes   UTF-8 JSON header (sorted keys)
    ...       raw float64 little-endian tensor data, concatenated

The header holds ``config`` (model config dict), ``config_hash``, ``step``,
``rng_state`` (numpy bit-generator state, or null), ``meta`` (free-form
training metadata) and ``tensors``: a list of ``{name, group, shape,
offset, count}`` entries.  ``group`` is ``param``, ``adam_m`` or ``adam_v``;
``offset`` and ``count`` are in float64 elements from the start of the data
section.  Adapter factors are ordinary ``param`` tensors whose names end in
``.lora_A`` / ``.lora_B``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .model import ModelConfig, is_adapter

MAGIC = b"DRCKPT01"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, torch.Tensor]
    step: int = 0
    adam_m: dict[str, torch.Tensor] = field(default_factory=dict)
    adam_v: dict[str, torch.Tensor] = field(default_factory=dict)
    adam_step: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        has_adapter = any(is_adapter(k) for k in self.params)
        if has_adapter != bool(self.config.adapter_rank):
            raise CheckpointError(
                f"adapter tensors present={has_adapter} but adapter_rank={self.config.adapter_rank}"
            )


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8").tobytes()


def to_bytes(ckpt: Checkpoint) -> bytes:
    ckpt.validate()
    entries, chunks, offset = [], [], 0
    for group, tensors in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name in sorted(tensors):
            t = tensors[name]
            entries.append({"name": name, "group": group, "shape": list(t.shape), "offset": offset, "count": t.numel()})
            chunks.append(_tensor_bytes(t))
            offset += t.numel()
    header = {
        "format": 1,
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config.config_hash(),
        "step": int(ckpt.step),
        "adam_step": int(ckpt.adam_step),
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def save(path, ckpt: Checkpoint) -> str:
    """Write ``ckpt``; returns the SHA-256 of the file bytes."""
    data = to_bytes(ckpt)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def from_bytes(data: bytes, expect_config: ModelConfig | None = None) -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n].decode("utf-8"))
    cfg = ModelConfig(**header["config"])
    if cfg.config_hash() != header["config_hash"]:
        raise CheckpointError("config hash in header does not match its config")
    if expect_config is not None and expect_config.config_hash() != header["config_hash"]:
        raise CheckpointError(
            f"checkpoint config hash {header['config_hash']} != expected {expect_config.config_hash()}"
        )
    raw = np.frombuffer(data, dtype="<f8", offset=16 + n)
    groups: dict[str, dict] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for e in header["tensors"]:
        arr = raw[e["offset"] : e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
        groups[e["group"]][e["name"]] = torch.from_numpy(arr.copy())
    ckpt = Checkpoint(
        cfg, groups["param"], header["step"], groups["adam_m"], groups["adam_v"],
        header.get("adam_step", 0), header.get("rng_state"), header.get("meta", {}),
    )
    ckpt.validate()
    return ckpt


def load(path, expect_config: ModelConfig | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data, expect_config)


def file_hash(path) -> str:
    return bytes_hash(Path(path).read_bytes())


def bytes_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
