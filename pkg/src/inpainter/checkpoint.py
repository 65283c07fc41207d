"""Single-file checkpoint container: JSON header plus raw tensor payload.

Layout:

    4 bytes   magic b"NNCK"
    8 bytes   header length (little-endian uint64)
    N bytes   UTF-8 JSON header:
                {"version": 1,
                 "config": {...},
                 "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}]}
    payload   concatenated little-endian tensor bytes

Offsets are relative to the start of the payload. Loading verifies the magic,
the version, and that every indexed tensor's bytes are present.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import (
    CheckpointError,
    CheckpointVersionError,
    MissingTensorError,
    TruncatedPayloadError,
)

MAGIC = b"NNCK"
VERSION = 1


@dataclass
class Checkpoint:
    version: int
    config: dict
    tensors: dict[str, torch.Tensor]


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    if arr.dtype == np.float32:
        return arr.astype("<f4")
    if arr.dtype == np.float64:
        return arr.astype("<f8")
    if arr.dtype == np.int64:
        return arr.astype("<i8")
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(
    params: dict[str, torch.Tensor] | nn.Module, config: dict, path: str | Path
) -> None:
    """Write tensors and a config snapshot to a single file."""
    if isinstance(params, nn.Module):
        params = params.state_dict()
    index = []
    chunks = []
    offset = 0
    for name, tensor in params.items():
        arr = _to_numpy(tensor)
        raw = arr.tobytes()
        index.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "config": config, "tensors": index}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for raw in chunks:
            f.write(raw)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint, verifying version and payload completeness."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    header_len = int.from_bytes(blob[4:12], "little")
    if len(blob) < 12 + header_len:
        raise TruncatedPayloadError(f"{path}: header truncated")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    version = header.get("version")
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: unrecognized format version {version!r} (expected {VERSION})"
        )
    payload = blob[12 + header_len :]
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise TruncatedPayloadError(
                f"{path}: tensor {entry['name']!r} needs bytes up to {end}, "
                f"payload has {len(payload)}"
            )
        arr = np.frombuffer(
            payload, dtype=np.dtype(entry["dtype"]), count=entry["nbytes"] // np.dtype(entry["dtype"]).itemsize,
            offset=entry["offset"],
        ).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return Checkpoint(version=version, config=header["config"], tensors=tensors)


def load_into(module: nn.Module, ckpt: Checkpoint, prefix: str = "") -> None:
    """Load a checkpoint's tensors into a module; every module tensor must be
    present under the given prefix."""
    state = {}
    for name in module.state_dict():
        full = prefix + name
        if full not in ckpt.tensors:
            raise MissingTensorError(f"checkpoint is missing tensor {full!r}")
        state[name] = ckpt.tensors[full]
    module.load_state_dict(state)
