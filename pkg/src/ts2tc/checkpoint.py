"""Binary checkpoints for ParamStore contents.

Layout (all integers little-endian)::

    b"TS2TCKPT"  magic
    u32          format version
    u64          header length in bytes
    header       UTF-8 JSON: tensor table [{name, shape, dtype}], config echo, seed
    payload      float64 little-endian data of every tensor, in table order
    32 bytes     SHA-256 of everything before it
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
from .nn import ParamStore

MAGIC = b"TS2TCKPT"
VERSION = 1
_DIGEST = 32


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    seed: int | None = None
    version: int = VERSION

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()}


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    return repr(obj)


def encode_checkpoint(tensors: dict[str, torch.Tensor | np.ndarray], config: dict | None = None,
                      seed: int | None = None) -> bytes:
    table, chunks = [], []
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        table.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = json.dumps(
        {"tensors": table, "config": _to_jsonable(config or {}), "seed": seed}, sort_keys=True
    ).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes) -> Checkpoint:
    fixed = len(MAGIC) + 12
    if len(blob) < fixed + _DIGEST:
        raise CheckpointError(f"checkpoint truncated ({len(blob)} bytes)")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[len(MAGIC) : fixed])
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint integrity check failed (truncated or corrupted)")
    if fixed + hlen > len(body):
        raise CheckpointError("checkpoint header overruns the file")
    try:
        header = json.loads(body[fixed : fixed + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    offset = fixed + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(body):
            raise CheckpointError(f"payload for {entry['name']!r} is truncated")
        arr = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
        tensors[entry["name"]] = arr.astype(entry.get("dtype", "float64"))
        offset += nbytes
    if offset != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(tensors, header.get("config", {}), header.get("seed"), version)


def save_checkpoint(params: ParamStore | dict, path, config: dict | None = None, seed: int | None = None) -> Path:
    """Write params (a ParamStore or a name -> tensor dict) to ``path``."""
    state = params.state_dict() if isinstance(params, ParamStore) else params
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(encode_checkpoint(state, config, seed))
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path, params: ParamStore | None = None) -> Checkpoint:
    """Read a checkpoint; when ``params`` is given, load it in place (all or nothing)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = decode_checkpoint(blob)
    if params is not None:
        try:
            params.load_state_dict(ckpt.state_dict())
        except CheckpointError:
            raise
        except Exception as exc:
            raise CheckpointError(f"checkpoint does not match the model: {exc}") from exc
    return ckpt
