"""Binary checkpoints.

Layout (little-endian)::

    magic          8 bytes  b"MLMLAB01"
    config_len     u64, then config_len bytes of UTF-8 run-config text
    n_params       u32, then n_params tensor records
    adam_steps     u64
    n_adam         u32, then n_adam tensor records (names "m.<param>", "v.<param>")
    step           u64

A tensor record is: name_len u32, name bytes, rank u32, dims u64[rank],
values f32[prod(dims)].
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .model import ModelParams
from .optim import AdamState

MAGIC = b"MLMLAB01"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    params: dict
    adam_steps: int
    adam: dict
    step: int


def _write_tensor(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError("checkpoint truncated")
    return raw


def _read_tensor(fh: BinaryIO) -> tuple:
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    values = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").astype(np.float32)
    return name, values.reshape(dims)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    text = ckpt.config_text.encode("utf-8")
    fh.write(struct.pack("<Q", len(text)))
    fh.write(text)
    fh.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        _write_tensor(fh, name, arr)
    fh.write(struct.pack("<Q", ckpt.adam_steps))
    fh.write(struct.pack("<I", len(ckpt.adam)))
    for name, arr in ckpt.adam.items():
        _write_tensor(fh, name, arr)
    fh.write(struct.pack("<Q", ckpt.step))
    return fh.getvalue()


def decode_checkpoint(raw: bytes) -> Checkpoint:
    fh = io.BytesIO(raw)
    if _read_exact(fh, 8) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", _read_exact(fh, 8))
    text = _read_exact(fh, n).decode("utf-8")
    (n_params,) = struct.unpack("<I", _read_exact(fh, 4))
    params = dict(_read_tensor(fh) for _ in range(n_params))
    (adam_steps,) = struct.unpack("<Q", _read_exact(fh, 8))
    (n_adam,) = struct.unpack("<I", _read_exact(fh, 4))
    adam = dict(_read_tensor(fh) for _ in range(n_adam))
    (step,) = struct.unpack("<Q", _read_exact(fh, 8))
    if fh.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(text, params, adam_steps, adam, step)


def pack(config_text: str, params: ModelParams, adam: AdamState, step: int) -> Checkpoint:
    tensors = {name: t.data for name, t in params.tensors.items()}
    moments = {}
    if adam is not None:
        for name in adam.m:
            moments["m." + name] = adam.m[name]
            moments["v." + name] = adam.v[name]
    return Checkpoint(config_text, tensors, adam.step_count if adam else 0, moments, step)


def save_checkpoint(path: Union[str, os.PathLike], config_text: str, params: ModelParams,
                    adam: AdamState, step: int) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(pack(config_text, params, adam, step)))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Union[str, os.PathLike]) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    try:
        return decode_checkpoint(raw)
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {e}") from None


def restore_params(ckpt: Checkpoint, template: ModelParams, dtype) -> ModelParams:
    """Copy checkpoint values into a freshly built ``template`` (same names/shapes)."""
    if set(ckpt.params) != set(template.tensors):
        missing = set(template.tensors) ^ set(ckpt.params)
        raise CheckpointError(f"parameter names differ from the model: {sorted(missing)[:5]}")
    for name, t in template.tensors.items():
        arr = ckpt.params[name]
        if arr.shape != t.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
        t.data = arr.astype(dtype)
    return template


def restore_adam(ckpt: Checkpoint, state: AdamState, dtype) -> AdamState:
    for name in list(state.m):
        state.m[name] = ckpt.adam["m." + name].astype(dtype)
        state.v[name] = ckpt.adam["v." + name].astype(dtype)
    state.step_count = ckpt.adam_steps
    return state

