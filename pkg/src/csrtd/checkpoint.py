"""Versioned binary checkpoints.

Layout (all integers unsigned 64-bit little-endian)::

    b"CSRTD1"
    header_len, header bytes      UTF-8 key=value lines (format, model config, epoch, ...)
    n_params, then per record:    name_len, name, rank, dims..., float32 LE row-major data
    n_moments, same record format (optimizer state, names "m.<param>" / "v.<param>")
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict

import numpy as np

from .config import ModelConfig

MAGIC = b"CSRTD1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    moments: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    best_val_loss: float = float("inf")
    step: int = 0


def _u64(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<Q", value))


def _read_u64(f: BinaryIO) -> int:
    raw = f.read(8)
    if len(raw) != 8:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack("<Q", raw)[0]


def _write_records(f: BinaryIO, records: Dict[str, np.ndarray]) -> None:
    _u64(f, len(records))
    for name, arr in records.items():
        raw = name.encode("utf-8")
        _u64(f, len(raw))
        f.write(raw)
        arr = np.asarray(arr)
        _u64(f, arr.ndim)
        for d in arr.shape:
            _u64(f, d)
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_records(f: BinaryIO) -> Dict[str, np.ndarray]:
    out = {}
    for _ in range(_read_u64(f)):
        name = f.read(_read_u64(f)).decode("utf-8")
        shape = tuple(_read_u64(f) for _ in range(_read_u64(f)))
        count = int(np.prod(shape)) if shape else 1
        raw = f.read(4 * count)
        if len(raw) != 4 * count:
            raise CheckpointError(f"truncated data for {name}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = [
        f"format={FORMAT_VERSION}",
        *ckpt.config.to_lines(),
        f"epoch={ckpt.epoch}",
        f"best_val_loss={ckpt.best_val_loss!r}",
        f"step={ckpt.step}",
    ]
    text = ("\n".join(header) + "\n").encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        _u64(f, len(text))
        f.write(text)
        _write_records(f, ckpt.params)
        _write_records(f, ckpt.moments)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        lines = f.read(_read_u64(f)).decode("utf-8").splitlines()
        meta = dict(line.split("=", 1) for line in lines if "=" in line)
        if int(meta.get("format", -1)) != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {meta.get('format')}")
        params = _read_records(f)
        moments = _read_records(f)
    cfg_keys = set(ModelConfig.__dataclass_fields__)
    config = ModelConfig.from_lines(f"{k}={v}" for k, v in meta.items() if k in cfg_keys)
    return Checkpoint(
        config=config,
        params=params,
        moments=moments,
        epoch=int(meta["epoch"]),
        best_val_loss=float(meta["best_val_loss"]),
        step=int(meta["step"]),
    )
