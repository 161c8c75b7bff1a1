"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"MTCK"  u32 version=1
    u64 config length, UTF-8 JSON model config
    u32 count, then count tensor records       (parameters)
    u32 count, then count tensor records       (optimizer moments, "m:" / "v:" prefixed names)
    u64 optimizer step
    u32 count, then count provenance strings   (u16 length + UTF-8)

A tensor record is ``u16 name length, name, u8 dtype (0=f32, 1=f64), u8 rank,
u32 dims..., row-major payload``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, init

MAGIC = b"MTCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    provenance: tuple[str, ...] = ()

    @classmethod
    def initial(cls, config: ModelConfig, seed: int) -> "Checkpoint":
        arrays = init(config, seed).arrays()
        return cls(config, {k: a.copy() for k, a in arrays.items()})

    def model(self, requires_grad: bool = False) -> ModelParams:
        return ModelParams.from_arrays(self.config, self.params, requires_grad)

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<I", VERSION)
        blob = json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8")
        out += struct.pack("<Q", len(blob)) + blob
        _write_tensors(out, self.params)
        moments = {f"m:{k}": a for k, a in self.m.items()}
        moments.update({f"v:{k}": a for k, a in self.v.items()})
        _write_tensors(out, moments)
        out += struct.pack("<Q", self.step)
        out += struct.pack("<I", len(self.provenance))
        for s in self.provenance:
            b = s.encode("utf-8")
            out += struct.pack("<H", len(b)) + b
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        r = _Reader(data)
        if r.take(4) != MAGIC:
            raise CheckpointFormatError("offset 0: bad magic, not a checkpoint file")
        version = r.unpack("<I")
        if version != VERSION:
            raise CheckpointFormatError(f"offset 4: unsupported version {version}")
        at = r.pos
        try:
            config = ModelConfig(**json.loads(r.take(r.unpack("<Q")).decode("utf-8")))
        except (ValueError, TypeError) as exc:
            raise CheckpointFormatError(f"offset {at}: unreadable config blob ({exc})") from exc
        params = _read_tensors(r)
        moments = _read_tensors(r)
        step = r.unpack("<Q")
        provenance = []
        for _ in range(r.unpack("<I")):
            at = r.pos
            try:
                provenance.append(r.take(r.unpack("<H")).decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise CheckpointFormatError(f"offset {at}: provenance entry is not UTF-8") from exc
        if r.pos != len(data):
            raise CheckpointFormatError(f"offset {r.pos}: {len(data) - r.pos} trailing bytes")
        m = {k[2:]: a for k, a in moments.items() if k.startswith("m:")}
        v = {k[2:]: a for k, a in moments.items() if k.startswith("v:")}
        try:
            ModelParams.from_arrays(config, params, requires_grad=False)
        except ValueError as exc:
            raise CheckpointFormatError(f"offset 0: parameters do not match config ({exc})") from exc
        return cls(config, params, m, v, step, tuple(provenance))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"offset {self.pos}: truncated file, wanted {n} bytes, {len(self.data) - self.pos} left")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def _write_tensors(out: bytearray, tensors: dict[str, np.ndarray]) -> None:
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointFormatError(f"tensor {name}: unsupported dtype {arr.dtype}")
        b = name.encode("utf-8")
        out += struct.pack("<H", len(b)) + b
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def _read_tensors(r: _Reader) -> dict[str, np.ndarray]:
    out = {}
    for _ in range(r.unpack("<I")):
        at = r.pos
        name = r.take(r.unpack("<H")).decode("utf-8", errors="replace")
        code, rank = struct.unpack("<BB", r.take(2))
        if code not in _DTYPES:
            raise CheckpointFormatError(f"offset {at}: tensor {name!r} has unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        dtype = _DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(count * dtype.itemsize)
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    return out
