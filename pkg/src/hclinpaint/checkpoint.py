"""Binary checkpoint format.

Layout (little-endian)::

    b"HCLK" | u32 version | u32 len + config text | u64 step
    u32 n_tensors, then per tensor: u16 len + name | u8 ndim | u32 dims | f64 data
    u8 has_adam [u64 t | per tensor f64 m | f64 v]
    u32 len + RNG state JSON
    u32 CRC32 of everything above
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tensor
from .config import RunConfig

MAGIC = b"HCLK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TableLengthError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    step: int = 0
    adam: AdamState | None = None
    rng_state: dict | None = None

    def model_params(self) -> dict[str, Tensor]:
        """Frozen tensors for inference."""
        return {k: Tensor(v, name=k) for k, v in self.params.items()}


def encode(ck: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    cfg = ck.config.to_text().encode()
    out += struct.pack("<I", len(cfg)) + cfg
    out += struct.pack("<Q", ck.step)
    out += struct.pack("<I", len(ck.params))
    for name, arr in ck.params.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    if ck.adam is None:
        out += b"\x00"
    else:
        if len(ck.adam.m) != len(ck.params):
            raise CheckpointError("Adam state does not match the tensor table")
        out += b"\x01" + struct.pack("<Q", ck.adam.t)
        for m, v in zip(ck.adam.m, ck.adam.v):
            out += np.asarray(m, dtype="<f8").tobytes()
            out += np.asarray(v, dtype="<f8").tobytes()
    rng = json.dumps(ck.rng_state, sort_keys=True).encode()
    out += struct.pack("<I", len(rng)) + rng
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TableLengthError(f"checkpoint truncated at byte {self.pos} (need {n} more)")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]


def decode(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < 12:
        raise TableLengthError("checkpoint too short")
    version = struct.unpack("<I", buf[4:8])[0]
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    body, crc = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(8)
    cfg = RunConfig.from_text(r.take(r.unpack("<I")).decode())
    step = r.unpack("<Q")
    params: dict[str, np.ndarray] = {}
    for _ in range(r.unpack("<I")):
        name = r.take(r.unpack("<H")).decode()
        ndim = r.unpack("<B")
        shape = tuple(int(d) for d in np.atleast_1d(r.unpack(f"<{ndim}I"))) if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    adam = None
    if r.unpack("<B"):
        t = r.unpack("<Q")
        m, v = [], []
        for arr in params.values():
            m.append(np.frombuffer(r.take(8 * arr.size), dtype="<f8").reshape(arr.shape).astype(np.float64))
            v.append(np.frombuffer(r.take(8 * arr.size), dtype="<f8").reshape(arr.shape).astype(np.float64))
        tc = cfg.train
        adam = AdamState(m, v, t, tc.lr, tc.beta1, tc.beta2, tc.adam_eps)
    rng_state = json.loads(r.take(r.unpack("<I")).decode())
    if r.pos != len(body):
        raise TableLengthError(f"{len(body) - r.pos} unexpected trailing bytes")
    return Checkpoint(cfg, params, step, adam, rng_state)


def save_checkpoint(path: str | Path, ck: Checkpoint) -> None:
    Path(path).write_bytes(encode(ck))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
