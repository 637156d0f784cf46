"""Binary checkpoint format ("ASCK").

Layout, all little-endian::

    b"ASCK" | u32 version | u32 n + n bytes UTF-8 JSON config blob
    | u32 tensor count | per tensor: u32 n + name, u8 dtype, u32 rank, rank x u32 dims, raw data
    | u64 checksum (blake2b-64 of every preceding byte)

Tensors are written in lexicographic name order and the JSON blob with
sorted keys, so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError, VersionError

MAGIC = b"ASCK"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


@dataclass
class CheckpointData:
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def encode(ck: CheckpointData) -> bytes:
    blob = json.dumps(ck.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(ck.tensors))]
    for name in sorted(ck.tensors):
        arr = np.asarray(ck.tensors[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise TypeError(f"tensor {name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BI", DTYPE_CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<Q", _checksum(payload))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw) - 8:
            raise IntegrityError(f"{self.path}: truncated while reading {what}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(raw: bytes, path="<bytes>") -> CheckpointData:
    if raw[:4] != MAGIC:
        raise IntegrityError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 20:
        raise IntegrityError(f"{path}: file too short ({len(raw)} bytes)")
    (stored,) = struct.unpack("<Q", raw[-8:])
    rd = _Reader(raw, path)
    rd.take(4, "magic")
    (version,) = rd.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint version {version}; this build reads version {VERSION} "
                           "and does not upgrade older formats")
    if stored != _checksum(raw[:-8]):
        raise IntegrityError(f"{path}: checksum mismatch")
    (n,) = rd.unpack("<I", "config length")
    config = json.loads(rd.take(n, "config blob").decode("utf-8"))
    (count,) = rd.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (k,) = rd.unpack("<I", "tensor name length")
        name = rd.take(k, "tensor name").decode("utf-8")
        code, rank = rd.unpack("<BI", f"header of {name}")
        if code not in DTYPES:
            raise IntegrityError(f"{path}: tensor {name} has unknown dtype code {code}")
        dims = rd.unpack(f"<{rank}I", f"dims of {name}")
        dt = DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(rd.take(nbytes, f"data of {name}"), dtype=dt).reshape(dims).copy()
    if rd.pos != len(raw) - 8:
        raise IntegrityError(f"{path}: {len(raw) - 8 - rd.pos} unexpected trailing bytes")
    return CheckpointData(config, tensors)


def save_checkpoint(ck: CheckpointData, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ck))
    os.replace(tmp, path)


def load_checkpoint(path) -> CheckpointData:
    return decode(Path(path).read_bytes(), path)
