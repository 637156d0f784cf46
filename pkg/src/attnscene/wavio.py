"""Minimal RIFF/WAVE PCM16 reader and writer."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError


@dataclass
class AudioClip:
    samples: np.ndarray  # (channels, n) float64 in [-1, 1)
    sample_rate: int

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channel(self, i: int) -> np.ndarray:
        return self.samples[i]


def _chunks(data: bytes, path):
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        size = struct.unpack_from("<I", data, pos + 4)[0]
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"{path}: chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path) -> AudioClip:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file (header chunk)")
    fmt = None
    pcm = None
    for cid, body in _chunks(data, path):
        if cid == b"fmt ":
            if len(body) < 16:
                raise FormatError(f"{path}: 'fmt ' chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            pcm = body
    if fmt is None:
        raise FormatError(f"{path}: missing 'fmt ' chunk")
    tag, channels, rate, _, _, bits = fmt
    if tag != 1:
        raise FormatError(f"{path}: 'fmt ' chunk declares format tag {tag}; only PCM (1) is supported")
    if bits != 16:
        raise FormatError(f"{path}: 'fmt ' chunk declares {bits}-bit samples; only 16-bit is supported")
    if not 1 <= channels <= 4:
        raise FormatError(f"{path}: 'fmt ' chunk declares {channels} channels; 1-4 supported")
    if pcm is None:
        raise FormatError(f"{path}: missing 'data' chunk")
    frame = 2 * channels
    usable = len(pcm) - len(pcm) % frame
    ints = np.frombuffer(pcm[:usable], dtype="<i2").reshape(-1, channels).T
    return AudioClip(ints.astype(np.float64) / 32768.0, rate)


def write_wav(path, samples, sample_rate: int) -> None:
    """Write float samples (``(n,)`` or ``(channels, n)``) as PCM16."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    ints = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    channels = ints.shape[0]
    payload = ints.T.tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE",
                         b"fmt ", 16, 1, channels, sample_rate, sample_rate * 2 * channels,
                         2 * channels, 16, b"data", len(payload))
    Path(path).write_bytes(header + payload)
