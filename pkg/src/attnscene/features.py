"""Log-Mel frontend and the on-disk feature cache."""

from __future__ import annotations

import csv
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError, IntegrityError
from .wavio import read_wav

log = logging.getLogger(__name__)

CACHE_MAGIC = b"AFC1"


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    win_length: int = 256  # 16 ms
    hop_length: int = 128  # 8 ms
    n_fft: int = 512  # window zero-padded; 256 bins leave the lowest filter empty
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float = 0.0  # 0 means Nyquist
    log_floor: float = 1e-10
    mean_subtraction: str = "global"  # global | per_band | none

    def __post_init__(self):
        if self.mean_subtraction not in ("global", "per_band", "none"):
            raise ConfigError(f"mean_subtraction must be global, per_band or none; got {self.mean_subtraction!r}")


@dataclass
class LogMelFeatures:
    data: np.ndarray  # (n_mels, frames)
    hop_seconds: float
    win_seconds: float

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_frames * self.hop_seconds


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _mel_points(sample_rate, n_mels, fmin, fmax):
    top = fmax or sample_rate / 2
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(top), n_mels + 2))


def mel_center_frequencies(cfg: FeatureConfig) -> np.ndarray:
    return _mel_points(cfg.sample_rate, cfg.n_mels, cfg.fmin, cfg.fmax)[1:-1]


@lru_cache(maxsize=8)
def _filterbank(sample_rate, n_fft, n_mels, fmin, fmax):
    pts = _mel_points(sample_rate, n_mels, fmin, fmax)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    rising = (freqs[None, :] - pts[:-2, None]) / (pts[1:-1, None] - pts[:-2, None])
    falling = (pts[2:, None] - freqs[None, :]) / (pts[2:, None] - pts[1:-1, None])
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular HTK-mel filters with unit peak, shape ``(n_mels, n_fft//2+1)``."""
    return _filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)


def frame_count(num_samples: int, hop: int) -> int:
    return math.ceil(num_samples / hop)


def frame_signal(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Centre-padded (reflect) frames, ``ceil(N / hop)`` of them, shape ``(frames, win)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError(f"expected mono samples, got shape {x.shape}")
    if x.size < cfg.win_length:
        raise InputError(f"clip of {x.size} samples is shorter than one window ({cfg.win_length})")
    half = cfg.win_length // 2
    padded = np.pad(x, half, mode="reflect")
    n = frame_count(x.size, cfg.hop_length)
    windows = np.lib.stride_tricks.sliding_window_view(padded, cfg.win_length)
    return windows[::cfg.hop_length][:n]


def power_spectrogram(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    frames = frame_signal(x, cfg) * np.hanning(cfg.win_length + 1)[:-1]
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T  # (bins, frames)


def log_mel_energies(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Log-Mel matrix before any mean subtraction, ``(n_mels, frames)``."""
    mel = mel_filterbank(cfg) @ power_spectrogram(x, cfg)
    return np.log(np.maximum(mel, cfg.log_floor))


def log_mel(samples: np.ndarray, cfg: FeatureConfig | None = None, sample_rate: int | None = None) -> LogMelFeatures:
    cfg = cfg or FeatureConfig()
    if sample_rate is not None and sample_rate != cfg.sample_rate:
        raise InputError(f"sample rate {sample_rate} does not match feature config {cfg.sample_rate}")
    m = log_mel_energies(samples, cfg)
    if cfg.mean_subtraction == "global":
        m = m - m.mean()
    elif cfg.mean_subtraction == "per_band":
        m = m - m.mean(axis=1, keepdims=True)
    return LogMelFeatures(m, cfg.hop_length / cfg.sample_rate, cfg.win_length / cfg.sample_rate)


# ---------------------------------------------------------------------------
# cache files


def write_feature_file(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    n_mels, frames = data.shape
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(CACHE_MAGIC + struct.pack("<II", n_mels, frames) + data.tobytes(order="C"))
    os.replace(tmp, path)


def read_feature_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise IntegrityError(f"{path}: bad magic {raw[:4]!r}, expected {CACHE_MAGIC!r}")
    if len(raw) < 12:
        raise IntegrityError(f"{path}: truncated header")
    n_mels, frames = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * n_mels * frames
    if len(raw) != expected:
        raise IntegrityError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(n_mels, frames).astype(np.float32)


MANIFEST_FIELDS = ("clip_id", "channel", "class_index", "path")


def read_manifest_rows(path) -> list[dict]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = [f for f in MANIFEST_FIELDS if f not in reader.fieldnames]
        if missing:
            raise FormatError(f"{path}: manifest lacks columns {missing}")
        return list(reader)


def write_manifest_rows(path, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r["clip_id"], r["channel"], r["class_index"], r["path"]])


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("ASC_THREADS", "")))
    except ValueError:
        return os.cpu_count() or 1


def cache_features(dataset_dir, out_dir, cfg: FeatureConfig | None = None) -> Path:
    """Compute one AFC1 file per (clip, channel) listed in ``dataset_dir/manifest.csv``.

    Writes ``out_dir/manifest.csv`` pointing at the cache files. Existing cache
    files are reused. Unreadable clips are logged and left out of the manifest.
    """
    cfg = cfg or FeatureConfig()
    dataset_dir, out_dir = Path(dataset_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = dataset_dir / "manifest.csv"
    rows = read_manifest_rows(manifest) if manifest.exists() else []

    def work(row):
        target = out_dir / f"{row['clip_id']}_ch{int(row['channel'])}.afc"
        if not target.exists():
            try:
                clip = read_wav(dataset_dir / row["path"])
                feats = log_mel(clip.channel(int(row["channel"])), cfg, clip.sample_rate)
            except (OSError, FormatError, InputError, IndexError) as exc:
                log.warning("skipping %s channel %s: %s", row["clip_id"], row["channel"], exc)
                return None
            write_feature_file(target, feats.data)
        return {**row, "path": target.name}

    with ThreadPoolExecutor(_worker_count()) as pool:
        done = [r for r in pool.map(work, rows) if r is not None]
    write_manifest_rows(out_dir / "manifest.csv", done)
    return out_dir / "manifest.csv"
