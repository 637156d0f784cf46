"""Synthetic scene corpus with ground-truth event intervals.

Each scene class owns a small set of characteristic event types drawn from a
shared vocabulary; classes overlap in the types they use, so only the
combination of events identifies a scene. A clip is stationary background
noise plus every characteristic event of its class at least once, placed at
non-overlapping random times.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .features import write_manifest_rows
from .wavio import write_wav

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "eval")


def _envelope(n, sr, ramp_s=0.015):
    r = min(int(ramp_s * sr), n // 2)
    env = np.ones(n)
    if r:
        ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, r))
        env[:r] = ramp
        env[-r:] = ramp[::-1]
    return env


def _bandpass_noise(n, sr, lo, hi, rng):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / sr)
    spec[(f < lo) | (f > hi)] = 0
    return np.fft.irfft(spec, n)


def _chirp(n, sr, f0, f1):
    t = np.arange(n) / sr
    dur = n / sr
    return np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / dur * t * t))


def render_event(kind: str, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS waveform of one event prototype, ``n`` samples long."""
    t = np.arange(n) / sr
    if kind == "tone_low":
        x = np.sin(2 * np.pi * 440 * t) + 0.5 * np.sin(2 * np.pi * 880 * t)
    elif kind == "tone_high":
        x = np.sin(2 * np.pi * 2500 * t)
    elif kind == "tone_mid":
        x = np.sin(2 * np.pi * 1200 * t + 3 * np.sin(2 * np.pi * 6 * t))
    elif kind == "noise_burst":
        x = _bandpass_noise(n, sr, 4000, 6000, rng)
    elif kind == "low_rumble":
        x = _bandpass_noise(n, sr, 150, 600, rng) * (1 + 0.8 * np.sin(2 * np.pi * 8 * t))
    elif kind == "chirp_up":
        x = _chirp(n, sr, 900, 1900)
    elif kind == "chirp_down":
        x = _chirp(n, sr, 3600, 2900)
    elif kind == "clicks":
        x = np.zeros(n)
        period = int(sr / 25)
        width = int(0.003 * sr)
        decay = np.exp(-np.arange(width) / (0.0008 * sr))
        for start in range(0, n - width, period):
            x[start:start + width] += rng.standard_normal(width) * decay
    else:
        raise ConfigError(f"unknown event type {kind!r}")
    x = x * _envelope(n, sr)
    return x / (np.sqrt(np.mean(x * x)) + 1e-12)


# event types sit in separate bands so no two are confusable frame by frame
EVENT_TYPES = ("tone_low", "tone_high", "noise_burst", "chirp_up", "chirp_down", "clicks",
               "tone_mid", "low_rumble")


@dataclass
class SynthConfig:
    n_classes: int = 9
    vocabulary: tuple = EVENT_TYPES[:6]
    events_per_class: int = 2
    events_per_clip: tuple = (2, 4)
    event_seconds: tuple = (0.3, 0.8)
    clip_seconds: float = 6.0
    sample_rate: int = 16000
    snr_db: tuple = (3.0, 12.0)
    background_rms: float = 0.01
    distractor_prob: float = 0.0
    n_train: int = 300
    n_dev: int = 60
    n_eval: int = 60
    seed: int = 0

    def __post_init__(self):
        self.vocabulary = tuple(self.vocabulary)
        self.events_per_clip = tuple(int(v) for v in self.events_per_clip)
        self.event_seconds = tuple(float(v) for v in self.event_seconds)
        self.snr_db = tuple(float(v) for v in self.snr_db)
        unknown = [v for v in self.vocabulary if v not in EVENT_TYPES]
        if unknown:
            raise ConfigError(f"unknown event types {unknown}; choose from {EVENT_TYPES}")
        if not 1 <= self.events_per_class <= len(self.vocabulary):
            raise ConfigError("events_per_class must be between 1 and the vocabulary size")
        if not 0 <= self.distractor_prob <= 1:
            raise ConfigError("distractor_prob must lie in [0, 1]")
        n_sets = len(list(itertools.combinations(self.vocabulary, self.events_per_class)))
        if self.n_classes > n_sets:
            raise ConfigError(f"{self.n_classes} classes need distinct event sets but only {n_sets} exist")

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "dev": self.n_dev, "eval": self.n_eval}


def class_event_sets(cfg: SynthConfig) -> list[tuple[str, ...]]:
    """Distinct characteristic event sets per class, covering the vocabulary when possible."""
    combos = list(itertools.combinations(cfg.vocabulary, cfg.events_per_class))
    rng = np.random.default_rng([cfg.seed, 1])
    best = None
    for _ in range(200):
        pick = [combos[i] for i in rng.permutation(len(combos))[:cfg.n_classes]]
        used = {e for s in pick for e in s}
        if best is None or len(used) > len({e for s in best for e in s}):
            best = pick
        if len(used) == len(cfg.vocabulary):
            break
    return best


@dataclass
class SynthClip:
    clip_id: str
    class_index: int
    samples: np.ndarray
    events: list = field(default_factory=list)  # (event_type, onset_s, offset_s)


def _place(durations, length, gap, rng, tries=200):
    """Random non-overlapping onsets (seconds) for the given durations."""
    for _ in range(tries):
        onsets = []
        ok = True
        for d in durations:
            for _ in range(tries):
                on = rng.uniform(gap, length - d - gap)
                if all(on + d + gap <= o or o + od + gap <= on for o, od in onsets):
                    onsets.append((on, d))
                    break
            else:
                ok = False
                break
        if ok:
            return [o for o, _ in onsets]
    raise ConfigError("could not place events without overlap; reduce events_per_clip or event_seconds")


def render_clip(cfg: SynthConfig, clip_id: str, class_index: int, event_set, rng) -> SynthClip:
    sr = cfg.sample_rate
    n = int(round(cfg.clip_seconds * sr))
    x = rng.standard_normal(n) * cfg.background_rms
    lo, hi = cfg.events_per_clip
    count = max(int(rng.integers(lo, hi + 1)), len(event_set))
    kinds = list(event_set) + [event_set[i] for i in rng.integers(0, len(event_set), count - len(event_set))]
    for other in cfg.vocabulary:
        if other not in event_set and rng.random() < cfg.distractor_prob:
            kinds.append(other)
    kinds = [kinds[i] for i in rng.permutation(len(kinds))]
    durs = [float(rng.uniform(*cfg.event_seconds)) for _ in kinds]
    onsets = _place(durs, cfg.clip_seconds, 0.1, rng)
    events = []
    for kind, on, d in zip(kinds, onsets, durs):
        a = int(round(on * sr))
        m = int(round(d * sr))
        gain = cfg.background_rms * 10 ** (rng.uniform(*cfg.snr_db) / 20)
        x[a:a + m] += gain * render_event(kind, m, sr, rng)
        events.append((kind, a / sr, (a + m) / sr))
    events.sort(key=lambda e: e[1])
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x *= 0.99 / peak
    return SynthClip(clip_id, class_index, x, events)


def generate_split(cfg: SynthConfig, split: str, sets=None):
    sets = sets or class_event_sets(cfg)
    n = cfg.split_sizes()[split]
    sidx = SPLITS.index(split)
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, 100 + sidx, i])
        label = i % cfg.n_classes
        yield render_clip(cfg, f"{split}_{i:04d}", label, sets[label], rng)


def synth_corpus(cfg: SynthConfig, out_dir) -> Path:
    """Write WAVs, ``manifest.csv`` and ``events.csv`` per split under ``out_dir``."""
    out = Path(out_dir)
    sets = class_event_sets(cfg)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "classes.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_index", "name", "event_types"])
        for c, s in enumerate(sets):
            w.writerow([c, f"scene_{c}", "+".join(s)])
    for split in SPLITS:
        d = out / split
        (d / "wav").mkdir(parents=True, exist_ok=True)
        rows, ev_rows = [], []
        for clip in generate_split(cfg, split, sets):
            rel = f"wav/{clip.clip_id}.wav"
            write_wav(d / rel, clip.samples, cfg.sample_rate)
            rows.append({"clip_id": clip.clip_id, "channel": 0, "class_index": clip.class_index, "path": rel})
            ev_rows.extend((clip.clip_id, k, f"{on:.6f}", f"{off:.6f}") for k, on, off in clip.events)
        write_manifest_rows(d / "manifest.csv", rows)
        with (d / "events.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["clip_id", "event_type", "onset_s", "offset_s"])
            w.writerows(ev_rows)
        log.info("wrote %d %s clips to %s", len(rows), split, d)
    return out


def read_events(path) -> dict[str, list[tuple[str, float, float]]]:
    events: dict[str, list] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            events.setdefault(r["clip_id"], []).append((r["event_type"], float(r["onset_s"]), float(r["offset_s"])))
    return events


def read_class_names(corpus_dir) -> list[str]:
    path = Path(corpus_dir) / "classes.csv"
    with path.open(newline="", encoding="utf-8") as fh:
        return [r["name"] for r in csv.DictReader(fh)]
