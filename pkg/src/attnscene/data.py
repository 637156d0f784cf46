"""Dataset indexing, balanced epochs, same-class augmentation, minibatches."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, DimensionError, InputError
from .features import FeatureConfig, log_mel, read_feature_file, read_manifest_rows, write_feature_file
from .wavio import read_wav


@dataclass(frozen=True)
class SceneExample:
    clip_id: str
    channel: int
    label: int
    source: Path
    events: tuple = ()  # (event_type, onset_s, offset_s), synthetic corpora only

    @property
    def key(self) -> str:
        return f"{self.clip_id}_ch{self.channel}"


@dataclass
class DatasetIndex:
    n_classes: int
    clips: dict[str, list[SceneExample]] = field(default_factory=dict)
    split: str = "train"

    @property
    def by_class(self) -> dict[int, list[str]]:
        groups: dict[int, list[str]] = {c: [] for c in range(self.n_classes)}
        for cid in sorted(self.clips):
            groups[self.clips[cid][0].label].append(cid)
        return groups

    @property
    def counts(self) -> list[int]:
        return [len(v) for v in self.by_class.values()]

    def examples(self) -> list[SceneExample]:
        return [ex for cid in sorted(self.clips) for ex in self.clips[cid]]

    def __len__(self) -> int:
        return len(self.clips)


def index_dataset(manifest, n_classes: int, split: str = "train", events: dict | None = None) -> DatasetIndex:
    """Group manifest rows into clips; every channel row becomes one example.

    ``manifest`` is a path to a manifest CSV or an iterable of row dicts; row
    paths are resolved relative to the manifest's directory.
    """
    base = Path(".")
    if isinstance(manifest, (str, Path)):
        base = Path(manifest).parent
        rows = read_manifest_rows(manifest)
    else:
        rows = list(manifest)
    events = events or {}
    index = DatasetIndex(n_classes, split=split)
    bad = sorted({r["class_index"] for r in rows if not 0 <= int(r["class_index"]) < n_classes}, key=str)
    if bad:
        raise InputError(f"unknown class labels {bad} (expected 0..{n_classes - 1})")
    seen = set()
    for r in rows:
        cid, ch, label = str(r["clip_id"]), int(r["channel"]), int(r["class_index"])
        if (cid, ch) in seen:
            raise InputError(f"duplicate manifest row for clip {cid!r} channel {ch}")
        seen.add((cid, ch))
        group = index.clips.setdefault(cid, [])
        if group and group[0].label != label:
            raise InputError(f"clip {cid!r} listed with classes {group[0].label} and {label}")
        group.append(SceneExample(cid, ch, label, base / r["path"], tuple(events.get(cid, ()))))
    for group in index.clips.values():
        group.sort(key=lambda e: e.channel)
    return index


def check_disjoint(*indexes: DatasetIndex) -> None:
    seen: dict[str, str] = {}
    for idx in indexes:
        for cid in idx.clips:
            if cid in seen:
                raise InputError(f"clip {cid!r} appears in both {seen[cid]} and {idx.split}")
            seen[cid] = idx.split


def epoch_sampler(index: DatasetIndex, rng: np.random.Generator, expand_channels: bool = True) -> list[SceneExample]:
    """One class-balanced epoch: every class down-sampled to the smallest class size."""
    groups = index.by_class
    empty = [c for c, g in groups.items() if not g]
    if empty:
        raise ConfigError(f"classes {empty} have no training clips")
    k = min(len(g) for g in groups.values())
    chosen = []
    for c in sorted(groups):
        g = groups[c]
        chosen.extend(g[i] for i in np.sort(rng.choice(len(g), size=k, replace=False)))
    order = rng.permutation(len(chosen))
    clips = [index.clips[chosen[i]] for i in order]
    if expand_channels:
        return [ex for group in clips for ex in group]
    return [group[0] for group in clips]


def minority_classes(counts, ratio: float = 0.5) -> set[int]:
    """Classes smaller than ``ratio`` times the largest class."""
    top = max(counts) if counts else 0
    return {c for c, n in enumerate(counts) if n < ratio * top}


@dataclass
class AugmentedClip:
    samples: np.ndarray
    offsets: tuple[int, int]  # sample offsets into clip_a and clip_b


def augment_pair(clip_a, clip_b, rng: np.random.Generator, sample_rate: int = 16000,
                 segment_s: float = 5.0, max_offset_s: float = 5.0) -> AugmentedClip:
    """Concatenate a random ``segment_s`` cut of each clip.

    Each cut starts uniformly in ``[0, max_offset_s]`` seconds (rounded to a
    whole sample); the result is ``2 * segment_s`` long.
    """
    a = np.asarray(clip_a, dtype=np.float64)
    b = np.asarray(clip_b, dtype=np.float64)
    seg = int(round(segment_s * sample_rate))
    need = seg + int(round(max_offset_s * sample_rate))
    for name, x in (("first", a), ("second", b)):
        if x.shape[-1] < need:
            raise InputError(f"{name} clip has {x.shape[-1] / sample_rate:.3f} s; augmentation needs "
                             f"{need / sample_rate:.3f} s")
    offs = tuple(int(round(rng.uniform(0.0, max_offset_s) * sample_rate)) for _ in range(2))
    out = np.concatenate([a[..., offs[0]:offs[0] + seg], b[..., offs[1]:offs[1] + seg]], axis=-1)
    return AugmentedClip(out, offs)


@dataclass
class AugmentPolicy:
    classes: set
    prob: float = 0.5
    segment_s: float = 5.0
    max_offset_s: float = 5.0


class FeatureSource:
    """Features per example, from an AFC1 cache file, a cache dir, or the WAV.

    Computed matrices are memoised in memory (float32) and, when ``cache_dir``
    is set, written there as ``<clip>_ch<k>.afc``.
    """

    def __init__(self, config: FeatureConfig | None = None, cache_dir=None, memory: bool = True):
        self.config = config or FeatureConfig()
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._memo: dict[str, np.ndarray] | None = {} if memory else None

    def features(self, ex: SceneExample) -> np.ndarray:
        if self._memo is not None and ex.key in self._memo:
            return self._memo[ex.key]
        if ex.source.suffix == ".afc":
            if not ex.source.exists():
                raise DataError(f"missing cache entry for clip {ex.clip_id!r} channel {ex.channel}: {ex.source}")
            data = read_feature_file(ex.source)
        else:
            target = self.cache_dir / f"{ex.key}.afc" if self.cache_dir else None
            if target is not None and target.exists():
                data = read_feature_file(target)
            else:
                data = log_mel(self.waveform(ex), self.config).data.astype(np.float32)
                if target is not None:
                    target.parent.mkdir(parents=True, exist_ok=True)
                    write_feature_file(target, data)
        if self._memo is not None:
            self._memo[ex.key] = data
        return data

    def waveform(self, ex: SceneExample) -> np.ndarray:
        if ex.source.suffix == ".afc":
            raise DataError(f"clip {ex.clip_id!r} is only available as cached features")
        try:
            clip = read_wav(ex.source)
        except FileNotFoundError as exc:
            raise DataError(f"audio for clip {ex.clip_id!r} not found: {ex.source}") from exc
        if clip.sample_rate != self.config.sample_rate:
            raise InputError(f"{ex.source}: sample rate {clip.sample_rate}, expected {self.config.sample_rate}")
        return clip.channel(ex.channel)

    def augmented(self, ex: SceneExample, partner: SceneExample, rng, policy: AugmentPolicy) -> np.ndarray:
        aug = augment_pair(self.waveform(ex), self.waveform(partner), rng, self.config.sample_rate,
                           policy.segment_s, policy.max_offset_s)
        return log_mel(aug.samples, self.config).data.astype(np.float32)


@dataclass
class Batch:
    X: np.ndarray  # (B, n_mels, T')
    y: np.ndarray
    ids: list[str]


def minibatcher(examples, batch_size: int, source: FeatureSource, rng: np.random.Generator | None = None,
                augment: AugmentPolicy | None = None, index: DatasetIndex | None = None) -> Iterator[Batch]:
    """Consecutive batches of ``batch_size`` (the last may be short).

    With ``augment``, each example of a policy class is replaced, with
    probability ``augment.prob``, by a splice of itself and a random clip of
    the same class from ``index``.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if augment is not None and (rng is None or index is None):
        raise ConfigError("augmentation needs an rng and the training index")
    groups = index.by_class if augment is not None else None
    examples = list(examples)
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        mats, ids = [], []
        for ex in chunk:
            if augment is not None and ex.label in augment.classes and rng.random() < augment.prob:
                pool = groups[ex.label]
                partner_clip = index.clips[pool[int(rng.integers(len(pool)))]]
                partner = next((p for p in partner_clip if p.channel == ex.channel), partner_clip[0])
                mats.append(source.augmented(ex, partner, rng, augment))
                ids.append(f"{ex.key}+{partner.key}")
            else:
                mats.append(source.features(ex))
                ids.append(ex.key)
        shapes = {m.shape for m in mats}
        if len(shapes) > 1:
            raise DimensionError(f"batch mixes feature shapes {sorted(shapes)}")
        yield Batch(np.stack(mats), np.array([ex.label for ex in chunk]), ids)


@dataclass
class CorpusSplit:
    index: DatasetIndex
    class_names: list[str]
    events: dict


def load_split(data_dir, split: str, n_classes: int | None = None) -> CorpusSplit:
    """Read ``data_dir/<split>/manifest.csv`` (plus events and class names if present)."""
    root = Path(data_dir)
    manifest = root / split / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"no manifest for split {split!r} at {manifest}")
    names = []
    if (root / "classes.csv").exists():
        with (root / "classes.csv").open(newline="", encoding="utf-8") as fh:
            names = [r["name"] for r in csv.DictReader(fh)]
    n = n_classes if n_classes is not None else len(names)
    if n < 2:
        raise ConfigError(f"{root}: cannot tell the class count (no classes.csv)")
    if not names or len(names) != n:
        names = [f"class_{c}" for c in range(n)]
    events: dict = {}
    ev_path = root / split / "events.csv"
    if ev_path.exists():
        with ev_path.open(newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                events.setdefault(r["clip_id"], []).append(
                    (r["event_type"], float(r["onset_s"]), float(r["offset_s"])))
    return CorpusSplit(index_dataset(manifest, n, split, events), names, events)
