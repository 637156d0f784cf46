"""Macro F1, channel-averaged clip inference, attention alignment export."""

from __future__ import annotations

import csv
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetIndex, FeatureSource
from .errors import DimensionError, InputError, UnsupportedModeError
from .model import Prediction, SceneModel
from .wavio import write_wav

AVEC_MAGIC = b"AVEC"


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows true, cols predicted

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes: int) -> "ConfusionMatrix":
        m = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(m, (np.asarray(y_true, int), np.asarray(y_pred, int)), 1)
        return cls(m)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def precision_recall(self):
        tp = np.diag(self.counts).astype(float)
        pred = self.counts.sum(axis=0)
        true = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            p = np.where(pred > 0, tp / np.maximum(pred, 1), 0.0)
            r = np.where(true > 0, tp / np.maximum(true, 1), 0.0)
        return p, r


def macro_f1(conf: ConfusionMatrix):
    """Returns ``(macro, per_class)``; an undefined per-class F1 counts as 0."""
    p, r = conf.precision_recall()
    denom = p + r
    f1 = np.where(denom > 0, 2 * p * r / np.where(denom > 0, denom, 1), 0.0)
    return float(f1.mean()), f1


def infer_clip(channels, model: SceneModel) -> Prediction:
    """Average the per-channel class probabilities of one clip."""
    mats = [np.asarray(getattr(c, "data", c)) for c in channels]
    if not mats:
        raise InputError("infer_clip needs at least one channel")
    shapes = {m.shape for m in mats}
    if len(shapes) > 1:
        raise DimensionError(f"channels have different shapes {sorted(shapes)}")
    if mats[0].shape[0] != model.config.n_mels:
        raise DimensionError(f"channel has {mats[0].shape[0]} mel bands, model expects {model.config.n_mels}")
    res = model.predict(np.stack(mats))
    return average_channels(res.prediction)


def average_channels(pred: Prediction) -> Prediction:
    return Prediction(pred.logits.mean(axis=0), pred.probs.mean(axis=0))


def clip_predictions(index: DatasetIndex, model: SceneModel, source: FeatureSource, batch_clips: int = 16):
    """Channel-averaged probabilities for every clip, in sorted clip order."""
    ids = sorted(index.clips)
    probs = []
    for start in range(0, len(ids), batch_clips):
        chunk = ids[start:start + batch_clips]
        mats, owners = [], []
        for k, cid in enumerate(chunk):
            for ex in index.clips[cid]:
                mats.append(source.features(ex))
                owners.append(k)
        if len({m.shape for m in mats}) > 1:
            for cid in chunk:
                probs.append(infer_clip([source.features(ex) for ex in index.clips[cid]], model).probs)
            continue
        p = model.predict(np.stack(mats)).prediction.probs
        owners = np.array(owners)
        probs.extend(p[owners == k].mean(axis=0) for k in range(len(chunk)))
    return ids, np.array(probs)


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    class_names: list[str]

    def rows(self):
        for c, name in enumerate(self.class_names):
            yield name, self.precision[c], self.recall[c], self.f1[c]
        yield "overall", float(self.precision.mean()), float(self.recall.mean()), self.macro_f1

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "precision", "recall", "f1"])
            for name, p, r, f in self.rows():
                w.writerow([name, f"{p:.6f}", f"{r:.6f}", f"{f:.6f}"])

    def table(self) -> str:
        width = max(12, *(len(n) for n in self.class_names))
        lines = [f"{'Class':<{width}} | {'P':>6} | {'R':>6} | {'F1':>6}", "-" * (width + 30)]
        for name, p, r, f in self.rows():
            if name == "overall":
                lines.append("-" * (width + 30))
                name = "Overall"
            lines.append(f"{name:<{width}} | {p:6.3f} | {r:6.3f} | {f:6.3f}")
        return "\n".join(lines)


def evaluate(index: DatasetIndex, model: SceneModel, source: FeatureSource,
             class_names: list[str] | None = None) -> EvalReport:
    if len(index) == 0:
        raise InputError(f"split {index.split!r} has no clips")
    ids, probs = clip_predictions(index, model, source)
    y_true = [index.clips[c][0].label for c in ids]
    conf = ConfusionMatrix.from_labels(y_true, probs.argmax(axis=1), index.n_classes)
    macro, f1 = macro_f1(conf)
    p, r = conf.precision_recall()
    names = class_names or [f"class_{c}" for c in range(index.n_classes)]
    return EvalReport(conf, p, r, f1, macro, names)


# ---------------------------------------------------------------------------
# alignments


@dataclass
class AlignmentRecord:
    clip_id: str
    head: int
    frame: int
    seconds: float
    score: float
    scores: np.ndarray
    attended: np.ndarray  # h_{t*}


def clip_alignments(clip_id: str, X, model: SceneModel, duration: float | None = None) -> list[AlignmentRecord]:
    """Per-head argmax frame of one channel's attention scores.

    ``duration`` defaults to the feature length (frames x hop); timestamps use
    a uniform division of it over the T pooled steps.
    """
    if model.config.pooling_mode != "attention":
        raise UnsupportedModeError("alignments need an attention-pooling model, not maxpool")
    res = model.predict(np.asarray(X)[None])
    A = res.attention.scores[0]  # (M, T)
    H = res.features[0]
    T = A.shape[1]
    if duration is None:
        duration = np.asarray(X).shape[1] * 0.008
    out = []
    for i in range(A.shape[0]):
        t = int(A[i].argmax())
        out.append(AlignmentRecord(clip_id, i, t, t * duration / T, float(A[i, t]), A[i].copy(), H[t].copy()))
    return out


def write_avec(path, ids: list[str], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype="<f4")
    n, dim = vectors.shape if len(vectors) else (0, 0)
    parts = [AVEC_MAGIC, struct.pack("<II", n, dim)]
    for rid, vec in zip(ids, vectors):
        b = rid.encode("utf-8")
        parts.append(struct.pack("<I", len(b)) + b + vec.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_avec(path):
    raw = Path(path).read_bytes()
    if raw[:4] != AVEC_MAGIC:
        raise InputError(f"{path}: not an AVEC file")
    n, dim = struct.unpack_from("<II", raw, 4)
    pos = 12
    ids, rows = [], []
    for _ in range(n):
        (k,) = struct.unpack_from("<I", raw, pos)
        ids.append(raw[pos + 4:pos + 4 + k].decode("utf-8"))
        pos += 4 + k
        rows.append(np.frombuffer(raw, dtype="<f4", count=dim, offset=pos))
        pos += 4 * dim
    return ids, np.array(rows).reshape(n, dim)


def export_alignments(index: DatasetIndex, model: SceneModel, source: FeatureSource, out_dir,
                      snippets: bool = False, top_k: int | None = None,
                      hop_seconds: float | None = None) -> list[AlignmentRecord]:
    """Write ``alignments.csv`` and ``attended.avec`` (and optional 1 s WAV snippets).

    Channel 0 of each clip is used. With ``snippets``, the +-0.5 s waveform
    around every (or each head's ``top_k`` highest-scoring) argmax is saved.
    """
    if model.config.pooling_mode != "attention":
        raise UnsupportedModeError("export_alignments needs an attention-pooling checkpoint")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hop = hop_seconds or source.config.hop_length / source.config.sample_rate
    records: list[AlignmentRecord] = []
    for cid in sorted(index.clips):
        ex = index.clips[cid][0]
        X = source.features(ex)
        records.extend(clip_alignments(cid, X, model, X.shape[1] * hop))
    with (out / "alignments.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_id", "head", "frame", "seconds", "score"])
        for r in records:
            w.writerow([r.clip_id, r.head, r.frame, f"{r.seconds:.6f}", f"{r.score:.6f}"])
    write_avec(out / "attended.avec", [f"{r.clip_id}:{r.head}" for r in records],
               np.array([r.attended for r in records]) if records else np.zeros((0, 0)))
    if snippets:
        chosen = records
        if top_k is not None:
            chosen = []
            for head in sorted({r.head for r in records}):
                mine = sorted((r for r in records if r.head == head), key=lambda r: (-r.score, r.clip_id))
                chosen.extend(mine[:top_k])
        snip_dir = out / "snippets"
        snip_dir.mkdir(exist_ok=True)
        sr = source.config.sample_rate
        for r in chosen:
            x = source.waveform(index.clips[r.clip_id][0])
            write_wav(snip_dir / f"{r.clip_id}_head{r.head}.wav", excise(x, r.seconds, sr), sr)
    return records


def excise(x, center_s: float, sample_rate: int, width_s: float = 1.0) -> np.ndarray:
    """``width_s`` of audio around ``center_s``, shifted inward at the clip edges."""
    n = int(round(width_s * sample_rate))
    if len(x) <= n:
        return np.asarray(x).copy()
    start = int(round(center_s * sample_rate)) - n // 2
    start = min(max(start, 0), len(x) - n)
    return np.asarray(x[start:start + n]).copy()


@dataclass
class PurityReport:
    histograms: dict[int, Counter]
    purity: dict[int, float]
    landing_rate: float
    landed: int
    total: int
    chance_rate: float = float("nan")

    @property
    def mean_purity(self) -> float:
        vals = [v for v in self.purity.values() if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")


def event_at(events, t: float):
    for kind, on, off in events:
        if on <= t < off:
            return kind
    return None


def alignment_purity(records, events: dict) -> PurityReport:
    """Per head: which ground-truth event types its argmax timestamps land in."""
    if not events:
        raise InputError("alignment purity needs ground-truth events")
    hist: dict[int, Counter] = {}
    landed = 0
    for r in records:
        kind = event_at(events.get(r.clip_id, ()), r.seconds)
        hist.setdefault(r.head, Counter())
        if kind is not None:
            hist[r.head][kind] += 1
            landed += 1
    purity = {h: (max(c.values()) / sum(c.values()) if c else float("nan")) for h, c in sorted(hist.items())}
    total = len(records)
    return PurityReport(hist, purity, landed / total if total else 0.0, landed, total)


def event_coverage(events: dict, clip_ids, duration: float) -> float:
    """Fraction of clip time covered by events: the landing rate of a random pick."""
    covered = sum(off - on for cid in clip_ids for _, on, off in events.get(cid, ()))
    return covered / (duration * len(clip_ids)) if clip_ids else 0.0
