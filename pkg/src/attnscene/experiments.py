"""End-to-end experiment drivers shared by the scripts and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import FeatureSource, load_split
from .evaluation import PurityReport, alignment_purity, evaluate, event_coverage, export_alignments
from .model import ModelConfig
from .synth import EVENT_TYPES, SynthConfig, synth_corpus
from .training import TrainConfig, TrainResult, hyper_sweep, load_model, train

log = logging.getLogger(__name__)


def reference_corpus_config(seed: int = 0) -> SynthConfig:
    """The default synthetic corpus."""
    return SynthConfig(seed=seed)


def sweep_corpus_config(seed: int = 0) -> SynthConfig:
    """Four characteristic event types per class, drawn from all eight prototypes."""
    return SynthConfig(vocabulary=EVENT_TYPES, events_per_class=4, events_per_clip=(4, 5), event_seconds=(0.25, 0.5),
                       clip_seconds=5.0, n_train=270, n_dev=54, n_eval=9, seed=seed)


def converged_config(**kw) -> TrainConfig:
    """The default recipe, stopping early once dev macro F1 is perfect (nothing left to select on)."""
    return TrainConfig(**{"target_dev_f1": 1.0, **kw})


def budget_config(**kw) -> TrainConfig:
    """``converged_config`` with a bounded epoch budget, for the many-run sweeps."""
    return converged_config(**{"max_epochs": 20, **kw})


def ensure_corpus(cfg: SynthConfig, out_dir) -> Path:
    """Synthesize ``cfg`` into ``out_dir`` unless a corpus is already there."""
    out = Path(out_dir)
    if not (out / "eval" / "manifest.csv").exists():
        synth_corpus(cfg, out)
    return out


@dataclass
class RunSummary:
    result: TrainResult
    wall_seconds: float
    seconds_to_target: float | None
    epoch_reached: int | None
    eval_macro_f1: float


def run_once(corpus, out_dir, model_config: ModelConfig, train_config: TrainConfig,
             target: float | None = None, cache_dir=None) -> RunSummary:
    """Train on ``corpus`` train/dev, evaluate the best checkpoint on eval."""
    tr, dev, ev = (load_split(corpus, s, model_config.n_classes) for s in ("train", "dev", "eval"))
    source = FeatureSource(cache_dir=cache_dir)
    t0 = time.perf_counter()
    res = train(tr.index, dev.index, model_config, train_config, out_dir, source)
    wall = time.perf_counter() - t0
    hit = next((r for r in res.history if target is not None and r["dev_macro_f1"] is not None
                and r["dev_macro_f1"] >= target), None)
    best = load_model(res.best_checkpoint)
    f1 = evaluate(ev.index, best, source).macro_f1
    return RunSummary(res, wall, hit["elapsed"] if hit else None, hit["epoch"] if hit else None, f1)


def alignment_report(checkpoint, corpus, out_dir, split: str = "eval") -> PurityReport:
    """Export argmax alignments of ``checkpoint`` and score them against the ground-truth events."""
    model = load_model(checkpoint)
    sp = load_split(corpus, split, model.config.n_classes)
    source = FeatureSource()
    records = export_alignments(sp.index, model, source, out_dir)
    report = alignment_purity(records, sp.events)
    first = sp.index.clips[sorted(sp.index.clips)[0]][0]
    duration = len(source.waveform(first)) / source.config.sample_rate
    report.chance_rate = event_coverage(sp.events, sorted(sp.index.clips), duration)
    return report


def ablation(corpus, out_dir, seeds, train_config: TrainConfig, model_config: ModelConfig | None = None,
             done: dict | None = None):
    """Eval macro F1 of attention and max-pool pooling per seed: ``{mode: [f1, ...]}``.

    ``done`` maps ``(mode, seed)`` to the summary of a run already trained with the same
    configs, which is reused instead of retrained.
    """
    base = model_config or ModelConfig.toy()
    done = done or {}
    scores: dict[str, list[float]] = {"attention": [], "maxpool": []}
    for seed in seeds:
        for mode in scores:
            run = done.get((mode, seed)) or run_once(corpus, Path(out_dir) / f"{mode}_seed{seed}", replace(base, pooling_mode=mode, seed=seed),
                           replace(train_config, seed=seed))
            log.info("ablation %s seed %d: eval macro F1 %.4f", mode, seed, run.eval_macro_f1)
            scores[mode].append(run.eval_macro_f1)
    return scores


def head_count_sweep(corpus, out_dir, seeds, M_values, train_config: TrainConfig, sigma: float = 0.2,
                     model_config: ModelConfig | None = None):
    """Dev macro F1 per M (at fixed sigma) per seed: ``{M: [f1, ...]}``, via ``hyper_sweep``."""
    tr, dev = (load_split(corpus, s) for s in ("train", "dev"))
    base = model_config or ModelConfig.toy()
    scores: dict[int, list[float]] = {int(m): [] for m in M_values}
    for seed in seeds:
        rows = hyper_sweep(tr.index, dev.index, replace(base, seed=seed), replace(train_config, seed=seed),
                           M_values, [], Path(out_dir) / f"seed{seed}", fixed_sigma=sigma)
        for r in rows:
            scores[r["M"]].append(r["dev_macro_f1"])
    return scores


def summary_line(name: str, passed: bool, detail: str) -> str:
    return f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"


def mean(values) -> float:
    return float(np.mean(values)) if len(values) else float("nan")
