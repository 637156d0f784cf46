"""Joint training loop, learning-rate schedule, model selection, sweeps."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import CheckpointData, load_checkpoint, save_checkpoint
from .data import AugmentPolicy, DatasetIndex, FeatureSource, epoch_sampler, minibatcher, minority_classes
from .errors import ConfigError, NumericError
from .evaluation import evaluate
from .features import FeatureConfig
from .model import ModelConfig, SceneModel

log = logging.getLogger(__name__)

METRICS_FIELDS = ("epoch", "lr", "train_loss", "dev_macro_f1")


@dataclass
class TrainConfig:
    initial_lr: float = 0.001
    lr_decay: float = 0.5
    decay_every: int = 7
    batch_size: int = 16
    eval_period: int = 5
    patience: int = 3
    max_epochs: int = 60
    seed: int = 0
    clip_norm: float = 0.0  # 0 disables clipping
    augment_prob: float = 0.5
    augment_classes: str = "auto"  # auto | none | comma-separated class indices
    augment_segment_s: float = 0.0  # 0: half the clip length
    expand_channels: bool = True
    target_dev_f1: float = 0.0  # stop once dev macro F1 reaches this; 0 disables

    def __post_init__(self):
        for name in ("initial_lr", "batch_size", "eval_period", "patience", "decay_every", "max_epochs"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"train.lr_decay must be in (0, 1], got {self.lr_decay}")
        if not 0 <= self.augment_prob <= 1:
            raise ConfigError(f"train.augment_prob must be in [0, 1], got {self.augment_prob}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.initial_lr * cfg.lr_decay ** (epoch // cfg.decay_every)


# ---------------------------------------------------------------------------
# state <-> checkpoint


@dataclass
class TrainState:
    model: SceneModel
    adam: nx.AdamState
    rng: np.random.Generator
    train_config: TrainConfig
    feature_config: FeatureConfig
    epoch: int = 0  # next epoch to run
    best_dev_f1: float = -1.0
    best_epoch: int = -1
    bad_evals: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, model_config: ModelConfig, train_config: TrainConfig, feature_config=None) -> "TrainState":
        return cls(SceneModel(model_config), nx.AdamState(), np.random.default_rng(train_config.seed),
                   train_config, feature_config or FeatureConfig())


def state_to_checkpoint(st: TrainState) -> CheckpointData:
    m = st.model
    config = {
        "format": "attnscene-checkpoint",
        "model": m.config.to_dict(),
        "features": asdict(st.feature_config),
        "train": asdict(st.train_config),
        "state": {
            "epoch": st.epoch,
            "best_dev_f1": st.best_dev_f1,
            "best_epoch": st.best_epoch,
            "bad_evals": st.bad_evals,
            "adam": {"t": st.adam.t, "beta1": st.adam.beta1, "beta2": st.adam.beta2, "eps": st.adam.eps},
            "rng": st.rng.bit_generator.state,
        },
        "extra": st.extra,
    }
    tensors = {f"param/{n}": m.params[n] for n in m.params.names()}
    for layer, s in m.bn_stats.items():
        tensors[f"bn_mean/{layer}"] = np.asarray(s.mean, dtype=np.float64)
        tensors[f"bn_var/{layer}"] = np.asarray(s.var, dtype=np.float64)
    for n in st.adam.m:
        tensors[f"adam_m/{n}"] = st.adam.m[n]
        tensors[f"adam_v/{n}"] = st.adam.v[n]
    return CheckpointData(config, tensors)


def checkpoint_to_state(ck: CheckpointData) -> TrainState:
    cfg = ck.config
    model = SceneModel(ModelConfig(**cfg["model"]), init=False)
    for key in sorted(ck.tensors):
        kind, name = key.split("/", 1)
        if kind == "param":
            model.params.add(name, ck.tensors[key])
    for layer in {k.split("/", 1)[1] for k in ck.tensors if k.startswith("bn_mean/")}:
        model.bn_stats[layer] = nx.BatchNormStats(ck.tensors[f"bn_mean/{layer}"], ck.tensors[f"bn_var/{layer}"])
    s = cfg["state"]
    adam = nx.AdamState(beta1=s["adam"]["beta1"], beta2=s["adam"]["beta2"], eps=s["adam"]["eps"], t=s["adam"]["t"])
    for key, arr in ck.tensors.items():
        if key.startswith("adam_m/"):
            adam.m[key[7:]] = arr
        elif key.startswith("adam_v/"):
            adam.v[key[7:]] = arr
    rng = np.random.default_rng()
    rng.bit_generator.state = s["rng"]
    return TrainState(model, adam, rng, TrainConfig(**cfg["train"]), FeatureConfig(**cfg["features"]),
                      s["epoch"], s["best_dev_f1"], s["best_epoch"], s["bad_evals"], cfg.get("extra", {}))


def load_model(path) -> SceneModel:
    return checkpoint_to_state(load_checkpoint(path)).model


# ---------------------------------------------------------------------------


def grad_norms(params: nx.ParamStore) -> dict[str, float]:
    return {n: float(np.sqrt(np.sum(np.square(params.grad(n))))) for n in params if params.grad(n) is not None}


def _largest(norms: dict[str, float]) -> str:
    if not norms:
        return "<none>"
    return max(norms, key=lambda n: math.inf if not math.isfinite(norms[n]) else norms[n])


def train_step(model: SceneModel, adam: nx.AdamState, X, y, lr: float, rng, clip_norm: float = 0.0,
               diag: dict | None = None) -> float:
    """Forward, backward and one Adam update on a single batch; returns the loss.

    ``diag`` carries the previous step's per-slot gradient norms so a
    blow-up surfacing in the forward pass can still name the culprit slot.
    """
    diag = {} if diag is None else diag
    try:
        loss = model.loss_and_grad(X, y, train=True, rng=rng)
    except NumericError as exc:
        model.params.zero_grad()
        raise NumericError(f"{exc}; largest gradient norm in the previous step: "
                           f"{_largest(diag.get('norms', {}))}") from exc
    norms = grad_norms(model.params)
    if not math.isfinite(loss) or not all(math.isfinite(v) for v in norms.values()):
        model.params.zero_grad()
        raise NumericError(f"non-finite loss or gradient (loss {loss}); largest gradient norm in slot {_largest(norms)}")
    diag["norms"] = norms
    if clip_norm > 0:
        total = model.params.grad_norm()
        if total > clip_norm:
            model.params.scale_grads(clip_norm / total)
    nx.adam_step(model.params, adam, lr)
    return loss


def augment_policy(index: DatasetIndex, cfg: TrainConfig, source: FeatureSource) -> AugmentPolicy | None:
    spec = cfg.augment_classes.strip().lower()
    if spec == "none" or cfg.augment_prob == 0:
        return None
    if spec == "auto":
        classes = minority_classes(index.counts)
    else:
        try:
            classes = {int(c) for c in spec.split(",") if c.strip()}
        except ValueError as exc:
            raise ConfigError(f"train.augment_classes must be auto, none or class indices; got {spec!r}") from exc
    if not classes:
        return None
    seg = cfg.augment_segment_s
    if seg <= 0:
        ex = index.clips[index.by_class[min(classes)][0]][0]
        seg = source.features(ex).shape[1] * source.config.hop_length / source.config.sample_rate / 2
    return AugmentPolicy(classes, cfg.augment_prob, seg, seg)


@dataclass
class TrainResult:
    best_dev_f1: float
    best_epoch: int
    epochs_run: int
    stopped_early: bool
    out_dir: Path
    history: list[dict]

    @property
    def best_checkpoint(self) -> Path:
        return self.out_dir / "best.ckpt"


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_FIELDS)
        for r in rows:
            f1 = "" if r["dev_macro_f1"] is None else f"{r['dev_macro_f1']:.6f}"
            w.writerow([r["epoch"], f"{r['lr']:.10g}", f"{r['train_loss']:.10f}", f1])


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [{"epoch": int(r["epoch"]), "lr": float(r["lr"]), "train_loss": float(r["train_loss"]),
                 "dev_macro_f1": float(r["dev_macro_f1"]) if r["dev_macro_f1"] else None}
                for r in csv.DictReader(fh)]


def train(train_index: DatasetIndex, dev_index: DatasetIndex, model_config: ModelConfig,
          train_config: TrainConfig, out_dir, source: FeatureSource | None = None,
          resume=None, extra: dict | None = None) -> TrainResult:
    """Balanced-epoch Adam training with periodic dev macro-F1 model selection.

    Writes ``metrics.csv`` (one row per epoch), ``last.ckpt`` after every
    epoch and ``best.ckpt`` whenever dev macro F1 improves. ``resume`` is a
    ``last.ckpt`` to continue from; the continuation is bitwise identical to
    an uninterrupted run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = source or FeatureSource()
    if len(train_index) == 0 or len(dev_index) == 0:
        raise ConfigError("training needs non-empty train and dev splits")
    if resume is not None:
        st = checkpoint_to_state(load_checkpoint(resume))
        cfg = st.train_config
        history = [r for r in read_metrics(out / "metrics.csv") if r["epoch"] < st.epoch] \
            if (out / "metrics.csv").exists() else []
    else:
        st = TrainState.fresh(model_config, train_config, source.config)
        cfg = train_config
        history = []
    st.extra.update(extra or {})
    policy = augment_policy(train_index, cfg, source)
    stopped = False
    start = time.perf_counter()
    while st.epoch < cfg.max_epochs:
        epoch = st.epoch
        lr = lr_at(epoch, cfg)
        examples = epoch_sampler(train_index, st.rng, cfg.expand_channels)
        losses, diag = [], {}
        for b, batch in enumerate(minibatcher(examples, cfg.batch_size, source, st.rng, policy, train_index)):
            try:
                loss = train_step(st.model, st.adam, batch.X, batch.y, lr, st.rng, cfg.clip_norm, diag)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b} ({batch.ids[0]}...): {exc}") from exc
            losses.append(loss * len(batch.y))
        train_loss = float(sum(losses) / len(examples))
        dev_f1 = None
        if (epoch + 1) % cfg.eval_period == 0:
            dev_f1 = evaluate(dev_index, st.model, source).macro_f1
            if dev_f1 > st.best_dev_f1:
                st.best_dev_f1, st.best_epoch, st.bad_evals = dev_f1, epoch, 0
                st.epoch = epoch + 1
                save_checkpoint(state_to_checkpoint(st), out / "best.ckpt")
            else:
                st.bad_evals += 1
        st.epoch = epoch + 1
        # elapsed seconds are kept in memory only: the CSV must stay reproducible
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "dev_macro_f1": dev_f1,
                        "elapsed": time.perf_counter() - start})
        _write_metrics(out / "metrics.csv", history)
        save_checkpoint(state_to_checkpoint(st), out / "last.ckpt")
        log.info("epoch %d lr %.3g loss %.4f dev_f1 %s", epoch, lr, train_loss,
                 "-" if dev_f1 is None else f"{dev_f1:.4f}")
        if st.bad_evals >= cfg.patience or (cfg.target_dev_f1 > 0 and dev_f1 is not None
                                            and dev_f1 >= cfg.target_dev_f1):
            stopped = True
            break
    if not (out / "best.ckpt").exists():
        st.best_dev_f1 = evaluate(dev_index, st.model, source).macro_f1
        st.best_epoch = st.epoch - 1
        save_checkpoint(state_to_checkpoint(st), out / "best.ckpt")
    return TrainResult(st.best_dev_f1, st.best_epoch, st.epoch, stopped, out, history)


# ---------------------------------------------------------------------------


SWEEP_FIELDS = ("sweep", "M", "sigma", "dev_macro_f1")


def hyper_sweep(train_index: DatasetIndex, dev_index: DatasetIndex, model_config: ModelConfig,
                train_config: TrainConfig, M_values, sigma_values, out_dir,
                fixed_sigma: float = 0.2, fixed_M: int = 9, source: FeatureSource | None = None) -> list[dict]:
    """Two one-dimensional sweeps: M at ``fixed_sigma``, then sigma at ``fixed_M``.

    One model is trained per distinct (M, sigma); a cell shared by both sweeps
    is trained once. Failed cells are logged and left out of the table.
    Writes ``sweep.csv`` under ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = source or FeatureSource()
    cells = [("M", int(m), float(fixed_sigma)) for m in M_values]
    cells += [("sigma", int(fixed_M), float(s)) for s in sigma_values]
    results: dict[tuple, float | None] = {}
    rows = []
    for sweep, M, sigma in cells:
        if (M, sigma) not in results:
            cfg = ModelConfig(**{**model_config.to_dict(), "n_heads": M, "sigma": sigma})
            try:
                res = train(train_index, dev_index, cfg, train_config, out / f"M{M}_sigma{sigma:g}", source)
                results[(M, sigma)] = res.best_dev_f1
            except Exception as exc:  # one bad cell must not end the sweep
                log.error("sweep cell M=%d sigma=%g failed: %s", M, sigma, exc)
                results[(M, sigma)] = None
        if results[(M, sigma)] is not None:
            rows.append({"sweep": sweep, "M": M, "sigma": sigma, "dev_macro_f1": results[(M, sigma)]})
    with (out / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for r in rows:
            w.writerow([r["sweep"], r["M"], f"{r['sigma']:g}", f"{r['dev_macro_f1']:.6f}"])
    return rows


# ---------------------------------------------------------------------------


def model_gradcheck(model: SceneModel, X, y, seed: int = 0, epsilon: float = 1e-6, tolerance: float = 1e-4,
                    max_coords: int | None = 12, corrupt: str | None = None,
                    retry_epsilon: float | None = 1e-7) -> nx.GradCheckReport:
    """Finite-difference check of every parameter slot of ``model``.

    The model is run in float64 in train mode with dropout masks pinned to
    ``seed`` and batch-norm running statistics frozen, so the loss is a pure
    function of the parameters. ``corrupt`` names a slot whose analytic
    gradient is deliberately perturbed (a hook for testing the checker).
    """
    m = model.astype("float64")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    m.loss_and_grad(X, y, train=True, rng=np.random.default_rng(seed), update_stats=False)
    grads = {n: m.params.grad(n).copy() for n in m.params}
    m.params.zero_grad()
    if corrupt is not None:
        if corrupt not in grads:
            raise ConfigError(f"unknown parameter slot {corrupt!r}")
        grads[corrupt] = grads[corrupt] * 1.5 + 1e-3

    def loss_fn():
        # the final reduction runs in extended precision: a float64 loss of
        # about ln(N) carries ~4e-16 of rounding, which would swamp the
        # central difference of slots whose gradient is ~1e-7
        z = m.forward(X, train=True, rng=np.random.default_rng(seed), update_stats=False).prediction.logits
        z = z.astype(np.longdouble)
        top = z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z - top).sum(axis=1)) + top[:, 0]
        return np.mean(lse - z[np.arange(len(y)), y])

    return nx.finite_diff_check(loss_fn, m.params, grads, epsilon, tolerance, max_coords,
                                np.random.default_rng(seed), retry_epsilon)
