"""Conv + BiLSTM feature extractor, multi-head attention pooling, classifier.

The network maps a log-Mel matrix ``(n_mels, T')`` to class probabilities:

    X -> [conv-bn-relu ... maxpool] x blocks -> flatten per time step
      -> BiLSTM -> H (T, p) -> pool (attention heads or time max) -> s
      -> dropout -> [linear-relu-dropout] x hidden -> linear -> softmax

Batches are handled throughout; single examples are batches of one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import DimensionError, ParameterError

FULL_CONV_BLOCKS = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))
FULL_POOLS = ((2, 2), (2, 2), (2, 2), (2, 1), (2, 1))


@dataclass
class ModelConfig:
    profile: str = "toy"
    n_mels: int = 64
    conv_blocks: tuple = ((16,), (32,))
    pools: tuple = ((2, 2), (2, 2))  # (freq, time) window == stride
    lstm_hidden: int = 32
    n_heads: int = 9
    sigma: float = 0.2
    classifier_hidden: tuple = (64, 64)
    n_classes: int = 9
    dropout_s: float = 0.3
    dropout_hidden: float = 0.3
    pooling_mode: str = "attention"  # attention | maxpool
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    forget_bias: float = 1.0
    flatten_order: str = "freq_major"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.conv_blocks = tuple(tuple(int(f) for f in b) for b in self.conv_blocks)
        self.pools = tuple(tuple(int(v) for v in p) for p in self.pools)
        self.classifier_hidden = tuple(int(h) for h in self.classifier_hidden)
        self.validate()

    def validate(self):
        if self.profile not in ("toy", "full", "custom"):
            raise ParameterError(f"unknown profile {self.profile!r}")
        if self.n_heads < 1:
            raise ParameterError(f"n_heads must be >= 1, got {self.n_heads}")
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be > 0, got {self.sigma}")
        if self.n_classes < 2:
            raise ParameterError(f"n_classes must be >= 2, got {self.n_classes}")
        if len(self.conv_blocks) != len(self.pools):
            raise ParameterError("conv_blocks and pools must have the same length")
        if self.pooling_mode not in ("attention", "maxpool"):
            raise ParameterError(f"pooling_mode must be attention or maxpool, got {self.pooling_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for r in (self.dropout_s, self.dropout_hidden):
            if not 0 <= r < 1:
                raise ParameterError(f"dropout rate must be in [0, 1), got {r}")

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        base = dict(profile="full", conv_blocks=FULL_CONV_BLOCKS, pools=FULL_POOLS,
                    lstm_hidden=256, classifier_hidden=(512, 512))
        base.update(kw)
        return cls(**base)

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @property
    def feature_dim(self) -> int:
        """p, the width of each BiLSTM output frame."""
        return 2 * self.lstm_hidden

    @property
    def utterance_dim(self) -> int:
        return self.n_heads * self.feature_dim if self.pooling_mode == "attention" else self.feature_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [list(b) for b in self.conv_blocks]
        d["pools"] = [list(p) for p in self.pools]
        d["classifier_hidden"] = list(self.classifier_hidden)
        return d


@dataclass
class AttentionOutput:
    scores: np.ndarray  # (B, M, T), or (M, T) for a single sequence
    summaries: np.ndarray  # (B, M, p), or (M, p)

    @property
    def utterance(self) -> np.ndarray:
        return self.summaries.reshape(*self.summaries.shape[:-2], -1)


@dataclass
class Prediction:
    logits: np.ndarray
    probs: np.ndarray

    @property
    def label(self):
        return self.probs.argmax(axis=-1)


@dataclass
class ForwardResult:
    prediction: Prediction
    features: np.ndarray  # H, (B, T, p)
    utterance: np.ndarray  # s, (B, M*p) or (B, p)
    attention: AttentionOutput | None = None


# ---------------------------------------------------------------------------
# pooling and classification ops on plain arrays


def attention_scores(H, v, sigma):
    """Softmax over time of ``h_t . v / sigma``; ``H`` is ``(T, p)`` or ``(B, T, p)``."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    H = np.asarray(H)
    v = np.asarray(v)
    if H.shape[-1] != v.shape[-1]:
        raise DimensionError(f"frame dim {H.shape[-1]} != head dim {v.shape[-1]}")
    return nx.softmax(H @ v, temperature=sigma, axis=-1)


def summarize_head(H, scores):
    H = np.asarray(H)
    scores = np.asarray(scores)
    if scores.shape[-1] != H.shape[-2]:
        raise DimensionError(f"{scores.shape[-1]} scores for {H.shape[-2]} frames")
    return np.einsum("...t,...tp->...p", scores, H)


def pool_attention(H, V, sigma) -> AttentionOutput:
    """All heads at once. ``H`` is ``(B, T, p)``, ``V`` is ``(M, p)``."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    H = np.asarray(H)
    single = H.ndim == 2
    if single:
        H = H[None]
    if H.shape[-1] != V.shape[-1]:
        raise DimensionError(f"frame dim {H.shape[-1]} != head dim {V.shape[-1]}")
    logits = np.einsum("btp,mp->bmt", H, V.astype(H.dtype))
    A = nx.softmax(logits, temperature=sigma, axis=-1)
    S = A @ H
    if single:
        return AttentionOutput(A[0], S[0])
    return AttentionOutput(A, S)


def pool_attention_backward(dS, H, V, A, sigma):
    """Gradients of ``S = softmax(H V^T / sigma) H`` w.r.t. ``H`` and ``V``."""
    dA = dS @ H.transpose(0, 2, 1)
    dH = A.transpose(0, 2, 1) @ dS
    dlogits = nx.softmax_backward(dA, A, temperature=sigma)  # (B, M, T)
    dH += dlogits.transpose(0, 2, 1) @ V.astype(H.dtype)
    dV = (dlogits @ H).sum(axis=0)
    return dH, dV


def pool_max(H):
    H = np.asarray(H)
    if H.shape[-2] == 0:
        raise DimensionError("pool_max on an empty sequence")
    return H.max(axis=-2)


# ---------------------------------------------------------------------------


class SceneModel:
    """Parameters, batch-norm statistics and the forward/backward passes.

    ``forward`` records backward closures on ``self._tape`` (when asked to);
    ``backward`` replays them in reverse and accumulates into ``self.params``.
    """

    def __init__(self, config: ModelConfig, init: bool = True):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.params = nx.ParamStore()
        self.bn_stats: dict[str, nx.BatchNormStats] = {}
        self._tape: list[Callable] = []
        self._need_input_grad = False
        if init:
            self._init_params()

    # -- construction ------------------------------------------------------

    def conv_layer_names(self):
        for b, filters in enumerate(self.config.conv_blocks, start=1):
            for k in range(1, len(filters) + 1):
                yield b, k, f"conv{b}_{k}"

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        dt = self.dtype

        def uniform(shape, fan_in):
            k = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-k, k, size=shape).astype(dt)

        c_in = 1
        for b, filters in enumerate(cfg.conv_blocks, start=1):
            for k, c_out in enumerate(filters, start=1):
                name = f"conv{b}_{k}"
                self.params.add(f"{name}.weight", uniform((c_out, c_in, 3, 3), c_in * 9))
                self.params.add(f"{name}.bn_gamma", np.ones(c_out, dtype=dt))
                self.params.add(f"{name}.bn_beta", np.zeros(c_out, dtype=dt))
                self.bn_stats[name] = nx.BatchNormStats.initial(c_out)
                c_in = c_out
        q = self.conv_out_freq() * c_in
        h = cfg.lstm_hidden
        for d in ("fwd", "bwd"):
            self.params.add(f"lstm.{d}.Wx", uniform((q, 4 * h), q))
            self.params.add(f"lstm.{d}.Wh", uniform((h, 4 * h), h))
            bias = np.zeros(4 * h, dtype=dt)
            bias[h:2 * h] = cfg.forget_bias
            self.params.add(f"lstm.{d}.b", bias)
        p = cfg.feature_dim
        if cfg.pooling_mode == "attention":
            heads = [np.random.default_rng([cfg.seed, 7919, i]).normal(0.0, 1.0 / np.sqrt(p), size=p)
                     for i in range(cfg.n_heads)]
            self.params.add("attention.V", np.stack(heads).astype(dt))
        width = cfg.utterance_dim
        for j, hidden in enumerate(cfg.classifier_hidden, start=1):
            self.params.add(f"fc{j}.weight", uniform((hidden, width), width))
            self.params.add(f"fc{j}.bias", np.zeros(hidden, dtype=dt))
            width = hidden
        self.params.add("out.weight", uniform((cfg.n_classes, width), width))
        self.params.add("out.bias", np.zeros(cfg.n_classes, dtype=dt))

    def conv_out_freq(self) -> int:
        f = self.config.n_mels
        for ph, _ in self.config.pools:
            f //= ph
        return f

    def time_steps(self, n_frames: int) -> int:
        t = n_frames
        for _, pt in self.config.pools:
            t //= pt
        return t

    def shape_trace(self, n_frames: int) -> list[tuple[str, tuple]]:
        """Data shapes ``(freq, time, channels)`` after each pooling stage, by arithmetic."""
        f, t = self.config.n_mels, n_frames
        rows = [("input", (f, t))]
        for b, (filters, (ph, pt)) in enumerate(zip(self.config.conv_blocks, self.config.pools), start=1):
            f, t = f // ph, t // pt
            rows.append((f"pool{b}", (f, t, filters[-1])))
        return rows

    # -- forward -----------------------------------------------------------

    def _record(self, fn, record):
        if record:
            self._tape.append(fn)

    def extract_features(self, X, train=False, record=False, update_stats=True, trace=None):
        """Conv stack + BiLSTM: ``(B, n_mels, T')`` -> ``(B, T, p)``."""
        cfg = self.config
        X = np.asarray(X, dtype=self.dtype)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3 or X.shape[1] != cfg.n_mels:
            raise DimensionError(f"expected input (B, {cfg.n_mels}, T'), got {X.shape}")
        min_frames = int(np.prod([pt for _, pt in cfg.pools]))
        if X.shape[2] < min_frames:
            raise DimensionError(f"input has {X.shape[2]} frames; profile needs at least {min_frames}")
        a = X[..., None]  # (B, F, T, 1)
        for b, filters in enumerate(cfg.conv_blocks, start=1):
            for k in range(1, len(filters) + 1):
                name = f"conv{b}_{k}"
                a = self._conv_bn_relu(a, name, train, record, update_stats)
            a, pcache = nx.maxpool2d(a, cfg.pools[b - 1])
            self._record(lambda d, c=pcache: nx.maxpool2d_backward(d, c), record)
            if trace is not None:
                trace.append((f"pool{b}", (a.shape[1], a.shape[2], a.shape[3])))
        B, F, T, C = a.shape
        seq = a.transpose(0, 2, 1, 3).reshape(B, T, F * C)  # frequency-major per step
        self._record(lambda d: d.reshape(B, T, F, C).transpose(0, 2, 1, 3), record)
        p = self.params
        H, lcache = nx.bilstm(seq, (p["lstm.fwd.Wx"], p["lstm.fwd.Wh"], p["lstm.fwd.b"]),
                              (p["lstm.bwd.Wx"], p["lstm.bwd.Wh"], p["lstm.bwd.b"]))

        def lstm_back(d, c=lcache):
            dx, gf, gb = nx.bilstm_backward(d, c)
            for d_name, grads in (("fwd", gf), ("bwd", gb)):
                for slot, g in zip(("Wx", "Wh", "b"), grads):
                    self.params.accumulate(f"lstm.{d_name}.{slot}", g)
            return dx

        self._record(lstm_back, record)
        return nx.check_finite(H, "bilstm")

    def _conv_bn_relu(self, a, name, train, record, update_stats):
        p = self.params
        z, ccache = nx.conv2d(a, p[f"{name}.weight"].astype(self.dtype))
        out, bcache = nx.batchnorm(z, p[f"{name}.bn_gamma"], p[f"{name}.bn_beta"], self.bn_stats[name],
                                   train, self.config.bn_momentum, self.config.bn_eps, update_stats, relu=True)
        nx.check_finite(out, name)
        first = name == "conv1_1"

        def back(d):
            d, dgamma, dbeta = nx.batchnorm_backward(d, bcache)
            self.params.accumulate(f"{name}.bn_gamma", dgamma)
            self.params.accumulate(f"{name}.bn_beta", dbeta)
            dx, dw = nx.conv2d_backward(d, ccache, need_input_grad=self._need_input_grad or not first)
            self.params.accumulate(f"{name}.weight", dw)
            return dx

        self._record(back, record)
        return out

    def pool(self, H, record=False):
        cfg = self.config
        if cfg.pooling_mode == "attention":
            V = self.params["attention.V"]
            att = pool_attention(H, V, cfg.sigma)
            B = H.shape[0]

            def back(d):
                dS = d.reshape(att.summaries.shape)
                dH, dV = pool_attention_backward(dS, H, V, att.scores, cfg.sigma)
                self.params.accumulate("attention.V", dV)
                return dH

            self._record(back, record)
            return att.utterance.reshape(B, -1), att
        idx = H.argmax(axis=1)
        s = np.take_along_axis(H, idx[:, None, :], axis=1)[:, 0]

        def back_max(d):
            dH = np.zeros_like(H)
            np.put_along_axis(dH, idx[:, None, :], d[:, None, :], axis=1)
            return dH

        self._record(back_max, record)
        return s, None

    def classify(self, s, train=False, rng=None, record=False) -> Prediction:
        cfg = self.config
        s = np.asarray(s, dtype=self.dtype)
        if s.ndim == 1:
            s = s[None]
        if s.shape[-1] != cfg.utterance_dim:
            raise DimensionError(f"utterance vector has {s.shape[-1]} dims, classifier expects {cfg.utterance_dim}")
        a, mask = nx.dropout(s, cfg.dropout_s, train, rng)
        self._record(lambda d, m=mask: d if m is None else d * m, record)
        for j in range(1, len(cfg.classifier_hidden) + 1):
            a = self._linear(a, f"fc{j}", record)
            pre = a
            a = np.maximum(pre, 0)
            self._record(lambda d, z=pre: d * (z > 0), record)
            a, mask = nx.dropout(a, cfg.dropout_hidden, train, rng)
            self._record(lambda d, m=mask: d if m is None else d * m, record)
        logits = nx.check_finite(self._linear(a, "out", record), "classifier")
        return Prediction(logits, nx.softmax(logits.astype(np.float64), axis=-1))

    def _linear(self, a, name, record):
        W, b = self.params[f"{name}.weight"], self.params[f"{name}.bias"]
        out = a @ W.T.astype(a.dtype) + b.astype(a.dtype)

        def back(d, a=a, W=W):
            self.params.accumulate(f"{name}.weight", d.T @ a)
            self.params.accumulate(f"{name}.bias", d.sum(axis=0, dtype=np.float64))
            return d @ W.astype(d.dtype)

        self._record(back, record)
        return out

    def forward(self, X, train=False, rng=None, record=False, update_stats=True) -> ForwardResult:
        if record:
            self._tape = []
        H = self.extract_features(X, train, record, update_stats)
        s, att = self.pool(H, record)
        pred = self.classify(s, train, rng, record)
        return ForwardResult(pred, H, s, att)

    def backward(self, dlogits, input_grad: bool = False):
        """Reverse-mode sweep of the recorded tape.

        Returns the gradient w.r.t. the input features when ``input_grad``,
        otherwise None (the first conv then skips that work).
        """
        if not self._tape:
            raise RuntimeError("backward called without a recorded forward pass")
        self._need_input_grad = input_grad
        d = np.asarray(dlogits, dtype=self.dtype)
        for fn in reversed(self._tape):
            d = fn(d)
            if d is None:
                break
        self._tape = []
        return d[..., 0] if input_grad else None

    def loss_and_grad(self, X, y, train=True, rng=None, update_stats=True) -> float:
        res = self.forward(X, train=train, rng=rng, record=True, update_stats=update_stats)
        loss, _, dlogits = nx.softmax_cross_entropy(res.prediction.logits, y)
        self.backward(dlogits)
        return loss

    def loss(self, X, y, train=True, rng=None, update_stats=False) -> float:
        res = self.forward(X, train=train, rng=rng, update_stats=update_stats)
        return nx.softmax_cross_entropy(res.prediction.logits, y)[0]

    def predict(self, X) -> ForwardResult:
        return self.forward(X, train=False)

    def astype(self, dtype: str) -> "SceneModel":
        """A copy of this model whose parameters and compute use ``dtype``."""
        cfg = ModelConfig(**{**self.config.to_dict(), "dtype": dtype})
        other = SceneModel(cfg, init=False)
        for name in self.params.names():
            other.params.add(name, self.params[name].astype(dtype))
        other.bn_stats = {k: nx.BatchNormStats(v.mean.copy(), v.var.copy()) for k, v in self.bn_stats.items()}
        return other
