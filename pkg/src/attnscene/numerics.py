"""Dense array ops with hand-written reverse-mode gradients, plus Adam.

Every differentiable op comes as a pair: a forward function returning
``(output, cache)`` and a ``*_backward(dout, cache)`` function returning the
input gradient and, where relevant, the parameter gradients. Higher level
code records backward closures on a tape and replays them in reverse.

Image-like activations are channels-last ``(B, H, W, C)``; kernels keep the
conventional ``(C_out, C_in, kh, kw)`` layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import _kernels as _k
from .errors import ConsistencyError, DimensionError, NumericError, ParameterError

# below this many input channels the fused loop beats shifted BLAS products
_SMALL_CHANNELS = 4


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values produced by {where}")
    return x


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, kernel, stride=(1, 1), padding=None):
    """2-D cross-correlation of a channels-last batch with zero padding.

    ``padding=None`` means ``(kh // 2, kw // 2)``, i.e. "same" output size for
    odd kernels at stride 1.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects input (B,H,W,C) and kernel (O,C,kh,kw), got {x.shape} and {kernel.shape}")
    B, H, W, C = x.shape
    O, Ci, kh, kw = kernel.shape
    if Ci != C:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ParameterError(f"stride must be >= 1, got {(sh, sw)}")
    ph, pw = (kh // 2, kw // 2) if padding is None else _pair(padding)
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if kh > Hp or kw > Wp:
        raise DimensionError(f"kernel {kernel.shape} larger than padded input {(Hp, Wp)} (input {x.shape})")
    Ho, Wo = (Hp - kh) // sh + 1, (Wp - kw) // sw + 1

    dtype = np.result_type(x, kernel)
    xp = np.pad(x.astype(dtype, copy=False), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    wt = np.ascontiguousarray(kernel.transpose(2, 3, 1, 0), dtype=dtype)  # kh, kw, C, O
    if C <= _SMALL_CHANNELS:
        out = np.empty((B, Ho, Wo, O), dtype=dtype)
        _k.conv_fwd(xp, wt, sh, sw, out)
    else:
        out = np.zeros((B, Ho, Wo, O), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                out += xp[:, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw, :] @ wt[i, j]
    return out, (xp, wt, (H, W), (ph, pw), (sh, sw))


def conv2d_backward(dout, cache, need_input_grad=True):
    """Returns ``(dx, dkernel)``; ``dx`` is None when not requested."""
    xp, wt, (H, W), (ph, pw), (sh, sw) = cache
    kh, kw, C, O = wt.shape
    B, Ho, Wo, _ = dout.shape
    dout = np.ascontiguousarray(dout, dtype=xp.dtype)
    if C <= _SMALL_CHANNELS:
        dwt = np.empty(wt.shape)
        dxp = np.zeros_like(xp) if need_input_grad else np.zeros((1, 1, 1, 1), xp.dtype)
        _k.conv_bwd(xp, wt, dout, sh, sw, dwt, dxp, need_input_grad)
    else:
        dxp = np.zeros_like(xp) if need_input_grad else None
        dwt = np.empty(wt.shape)
        dflat = dout.reshape(-1, O)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + sh * (Ho - 1) + 1, sh)
                cols = slice(j, j + sw * (Wo - 1) + 1, sw)
                dwt[i, j] = xp[:, rows, cols, :].reshape(-1, C).T @ dflat
                if need_input_grad:
                    dxp[:, rows, cols, :] += dout @ wt[i, j].T
    dx = dxp[:, ph:ph + H, pw:pw + W, :] if need_input_grad else None
    return dx, dwt.transpose(3, 2, 0, 1)


# ---------------------------------------------------------------------------
# pooling


def maxpool2d(x, window=(2, 2), stride=None):
    """Max pooling over ``(H, W)``; output extents are floor-divided.

    Ties go to the first element of the window in row-major scan order.
    """
    B, H, W, C = x.shape
    wh, ww = _pair(window)
    sh, sw = _pair(window if stride is None else stride)
    if wh > H or ww > W:
        raise DimensionError(f"pool window {(wh, ww)} larger than input {(H, W)}")
    Ho, Wo = (H - wh) // sh + 1, (W - ww) // sw + 1
    x = np.ascontiguousarray(x)
    out = np.empty((B, Ho, Wo, C), dtype=x.dtype)
    idx = np.empty((B, Ho, Wo, C), dtype=np.int32)
    _k.maxpool_fwd(x, wh, ww, sh, sw, out, idx)
    return out, (x.shape, idx, (wh, ww), (sh, sw))


def maxpool2d_backward(dout, cache):
    shape, idx, (wh, ww), (sh, sw) = cache
    dx = np.zeros(shape, dtype=dout.dtype)
    _k.maxpool_bwd(np.ascontiguousarray(dout), idx, ww, sh, sw, dx)
    return dx


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels: int) -> "BatchNormStats":
        return cls(np.zeros(channels), np.ones(channels))


def batchnorm(x, gamma, beta, stats: BatchNormStats, train: bool,
              momentum: float = 0.1, eps: float = 1e-5, update_stats: bool = True,
              relu: bool = False):
    """Per-channel normalisation over every axis but the last.

    In train mode the batch statistics are used and, if ``update_stats``,
    blended into ``stats`` with weight ``momentum``. Eval mode uses ``stats``.
    ``relu=True`` fuses a ReLU onto the output.
    """
    C = x.shape[-1]
    x2 = np.ascontiguousarray(x).reshape(-1, C)
    if train:
        mean, var = _k.channel_stats(x2)
        if update_stats:
            stats.mean = (1 - momentum) * stats.mean + momentum * mean
            stats.var = (1 - momentum) * stats.var + momentum * var
    else:
        mean, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = np.empty_like(x2)
    y = np.empty_like(x2)
    _k.bn_fwd(x2, mean.astype(x2.dtype), inv_std.astype(x2.dtype), np.asarray(gamma, x2.dtype),
              np.asarray(beta, x2.dtype), relu, xhat, y)
    return y.reshape(x.shape), (xhat, y, inv_std, np.asarray(gamma, np.float64), train, relu)


def batchnorm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``; the fused ReLU (if any) is included."""
    xhat, y, inv_std, gamma, train, relu = cache
    shape = dout.shape
    d2 = np.ascontiguousarray(dout, dtype=xhat.dtype).reshape(xhat.shape)
    dx = np.empty_like(xhat)
    dgamma, dbeta = _k.bn_bwd(d2, y, xhat, gamma, inv_std, relu, train, dx)
    return dx.reshape(shape), dgamma, dbeta


# ---------------------------------------------------------------------------
# recurrent


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm(x, Wx, Wh, b):
    """Unidirectional LSTM over ``x`` of shape ``(B, T, q)``.

    Gate blocks along the last axis of ``Wx``/``Wh``/``b`` are ordered
    input, forget, candidate, output. Initial state is zero.
    """
    B, T, _ = x.shape
    hid = Wh.shape[0]
    xz = x @ Wx + b.astype(x.dtype)
    h = np.zeros((B, hid), dtype=xz.dtype)
    c = np.zeros((B, hid), dtype=xz.dtype)
    hs = np.empty((B, T, hid), dtype=xz.dtype)
    gates = np.empty((T, B, 4 * hid), dtype=xz.dtype)
    cs = np.empty((T + 1, B, hid), dtype=xz.dtype)
    cs[0] = c
    for t in range(T):
        z = xz[:, t] + h @ Wh
        g = np.empty_like(z)
        g[:, :2 * hid] = _sigmoid(z[:, :2 * hid])
        g[:, 2 * hid:3 * hid] = np.tanh(z[:, 2 * hid:3 * hid])
        g[:, 3 * hid:] = _sigmoid(z[:, 3 * hid:])
        c = g[:, hid:2 * hid] * c + g[:, :hid] * g[:, 2 * hid:3 * hid]
        h = g[:, 3 * hid:] * np.tanh(c)
        gates[t] = g
        cs[t + 1] = c
        hs[:, t] = h
    return hs, (x, Wx, Wh, gates, cs, hs)


def lstm_backward(dhs, cache):
    x, Wx, Wh, gates, cs, hs = cache
    B, T, _ = x.shape
    hid = Wh.shape[0]
    dz_all = np.empty((B, T, 4 * hid), dtype=dhs.dtype)
    dh_next = np.zeros((B, hid), dtype=dhs.dtype)
    dc_next = np.zeros((B, hid), dtype=dhs.dtype)
    for t in range(T - 1, -1, -1):
        g = gates[t]
        i, f, gg, o = g[:, :hid], g[:, hid:2 * hid], g[:, 2 * hid:3 * hid], g[:, 3 * hid:]
        tc = np.tanh(cs[t + 1])
        dh = dhs[:, t] + dh_next
        dc = dc_next + dh * o * (1 - tc * tc)
        dz = dz_all[:, t]
        dz[:, :hid] = dc * gg * i * (1 - i)
        dz[:, hid:2 * hid] = dc * cs[t] * f * (1 - f)
        dz[:, 2 * hid:3 * hid] = dc * i * (1 - gg * gg)
        dz[:, 3 * hid:] = dh * tc * o * (1 - o)
        dc_next = dc * f
        dh_next = dz @ Wh.T
    h_prev = np.concatenate([np.zeros((B, 1, hid), dtype=hs.dtype), hs[:, :-1]], axis=1)
    dzf = dz_all.reshape(B * T, -1)
    dWx = x.reshape(B * T, -1).T @ dzf
    dWh = h_prev.reshape(B * T, -1).T @ dzf
    db = dzf.sum(axis=0, dtype=np.float64)
    dx = dz_all @ Wx.T
    return dx, dWx, dWh, db


def bilstm(x, fwd, bwd):
    """Bidirectional LSTM; ``fwd``/``bwd`` are ``(Wx, Wh, b)`` triples.

    Returns ``(B, T, 2*hidden)`` with forward states first.
    """
    if x.shape[1] == 0:
        raise DimensionError("bilstm received an empty sequence (T = 0)")
    hf, cf = lstm(x, *fwd)
    hb, cb = lstm(np.ascontiguousarray(x[:, ::-1]), *bwd)
    return np.concatenate([hf, hb[:, ::-1]], axis=-1), (cf, cb)


def bilstm_backward(dout, cache):
    cf, cb = cache
    hid = cf[2].shape[0]
    dxf, *gf = lstm_backward(dout[:, :, :hid], cf)
    dxb, *gb = lstm_backward(np.ascontiguousarray(dout[:, ::-1, hid:]), cb)
    return dxf + dxb[:, ::-1], tuple(gf), tuple(gb)


# ---------------------------------------------------------------------------
# softmax, loss, dropout


def softmax(logits, temperature: float = 1.0, axis: int = -1):
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    z = np.asarray(logits) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dprobs, probs, temperature: float = 1.0, axis: int = -1):
    """Gradient w.r.t. the logits given the gradient w.r.t. the probabilities."""
    inner = (dprobs * probs).sum(axis=axis, keepdims=True)
    return probs * (dprobs - inner) / temperature


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(probs[label], 1e-300)))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of ``(B, N)`` logits against integer labels.

    Returns ``(loss, probs, dlogits)`` where ``dlogits`` is the gradient of the
    mean loss: ``(probs - onehot) / B``.
    """
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    B, N = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= N:
        raise IndexError(f"label out of range for {N} classes: {labels.tolist()}")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    loss = -logp[np.arange(B), labels].mean()
    probs = np.exp(logp)
    dlogits = probs.copy()
    dlogits[np.arange(B), labels] -= 1.0
    return float(loss), probs, (dlogits / B).astype(logits.dtype)


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(output, mask)``; mask is None when inactive."""
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0:
        return x, None
    if rng is None:
        raise ParameterError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    return x * mask, mask


# ---------------------------------------------------------------------------
# parameters and optimiser


class ParamStore:
    """Named learnable arrays with one gradient accumulator each.

    A gradient slot is ``None`` until something accumulates into it;
    ``adam_step`` insists every slot is populated and clears them afterwards.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray | None] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._values:
            raise ConsistencyError(f"duplicate parameter name {name!r}")
        self._values[name] = np.asarray(value)
        self._grads[name] = None
        return self._values[name]

    def names(self) -> list[str]:
        return sorted(self._values)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __len__(self) -> int:
        return len(self._values)

    def __contains__(self, name) -> bool:
        return name in self._values

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._values:
            raise KeyError(name)
        value = np.asarray(value)
        if value.shape != self._values[name].shape:
            raise DimensionError(f"{name}: new shape {value.shape} != {self._values[name].shape}")
        self._values[name] = value

    def grad(self, name: str) -> np.ndarray | None:
        return self._grads[name]

    def accumulate(self, name: str, g) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self._values[name].shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {self._values[name].shape}")
        cur = self._grads[name]
        self._grads[name] = g.copy() if cur is None else cur + g

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(np.square(g)) for g in self._grads.values() if g is not None)))

    def scale_grads(self, factor: float) -> None:
        for k, g in self._grads.items():
            if g is not None:
                self._grads[k] = g * factor

    def zero_grad(self) -> None:
        for k in self._grads:
            self._grads[k] = None

    def size(self) -> int:
        return sum(v.size for v in self._values.values())


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place; clears the gradients."""
    missing = [n for n in params.names() if params.grad(n) is None]
    if missing:
        raise ConsistencyError(f"adam_step: no gradient for {missing}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in params.names():
        g = params.grad(name)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(g.shape)
            v = np.zeros(g.shape)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p = params[name]
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[name] = (p.astype(np.float64) - step).astype(p.dtype)
    params.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    tolerance: float
    coords_checked: dict[str, int]
    retried: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_err.values())

    def failures(self) -> list[str]:
        return [k for k, e in self.max_rel_err.items() if not e < self.tolerance]

    def lines(self) -> list[str]:
        out = []
        for name, err in self.max_rel_err.items():
            status = "ok" if err < self.tolerance else "FAIL"
            retry = f" retried={self.retried[name]}" if self.retried.get(name) else ""
            out.append(f"{name:32s} coords={self.coords_checked[name]:5d} max_rel_err={err:.3e}{retry} {status}")
        return out


def relative_error(analytic, numeric):
    a = np.abs(analytic)
    n = np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-12)


def finite_diff_check(loss_fn: Callable[[], float], params: ParamStore, grads: dict,
                      epsilon: float = 1e-6, tolerance: float = 1e-4,
                      max_coords: int | None = None,
                      rng: np.random.Generator | None = None,
                      retry_epsilon: float | None = None) -> GradCheckReport:
    """Compare analytic ``grads`` with central differences of ``loss_fn``.

    ``loss_fn`` reads the current values in ``params``; each probed coordinate
    is perturbed in place (in float64) and restored afterwards. With
    ``max_coords`` set, a random subset of that many coordinates per slot is
    probed.

    A ReLU or max-pool switch lying within ``epsilon`` of the current point
    makes the central difference straddle a kink. With ``retry_epsilon``, a
    coordinate that fails is measured once more at that smaller step; the
    number of such retries is reported per slot.
    """
    rng = rng or np.random.default_rng(0)
    errs: dict[str, float] = {}
    counts: dict[str, int] = {}
    retries: dict[str, int] = {}
    for name in params.names():
        orig = params[name]
        work = orig.astype(np.float64).copy()
        params[name] = work
        flat = work.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        analytic = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        worst = 0.0
        retried = 0

        def central(k, h):
            keep = flat[k]
            flat[k] = keep + h
            lp = loss_fn()
            flat[k] = keep - h
            lm = loss_fn()
            flat[k] = keep
            return float(relative_error(analytic[k], float((lp - lm) / (2 * h))))

        for k in coords:
            err = central(k, epsilon)
            if not err < tolerance and retry_epsilon is not None:
                retried += 1
                err = central(k, retry_epsilon)
            worst = max(worst, err)
        params[name] = orig
        errs[name] = worst
        counts[name] = len(coords)
        retries[name] = retried
    return GradCheckReport(errs, tolerance, counts, retries)
