"""Reverse-mode automatic differentiation on numpy arrays.

A define-by-run tape: while a Tape is active, every primitive op appends an
entry holding its inputs, output and a backward rule. backward() replays the
tape in reverse, which is a valid topological order by construction. Training
math runs in float32; gradient oracles (finite_difference_gradient) run in
float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DimensionError,
    DivergenceError,
    OracleError,
    UsageError,
)

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "no_grad",
    "matmul",
    "conv3d",
    "conv2d",
    "recurrent_step",
    "softmax",
    "log_softmax",
    "layer_norm",
    "cross_entropy",
    "relu",
    "gelu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "clip",
    "concat",
    "stack",
    "SgdState",
    "sgd_step",
    "finite_difference_gradient",
    "max_relative_error",
]


class Tensor:
    """N-dimensional float array with optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g.astype(self.data.dtype, copy=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class TapeEntry:
    """One recorded op: inputs, output and the rule mapping d(output) to d(inputs)."""

    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_rule: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered record of ops; reverse order is a topological sweep."""

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.entries)


_TAPE_STACK: list[Tape] = []
_GRAD_ENABLED: list[bool] = [True]


class no_grad:
    """Context manager that suppresses tape recording (e.g. teacher forward)."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out: Tensor, inputs: tuple[Tensor, ...], rule) -> None:
    if _TAPE_STACK and _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE_STACK[-1].entries.append(TapeEntry(inputs, out, rule))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over dims that were broadcast so it matches `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate .grad for every requires_grad tensor that fed `loss` on `tape`.

    Repeated calls without zeroing accumulate, matching the additive
    semantics of gradient buffers.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    # transient per-sweep accumulators keyed by object identity
    sweep: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keepalive: dict[int, Tensor] = {id(loss): loss}
    touched = False
    for entry in reversed(tape.entries):
        g_out = sweep.get(id(entry.output))
        if g_out is None:
            continue
        if entry.output is loss:
            touched = True
        grads = entry.backward_rule(g_out)
        for inp, g in zip(entry.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in sweep:
                sweep[key] = sweep[key] + g
            else:
                sweep[key] = g
                keepalive[key] = inp
        if entry.output is not loss:
            del sweep[id(entry.output)], keepalive[id(entry.output)]
    if not touched and tape.entries:
        raise UsageError("loss tensor was not produced on the given tape")
    for key, g in sweep.items():
        t = keepalive[key]
        if t.requires_grad and t is not loss:
            t.accumulate_grad(g)
        elif t is loss and t.requires_grad and not tape.entries:
            t.accumulate_grad(g)


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data + b.data)

    def rule(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    _record(out, (a, b), rule)
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data * b.data)

    def rule(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    _record(out, (a, b), rule)
    return out


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data / b.data)

    def rule(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    _record(out, (a, b), rule)
    return out


def powi(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data**exponent)

    def rule(g):
        return (g * exponent * a.data ** (exponent - 1),)

    _record(out, (a,), rule)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))

    def rule(g):
        return (g * out.data,)

    _record(out, (a,), rule)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))

    def rule(g):
        return (g / a.data,)

    _record(out, (a,), rule)
    return out


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sqrt(a.data))

    def rule(g):
        return (g * 0.5 / out.data,)

    _record(out, (a,), rule)
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.tanh(a.data))

    def rule(g):
        return (g * (1.0 - out.data * out.data),)

    _record(out, (a,), rule)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def rule(g):
        return (g * out.data * (1.0 - out.data),)

    _record(out, (a,), rule)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))

    def rule(g):
        return (g * (a.data > 0),)

    _record(out, (a,), rule)
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a) -> Tensor:
    """tanh-approximation GELU; composed from primitives so backward is free."""
    a = _as_tensor(a)
    inner = mul(add(a, mul(mul(mul(a, a), a), 0.044715)), _GELU_C)
    return mul(mul(a, add(tanh(inner), 1.0)), 0.5)


def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))

    def rule(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    _record(out, (a,), rule)
    return out


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False),)

    _record(out, (a,), rule)
    return out


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def rule(g):
        return (g.reshape(a.data.shape),)

    _record(out, (a,), rule)
    return out


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.transpose(a.data, axes))

    def rule(g):
        inv = None if axes is None else np.argsort(axes)
        return (np.transpose(g, inv),)

    _record(out, (a,), rule)
    return out


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data[idx])

    def rule(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    _record(out, (a,), rule)
    return out


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]

    def rule(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    _record(out, tuple(ts), rule)
    return out


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in ts], axis=axis))

    def rule(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(ts)))

    _record(out, tuple(ts), rule)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy stacking semantics (1-D operands promoted)."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    a_vec, b_vec = a.ndim == 1, b.ndim == 1
    ad = a.data[None, :] if a_vec else a.data
    bd = b.data[:, None] if b_vec else b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    y = ad @ bd
    if a_vec:
        y = y[..., 0, :]
    if b_vec:
        y = y[..., 0] if not a_vec else y.reshape(())
    out = Tensor(y)

    def rule(g):
        gm = np.asarray(g)
        if a_vec and b_vec:
            gm = gm.reshape(1, 1)
        elif a_vec:
            gm = np.expand_dims(gm, -2)
        elif b_vec:
            gm = np.expand_dims(gm, -1)
        ga = gm @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ gm
        if a_vec:
            ga = ga[..., 0, :]
        if b_vec:
            gb = gb[..., 0]
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    _record(out, (a, b), rule)
    return out


# ---------------------------------------------------------------------------
# convolution


def _triple(v) -> tuple[int, int, int]:
    return (v, v, v) if isinstance(v, int) else tuple(v)


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv3d(x, kernels, stride=1, padding=0) -> Tensor:
    """Cross-correlation over (T, H, W).

    x is [C_in, T, H, W] or batched [B, C_in, T, H, W]; kernels are
    [C_out, C_in, kT, kH, kW]. Output dims follow floor((n + 2p - k)/s) + 1.
    """
    x = _as_tensor(x)
    k = _as_tensor(kernels, like=x)
    squeeze = x.ndim == 4
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 5 or k.ndim != 5:
        raise DimensionError(f"conv3d: input {x.shape} and kernels {k.shape} must be 4/5-D and 5-D")
    if xd.shape[1] != k.data.shape[1]:
        raise DimensionError(f"conv3d: channel mismatch, input {x.shape} vs kernels {k.shape}")
    st, sh, sw = _triple(stride)
    pt, ph, pw = _triple(padding)
    kt, kh, kw = k.data.shape[2:]
    tp, hp, wp = (xd.shape[2] + 2 * pt, xd.shape[3] + 2 * ph, xd.shape[4] + 2 * pw)
    t_out = (tp - kt) // st + 1
    h_out = (hp - kh) // sh + 1
    w_out = (wp - kw) // sw + 1
    if min(t_out, h_out, w_out) < 1 or kt > tp or kh > hp or kw > wp:
        raise ConfigurationError(
            f"conv3d: non-positive output dims ({t_out},{h_out},{w_out}) "
            f"for input {x.shape}, kernel {k.shape}, stride {(st, sh, sw)}, padding {(pt, ph, pw)}"
        )
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::st, ::sh, ::sw]
    y = np.einsum("bcthwxyz,ocxyz->bothw", win, k.data, optimize=True)
    out = Tensor(y[0] if squeeze else y)

    def rule(g):
        gb = g[None] if squeeze else g
        gk = np.einsum("bcthwxyz,bothw->ocxyz", win, gb, optimize=True)
        gxp = np.zeros_like(xp)
        for ox in range(kt):
            for oy in range(kh):
                for oz in range(kw):
                    patch = np.einsum("bothw,oc->bcthw", gb, k.data[:, :, ox, oy, oz], optimize=True)
                    gxp[
                        :,
                        :,
                        ox : ox + t_out * st : st,
                        oy : oy + h_out * sh : sh,
                        oz : oz + w_out * sw : sw,
                    ] += patch
        gx = gxp[:, :, pt : tp - pt, ph : hp - ph, pw : wp - pw]
        return (gx[0] if squeeze else gx), gk

    _record(out, (x, k), rule)
    return out


def conv2d(x, kernels, stride=1, padding=0) -> Tensor:
    """Cross-correlation over (H, W); x is [C_in, H, W] or [B, C_in, H, W]."""
    x = _as_tensor(x)
    k = _as_tensor(kernels, like=x)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape} and kernels {k.shape} must be 3/4-D and 4-D")
    if xd.shape[1] != k.data.shape[1]:
        raise DimensionError(f"conv2d: channel mismatch, input {x.shape} vs kernels {k.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    kh, kw = k.data.shape[2:]
    hp, wp = xd.shape[2] + 2 * ph, xd.shape[3] + 2 * pw
    h_out = (hp - kh) // sh + 1
    w_out = (wp - kw) // sw + 1
    if min(h_out, w_out) < 1 or kh > hp or kw > wp:
        raise ConfigurationError(
            f"conv2d: non-positive output dims ({h_out},{w_out}) for input {x.shape}, "
            f"kernel {k.shape}, stride {(sh, sw)}, padding {(ph, pw)}"
        )
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]
    y = np.einsum("bchwyz,ocyz->bohw", win, k.data, optimize=True)
    out = Tensor(y[0] if squeeze else y)

    def rule(g):
        gb = g[None] if squeeze else g
        gk = np.einsum("bchwyz,bohw->ocyz", win, gb, optimize=True)
        gxp = np.zeros_like(xp)
        for oy in range(kh):
            for oz in range(kw):
                patch = np.einsum("bohw,oc->bchw", gb, k.data[:, :, oy, oz], optimize=True)
                gxp[:, :, oy : oy + h_out * sh : sh, oz : oz + w_out * sw : sw] += patch
        gx = gxp[:, :, ph : hp - ph, pw : wp - pw]
        return (gx[0] if squeeze else gx), gk

    _record(out, (x, k), rule)
    return out


# ---------------------------------------------------------------------------
# composite neural ops


def recurrent_step(x, h, c, w_x, w_h, bias):
    """One 4-gate LSTM cell update; returns (h', c').

    x is [d_in] or [B, d_in]; h, c are [d_h] or [B, d_h]. Weights: w_x is
    [d_in, 4*d_h], w_h is [d_h, 4*d_h], bias is [4*d_h], gate order (i, f, g, o).
    """
    x, h, c = _as_tensor(x), _as_tensor(h), _as_tensor(c)
    w_x, w_h, bias = _as_tensor(w_x), _as_tensor(w_h), _as_tensor(bias)
    d_h = h.shape[-1]
    if (
        w_x.shape != (x.shape[-1], 4 * d_h)
        or w_h.shape != (d_h, 4 * d_h)
        or bias.shape != (4 * d_h,)
        or c.shape != h.shape
    ):
        raise DimensionError(
            f"recurrent_step: inconsistent shapes x{x.shape} h{h.shape} c{c.shape} "
            f"w_x{w_x.shape} w_h{w_h.shape} b{bias.shape}"
        )
    z = add(add(matmul(x, w_x), matmul(h, w_h)), bias)
    i = sigmoid(z[..., 0:d_h])
    f = sigmoid(z[..., d_h : 2 * d_h])
    g = tanh(z[..., 2 * d_h : 3 * d_h])
    o = sigmoid(z[..., 3 * d_h : 4 * d_h])
    c2 = add(mul(f, c), mul(i, g))
    h2 = mul(o, tanh(c2))
    return h2, c2


def softmax(logits, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax with max-subtraction for stability."""
    if temperature <= 0:
        raise ConfigurationError(f"softmax: temperature must be positive, got {temperature}")
    a = _as_tensor(logits)
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def rule(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y / temperature,)

    _record(out, (a,), rule)
    return out


def log_softmax(logits, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if temperature <= 0:
        raise ConfigurationError(f"log_softmax: temperature must be positive, got {temperature}")
    a = _as_tensor(logits)
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(z - lse)

    def rule(g):
        y = np.exp(out.data)
        return ((g - y * g.sum(axis=axis, keepdims=True)) / temperature,)

    _record(out, (a,), rule)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = _as_tensor(x)
    mu = mean(x, axis=-1, keepdims=True)
    centered = add(x, mul(mu, -1.0))
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = powi(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


def cross_entropy(logits, labels) -> Tensor:
    """Mean CE of integer labels against logits [N, C]."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(logits.shape[0]), labels))
    return mul(mean(picked), -1.0)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SgdState:
    """SGD hyperparameters plus per-parameter velocity buffers."""

    learning_rate: float
    momentum: float = 0.0
    velocities: list[np.ndarray | None] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: SgdState) -> None:
    """In-place SGD update; with zero momentum this is exactly p -= lr * g."""
    if len(params) != len(grads):
        raise DimensionError(f"sgd_step: {len(params)} params vs {len(grads)} grads")
    for g in grads:
        if g is None or not np.all(np.isfinite(g)):
            raise DivergenceError("sgd_step: non-finite gradient, aborting step")
    if not state.velocities:
        state.velocities = [None] * len(params)
    for idx, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=p.dtype)
        if g.shape != p.data.shape:
            raise DimensionError(f"sgd_step: grad shape {g.shape} vs param {p.data.shape}")
        if state.momentum == 0.0:
            p.data = p.data - p.data.dtype.type(state.learning_rate) * g
        else:
            v = state.velocities[idx]
            v = g.copy() if v is None else state.momentum * v + g
            state.velocities[idx] = v
            p.data = p.data - p.data.dtype.type(state.learning_rate) * v


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_gradient(f, x: Tensor, eps: float = 1e-4) -> Tensor:
    """Central-difference gradient of scalar f at x, computed in float64."""
    if eps <= 0:
        raise ConfigurationError(f"finite differences need eps > 0, got {eps}")
    base = x.data.astype(np.float64).copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = _scalar_eval(f, base)
        flat[i] = orig - eps
        lo = _scalar_eval(f, base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return Tensor(grad, dtype=np.float64)


def _scalar_eval(f, arr: np.ndarray) -> float:
    out = f(Tensor(arr.copy(), dtype=np.float64))
    val = float(out.item() if isinstance(out, Tensor) else out)
    if not np.isfinite(val):
        raise OracleError("finite_difference_gradient: objective returned a non-finite value")
    return val


def max_relative_error(approx: np.ndarray, exact: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - b| / max(|a|, |b|, floor); the floor absorbs exact zeros."""
    a = np.asarray(approx, dtype=np.float64)
    b = np.asarray(exact, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
