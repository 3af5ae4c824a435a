"""Minimal reverse-mode differentiation on numpy float64 arrays.

Operations are recorded onto the active :class:`Tape` whenever one of their
inputs requires a gradient.  Outside a tape everything runs as plain numpy, which
is what inference uses.

    with Tape() as tape:
        loss = (matmul(x, w) ** 2).sum()
    backward(loss, tape)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive operations; inputs always precede their users."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[Tape] = []


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], bw) -> Tensor:
    out = Tensor(out_data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append(Node(out, inputs, bw))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no input requires grad)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # whatever is left belongs to leaves
    leaves = {id(t): t for n in tape.nodes for t in n.inputs if t.requires_grad}
    for key, g in grads.items():
        t = leaves.get(key)
        if t is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _record(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _record(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def log1p(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log1p(ad), (a,), lambda g: (g / (1.0 + ad),))


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _record(x * cdf, (a,), bw)


# ---------------------------------------------------------------- reductions / shape

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), bw)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Gather ``a[rows]`` along axis 0 (rows may repeat)."""
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, rows, g)
        return (out,)

    return _record(a.data[rows], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    out = a.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        g = g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2)
        return (g.sum(axis=(-3, -1)),)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a @ b``.  ``b`` may be 2-D and shared across the leading dims of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation.  ``x`` is C*H*W or N*C*H*W, ``w`` is D*C*k*k."""
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects C*H*W input and D*C*k*k kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = xd.shape
    d, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise ShapeError(f"conv2d channel/kernel mismatch: input {x.shape}, kernel {w.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d kernel size must be odd, got {k}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    if not 0 <= pad <= k - 1:
        raise ShapeError(f"conv2d padding must lie in [0, {k - 1}], got {pad}")
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeError(f"kernel {k}x{k} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(d, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, d).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, d, 1, 1)
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]
    wshape = w.shape

    def bw(g):
        g4 = g[None] if squeeze else g
        gw = gb = gx = None
        if w.requires_grad:
            gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, d)
            gw = (gmat.T @ cols).reshape(wshape)
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        if x.requires_grad:
            # transposed convolution: correlate the dilated, padded gradient with the flipped kernel
            if stride > 1:
                gd = np.zeros((n, d, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=DTYPE)
                gd[:, :, ::stride, ::stride] = g4
            else:
                gd = g4
            rh = (h + 2 * pad - k) % stride
            rw = (wd + 2 * pad - k) % stride
            q = k - 1 - pad
            gp = np.pad(gd, ((0, 0), (0, 0), (q, q + rh), (q, q + rw)))
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, d * k * k)
            gx = (_im2col(gp, k, 1, h, wd) @ wflip.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
            if squeeze:
                gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, w) if bias is None else (x, w, as_tensor(bias))
    return _record(out, inputs, bw)


# ---------------------------------------------------------------- normalisation

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gd.shape) if gain.requires_grad else None
        gbias = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, ggain, gbias

    return _record(xhat * gd + bias.data, (x, gain, bias), bw)


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """``v / (||v|| + eps)`` along the last axis."""
    vd = v.data
    norm = np.sqrt((vd * vd).sum(axis=-1, keepdims=True))
    den = norm + eps
    out = vd / den

    def bw(g):
        # d/dv of v/(|v|+eps): g/den - v (g.v) / (|v| den^2)
        gv = (g * vd).sum(axis=-1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / den - vd * gv / (safe * den * den),)

    return _record(out, (v,), bw)


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and state have different lengths")
    if state.lr <= 0:
        raise ValueError("adam_step: learning rate must be positive")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch for parameter {p.name}: {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------- checking

def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``t.data``."""
    g = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn().item()
        flat[i] = old - h
        fm = fn().item()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4, floor: float = 1e-3) -> float:
    """Largest elementwise relative error between analytic and numeric gradients.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn()
    backward(out, tape)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(fn, t, h)
        den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / den)))
    return worst
