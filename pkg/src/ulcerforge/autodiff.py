"""Dense float tensors with reverse-mode differentiation and the Adam update.

The engine covers exactly what the denoising network needs: elementwise
arithmetic, matmul, 2-d convolution, group normalization, softmax
attention, nearest-neighbor upsampling, and sinusoidal timestep features.

Storage is float32 by default; float64 tensors are supported so
finite-difference reference runs can use them. Reductions (sum, mean)
accumulate in float64 regardless of storage width. Forward passes are
deterministic: identical inputs produce bitwise-identical outputs on one
platform.

Gradient semantics: `backward()` adds into existing `.grad` arrays, so
repeated calls without zeroing accumulate. The trainer zeroes grads
before each backward; the engine itself never does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

Array = np.ndarray

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _as_array(values, dtype=np.float32) -> Array:
    arr = np.asarray(values)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(dtype)
    return arr


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[Array], tuple[Array | None, ...]] | None = _backward

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
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars become constant tensors
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        """Populate `.grad` on every reachable requires_grad tensor.

        Only valid on scalars. Calling twice without zeroing doubles the
        accumulated gradients (documented accumulation semantics).
        """
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar loss; got shape {self.shape}")
        order = _topo_order(self)
        pending: dict[int, Array] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    """Nodes of the recorded graph, root first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _make(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64).astype(g.dtype)
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _make(a.data * factor, (a,), backward)


def add_const(a: Tensor, value: float) -> Tensor:
    def backward(g):
        return (g,)

    return _make(a.data + float(value), (a,), backward)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(out, (a,), backward)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward)


def tsqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        return (g * (0.5 / out),)

    return _make(out, (a,), backward)


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make(s, (a,), backward)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the activation used throughout the denoiser."""
    s = _sigmoid(a.data)

    def backward(g):
        return (g * s * (1.0 + a.data * (1.0 - s)),)

    return _make(a.data * s, (a,), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _make(a.data.transpose(axes), (a,), backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise UsageError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def upsample_nearest2x(a: Tensor) -> Tensor:
    if a.ndim != 4:
        raise ShapeError("upsample_nearest2x", "rank", 4, a.ndim)
    n, c, h, w = a.shape
    out = a.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (
            g.reshape(n, c, h, 2, w, 2)
            .sum(axis=(3, 5), dtype=np.float64)
            .astype(g.dtype),
        )

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions (accumulate in float64, store in the input dtype)
# ---------------------------------------------------------------------------

def _expand_reduced(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape).astype(g.dtype, copy=True)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).astype(g.dtype, copy=True)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return _make(np.asarray(out), (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax % a.ndim]

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _make(np.asarray(out), (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True, dtype=np.float64).astype(a.dtype)

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        return ((g - dot) * y,)

    return _make(y, (a,), backward)


# ---------------------------------------------------------------------------
# matmul / convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError("matmul", "rank(a)", ">=2", a.ndim)
    if b.ndim < 2:
        raise ShapeError("matmul", "rank(b)", ">=2", b.ndim)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "inner", a.shape[-1], b.shape[-2])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over NCHW input with OCIhIw kernels.

    Output spatial size is floor((H + 2*padding - kh) / stride) + 1,
    analogously for W; differentiable w.r.t. input, kernel, and bias.
    """
    if x.ndim != 4:
        raise ShapeError("conv2d", "input rank", 4, x.ndim)
    if kernel.ndim != 4:
        raise ShapeError("conv2d", "kernel rank", 4, kernel.ndim)
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ConfigError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"conv2d padding must be >= 0, got {padding}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError("conv2d", "channels", c, kc)
    if kh > h + 2 * padding:
        raise ShapeError("conv2d", "height", f"kernel height <= {h + 2 * padding}", kh)
    if kw > w + 2 * padding:
        raise ShapeError("conv2d", "width", f"kernel width <= {w + 2 * padding}", kw)
    if bias is not None and bias.shape != (o,):
        raise ShapeError("conv2d", "out_channels", (o,), bias.shape)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N, C, H', W', kh, kw]
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # [N, H', W', O]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [O, C, kh, kw]
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                    j:j + stride * (wo - 1) + 1:stride] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gk
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
        return gx, gk, gb

    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# normalization and attention
# ---------------------------------------------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Per-(sample, group) standardization followed by channel affine."""
    if x.ndim != 4:
        raise ShapeError("group_norm", "rank", 4, x.ndim)
    n, c, h, w = x.shape
    groups = int(groups)
    if groups < 1 or c % groups != 0:
        raise ConfigError(f"group_norm: {groups} groups do not divide {c} channels")
    if eps <= 0:
        raise ConfigError(f"group_norm eps must be > 0, got {eps}")
    if gamma.shape != (c,):
        raise ShapeError("group_norm", "channels", (c,), gamma.shape)
    if beta.shape != (c,):
        raise ShapeError("group_norm", "channels", (c,), beta.shape)

    xg = reshape(x, (n, groups, (c // groups) * h * w))
    mu = reduce_mean(xg, axis=2, keepdims=True)
    centered = sub(xg, mu)
    var = reduce_mean(mul(centered, centered), axis=2, keepdims=True)
    inv = pow_const(add_const(var, eps), -0.5)
    normed = reshape(mul(centered, inv), (n, c, h, w))
    g4 = reshape(gamma, (1, c, 1, 1))
    b4 = reshape(beta, (1, c, 1, 1))
    return add(mul(normed, g4), b4)


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                   heads: int = 1) -> Tensor:
    """Softmax attention over all H*W positions of an NCHW feature map.

    Scores are scaled by 1/sqrt(head width) (1/sqrt(C) for a single
    head). There is no positional term, so spatially permuting the input
    permutes the output identically.
    """
    if x.ndim != 4:
        raise ShapeError("self_attention", "rank", 4, x.ndim)
    n, c, h, w = x.shape
    heads = int(heads)
    if heads < 1 or c % heads != 0:
        raise ConfigError(f"self_attention: {c} channels not divisible by {heads} heads")
    for name, m in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if m.shape != (c, c):
            raise ShapeError("self_attention", name, (c, c), m.shape)

    length = h * w
    dh = c // heads
    xf = reshape(transpose(x, (0, 2, 3, 1)), (n, length, c))

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (n, length, heads, dh)), (0, 2, 1, 3))

    q = split_heads(matmul(xf, wq))
    k = split_heads(matmul(xf, wk))
    v = split_heads(matmul(xf, wv))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    mixed = matmul(attn, v)  # [N, heads, L, dh]
    merged = reshape(transpose(mixed, (0, 2, 1, 3)), (n, length, c))
    out = matmul(merged, wo)
    return transpose(reshape(out, (n, h, w, c)), (0, 3, 1, 2))


def time_embedding(t, dim: int, dtype=np.float32) -> Tensor:
    """Sinusoidal timestep features: sin(t / 10000^(2i/dim)) then matching cos.

    Scalar `t` yields a [dim] vector; a sequence yields [len(t), dim].
    All entries lie in [-1, 1].
    """
    dim = int(dim)
    if dim <= 0 or dim % 2 != 0:
        raise ConfigError(f"time_embedding dim must be a positive even int, got {dim}")
    ts = np.asarray(t)
    scalar = ts.ndim == 0
    ts = np.atleast_1d(ts).astype(np.float64)
    if np.any(ts < 0):
        raise ConfigError("time_embedding timestep must be non-negative")
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    angles = ts[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(dtype)
    return Tensor(emb[0] if scalar else emb)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamHyper:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stability: float = 1e-8


@dataclass
class AdamState:
    """Per-parameter moments plus the shared step counter and hyperparameters."""

    first_moment: dict[str, Array]
    second_moment: dict[str, Array]
    step_count: int = 0
    hyper: AdamHyper = field(default_factory=AdamHyper)

    @classmethod
    def initial(cls, params: Mapping[str, Tensor], hyper: AdamHyper | None = None) -> "AdamState":
        return cls(
            first_moment={k: np.zeros_like(p.data) for k, p in params.items()},
            second_moment={k: np.zeros_like(p.data) for k, p in params.items()},
            step_count=0,
            hyper=hyper or AdamHyper(),
        )


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Array],
              state: AdamState) -> tuple[Mapping[str, Tensor], AdamState]:
    """One bias-corrected Adam update, in place; increments step_count by 1."""
    if set(params) != set(grads):
        raise ShapeError("adam_step", "params", sorted(params), sorted(grads))
    hp = state.hyper
    t = state.step_count + 1
    c1 = 1.0 - hp.beta1 ** t
    c2 = 1.0 - hp.beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise ShapeError("adam_step", name, p.data.shape, g.shape)
        m = state.first_moment[name]
        v = state.second_moment[name]
        if m.shape != p.data.shape:
            raise ShapeError("adam_step", name, p.data.shape, m.shape)
        m[...] = hp.beta1 * m + (1.0 - hp.beta1) * g
        v[...] = hp.beta2 * v + (1.0 - hp.beta2) * (g * g)
        p.data -= hp.learning_rate * (m / c1) / (np.sqrt(v / c2) + hp.eps_stability)
    state.step_count = t
    return params, state
