"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds a node that remembers its parents and a closure which, given
the gradient flowing into the node, adds the contributions to its parents.
``backward`` walks the reachable graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording parents (inference / finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Leaf gradients add up across repeated calls; interior gradients are
    rebuilt from scratch each call.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * c, (x,), lambda g: _accum(x, g * c), "scale")


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    return _make(out_data, (x,), lambda g: _accum(x, g * out_data), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: _accum(x, g / x.data), "log")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: _accum(x, g * pos), "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: _accum(x, g * s * (1.0 - s)), "sigmoid")


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def bw(g):
        _accum(x, g * (s + out * (1.0 - s)))

    return _make(out, (x,), bw, "swish")


def glu(x: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of second half."""
    n = x.shape[axis]
    if n % 2:
        raise DimensionError(f"glu needs an even size along axis {axis}, got {n}")
    a, b = np.split(x.data, 2, axis=axis)
    s = _sigmoid(b)

    def bw(g):
        _accum(x, np.concatenate([g * s, g * a * s * (1.0 - s)], axis=axis))

    return _make(a * s, (x,), bw, "glu")


# ---------------------------------------------------------------- reductions / shape

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(x.shape)), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: _accum(x, np.transpose(g, inv)), "transpose")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: _accum(x, np.swapaxes(g, a1, a2)), "swapaxes")


def slice_(x: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accum(x, full)

    return _make(x.data[index], (x,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, cuts, axis=axis)):
            _accum(t, part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by a constant (no gradient there)."""
    mask = np.broadcast_to(mask, x.shape)
    return _make(np.where(mask, value, x.data), (x,), lambda g: _accum(x, np.where(mask, 0.0, g)), "masked_fill")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` over the last axis."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accum(table, full)

    return _make(table.data[ids], (table,), bw, "embedding")


# ---------------------------------------------------------------- normalisers

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        _accum(x, p * (g - np.sum(g * p, axis=axis, keepdims=True)))

    return _make(p, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        _accum(x, g - np.exp(out) * np.sum(g, axis=axis, keepdims=True))

    return _make(out, (x,), bw, "log_softmax")


LN_EPS = 1e-12


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if d < 1:
        raise DimensionError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------- convolution

def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 1-D convolution over axis -2 with 'same' zero padding.

    x: (..., T, d), kernel: (k, d) with k odd.
    ``out[t] = sum_j kernel[j] * x[t + j - k // 2]``.
    """
    k, d = kernel.shape
    if k % 2 == 0:
        raise DimensionError(f"depthwise kernel length must be odd, got {k}")
    if x.shape[-1] != d:
        raise DimensionError(f"channel mismatch: input {x.shape[-1]}, kernel {d}")
    T = x.shape[-2]
    c = k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(c, c), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[..., j:j + T, :] * kernel.data[j]

    def bw(g):
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for j in range(k):
                gp[..., j:j + T, :] += g * kernel.data[j]
            _accum(x, gp[..., c:c + T, :])
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for j in range(k):
                win = (g * xp[..., j:j + T, :]).reshape(-1, d)
                gk[j] = win.sum(axis=0)
            _accum(kernel, gk)

    return _make(out, (x, kernel), bw, "depthwise_conv1d")


def conv_out_length(T, kernel: int, stride: int, pad: int):
    return (T + 2 * pad - kernel) // stride + 1


def unfold1d(x: Tensor, kernel: int, stride: int, pad: int) -> Tensor:
    """Gather strided windows along axis -2: (..., T, C) -> (..., T', kernel*C).

    Window ``t'`` covers padded frames ``t'*stride .. t'*stride+kernel-1``.
    Followed by a matmul this is a strided 1-D convolution.
    """
    T, C = x.shape[-2], x.shape[-1]
    T_out = conv_out_length(T, kernel, stride, pad)
    if T_out < 1:
        raise DimensionError(f"sequence of length {T} too short for kernel {kernel}")
    lead = x.shape[:-2]
    padw = [(0, 0)] * len(lead) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, padw)
    idx = np.arange(T_out)[:, None] * stride + np.arange(kernel)[None, :]
    win = xp[..., idx, :]  # (..., T', kernel, C)
    out = win.reshape(*lead, T_out, kernel * C)

    def bw(g):
        gw = g.reshape(*lead, T_out, kernel, C)
        gp = np.zeros_like(xp)
        for j in range(kernel):
            gp[..., idx[:, j], :] += gw[..., j, :]
        _accum(x, gp[..., pad:pad + T, :])

    return _make(out, (x,), bw, "unfold1d")


# ---------------------------------------------------------------- stochastic

def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``train`` is False or ``p`` is 0."""
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: _accum(x, g * keep), "dropout")


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))
