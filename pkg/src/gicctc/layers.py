"""Encoder building blocks: attention, feed-forward, Transformer/Conformer layers,
convolutional subsampling and sinusoidal positions.

All layers act on batched inputs ``(B, T, d)`` and take a :class:`PadMask`
describing the valid frames of each utterance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import Tensor


@dataclass(frozen=True)
class PadMask:
    lengths: np.ndarray  # (B,) valid frames per utterance
    valid: np.ndarray  # (B, T) bool

    @classmethod
    def from_lengths(cls, lengths, T: int) -> "PadMask":
        lengths = np.asarray(lengths, dtype=np.int64)
        if np.any(lengths < 1) or np.any(lengths > T):
            raise ValueError(f"lengths must lie in [1, {T}], got {lengths.tolist()}")
        return cls(lengths, np.arange(T)[None, :] < lengths[:, None])

    @classmethod
    def full(cls, B: int, T: int) -> "PadMask":
        return cls.from_lengths(np.full(B, T), T)

    def frames(self) -> np.ndarray:
        """(B, T, 1) float mask for zeroing padded frames."""
        return self.valid[:, :, None].astype(np.float64)


class Module:
    """Parameter container; ``named_parameters`` walks attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(values) -> Tensor:
    return Tensor(values, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = _param(rng.uniform(-bound, bound, (d_in, d_out)))
        self.bias = _param(rng.uniform(-bound, bound, d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return tn.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = _param(np.ones(d))
        self.bias = _param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention; the caller applies any pre-norm."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.heads = heads
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, T, d = x.shape
        return tn.transpose(tn.reshape(x, (B, T, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: PadMask) -> Tensor:
        B, T, d = x.shape
        dk = d // self.heads
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = tn.scale(tn.matmul(q, tn.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dk))
        blocked = ~mask.valid[:, None, None, :]
        attn = tn.softmax(tn.masked_fill(scores, blocked, -np.inf), axis=-1)
        self.last_weights = attn.data
        ctx = tn.matmul(attn, v)  # (B, H, T, dk)
        ctx = tn.reshape(tn.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, activation: str = "relu"):
        self.w1 = Linear(d_model, d_ff, rng)
        self.w2 = Linear(d_ff, d_model, rng)
        self.activation = activation

    def __call__(self, x: Tensor, train: bool = False, p: float = 0.0, rng=None) -> Tensor:
        act = tn.relu if self.activation == "relu" else tn.swish
        h = tn.dropout(act(self.w1(x)), p, train, rng)
        return self.w2(h)


class TransformerLayer(Module):
    """h' = h + SAN(LN(h));  out = h' + FFN(LN(h'))."""

    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator, dropout: float = 0.1):
        self.norm_attn = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.norm_ff = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng, "relu")
        self.dropout = dropout

    def __call__(self, h: Tensor, mask: PadMask, train: bool = False, rng=None) -> Tensor:
        p = self.dropout
        h = h + tn.dropout(self.attn(self.norm_attn(h), mask), p, train, rng)
        return h + tn.dropout(self.ff(self.norm_ff(h), train, p, rng), p, train, rng)


class ConvModule(Module):
    """LN -> pointwise (d->2d) -> GLU -> depthwise -> LN -> swish -> pointwise."""

    def __init__(self, d_model: int, kernel: int, rng: np.random.Generator):
        if kernel % 2 == 0:
            raise ValueError(f"conv kernel must be odd, got {kernel}")
        self.norm = LayerNorm(d_model)
        self.pointwise_in = Linear(d_model, 2 * d_model, rng)
        bound = 1.0 / math.sqrt(kernel)
        self.depthwise = _param(rng.uniform(-bound, bound, (kernel, d_model)))
        self.depthwise_bias = _param(np.zeros(d_model))
        self.mid_norm = LayerNorm(d_model)
        self.pointwise_out = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor, mask: PadMask) -> Tensor:
        h = tn.glu(self.pointwise_in(self.norm(x)), axis=-1)
        # padded frames must not leak into valid ones through the kernel
        h = h * mask.frames()
        h = tn.depthwise_conv1d(h, self.depthwise) + self.depthwise_bias
        return self.pointwise_out(tn.swish(self.mid_norm(h)))


class ConformerLayer(Module):
    """Macaron block: half FFN, self-attention, convolution, half FFN, final LN."""

    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator,
                 kernel: int = 15, dropout: float = 0.1):
        self.norm_ff1 = LayerNorm(d_model)
        self.ff1 = FeedForward(d_model, d_ff, rng, "swish")
        self.norm_attn = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.conv = ConvModule(d_model, kernel, rng)
        self.norm_ff2 = LayerNorm(d_model)
        self.ff2 = FeedForward(d_model, d_ff, rng, "swish")
        self.norm_out = LayerNorm(d_model)
        self.dropout = dropout

    def __call__(self, h: Tensor, mask: PadMask, train: bool = False, rng=None) -> Tensor:
        p = self.dropout
        h = h + tn.scale(tn.dropout(self.ff1(self.norm_ff1(h), train, p, rng), p, train, rng), 0.5)
        s = h + tn.dropout(self.attn(self.norm_attn(h), mask), p, train, rng)
        o = s + tn.dropout(self.conv(s, mask), p, train, rng)
        o = o + tn.scale(tn.dropout(self.ff2(self.norm_ff2(o), train, p, rng), p, train, rng), 0.5)
        return self.norm_out(o)


def subsampled_length(T):
    """Frames after two stride-2 stages with kernel 3, padding 1: ceil(ceil(T/2)/2) == ceil(T/4)."""
    t1 = tn.conv_out_length(T, 3, 2, 1)
    return tn.conv_out_length(t1, 3, 2, 1)


MIN_SUBSAMPLE_FRAMES = 4


class Subsampling(Module):
    """Two strided 1-D conv stages (kernel 3, stride 2, pad 1, ReLU) and a projection."""

    def __init__(self, d_feat: int, d_model: int, rng: np.random.Generator):
        self.conv1 = Linear(3 * d_feat, d_model, rng)
        self.conv2 = Linear(3 * d_model, d_model, rng)
        self.proj = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor, lengths) -> tuple[Tensor, PadMask]:
        lengths = np.asarray(lengths, dtype=np.int64)
        if x.shape[1] < MIN_SUBSAMPLE_FRAMES or np.any(lengths < MIN_SUBSAMPLE_FRAMES):
            raise tn.DimensionError(
                f"subsampling needs at least {MIN_SUBSAMPLE_FRAMES} frames per utterance")
        x = x * PadMask.from_lengths(lengths, x.shape[1]).frames()
        h = tn.relu(self.conv1(tn.unfold1d(x, 3, 2, 1)))
        len1 = tn.conv_out_length(lengths, 3, 2, 1)
        h = h * PadMask.from_lengths(len1, h.shape[1]).frames()
        h = tn.relu(self.conv2(tn.unfold1d(h, 3, 2, 1)))
        mask = PadMask.from_lengths(subsampled_length(lengths), h.shape[1])
        return self.proj(h), mask


def sinusoidal_encoding(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: d // 2])
    return pe


def add_positional_encoding(x: Tensor) -> Tensor:
    return x + sinusoidal_encoding(x.shape[-2], x.shape[-1])
