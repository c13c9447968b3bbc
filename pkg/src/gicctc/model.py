"""Encoder with intermediate CTC taps and gated interlayer collaboration blocks.

At each tap layer the hidden state yields soft labels over the vocabulary,
the soft labels weight a shared token-embedding table into a textual state,
and a sigmoid gate mixes the acoustic and textual states before the next
layer.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .ctc import ctc_loss
from .layers import (ConformerLayer, LayerNorm, Linear, Module, PadMask, Subsampling,
                     TransformerLayer, add_positional_encoding)
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class GicConfig:
    backbone: str = "transformer"
    num_layers: int = 6
    num_taps: int = 2
    inter_weight: float = 0.5
    d_model: int = 32
    heads: int = 2
    d_ff: int = 128
    conv_kernel: int = 15
    vocab_size: int = 8
    d_feat: int = 16
    dropout: float = 0.1
    enable_gic: bool = True
    enable_intermediate_loss: bool = True
    fusion: str = "gate"  # "gate" or "sum"
    share_tap_projection: bool = False
    stop_gradient_soft_labels: bool = False
    gate_bias_init: float = 1.0

    def validate(self) -> None:
        if self.backbone not in ("transformer", "conformer"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.fusion not in ("gate", "sum"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if not 0.0 <= self.inter_weight <= 1.0:
            raise ConfigError(f"inter_weight must be in [0, 1], got {self.inter_weight}")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must include blank and at least one token")
        tap_layer_indices(self.num_layers, self.num_taps)

    @property
    def taps(self) -> list[int]:
        return tap_layer_indices(self.num_layers, self.num_taps)

    @property
    def has_taps(self) -> bool:
        return self.num_taps > 0 and (self.enable_gic or self.enable_intermediate_loss)


def tap_layer_indices(num_layers: int, num_taps: int) -> list[int]:
    """1-based tap layers ``round(i * L / (K + 1))`` for i = 1..K."""
    if num_layers < 1:
        raise ConfigError("num_layers must be >= 1")
    if num_taps < 0 or num_taps > num_layers - 1:
        raise ConfigError(f"num_taps must be in [0, {num_layers - 1}], got {num_taps}")
    taps = [int(math.floor(i * num_layers / (num_taps + 1) + 0.5)) for i in range(1, num_taps + 1)]
    if len(set(taps)) != len(taps) or any(t < 1 or t >= num_layers for t in taps):
        raise ConfigError(f"tap layers {taps} collide or fall outside 1..{num_layers - 1}")
    return taps


def total_loss(final, intermediates: Sequence, inter_weight: float):
    """(1 - w) * final + w * mean(intermediates); no intermediates means final alone."""
    if not 0.0 <= inter_weight <= 1.0:
        raise ConfigError(f"inter_weight must be in [0, 1], got {inter_weight}")
    if not intermediates:
        return final
    acc = intermediates[0]
    for x in intermediates[1:]:
        acc = acc + x
    if isinstance(final, Tensor) or isinstance(acc, Tensor):
        return tn.scale(final, 1.0 - inter_weight) + tn.scale(acc, inter_weight / len(intermediates))
    return (1.0 - inter_weight) * final + inter_weight * acc / len(intermediates)


class VocabProjection(Module):
    """LN then affine map to vocabulary logits."""

    def __init__(self, d_model: int, vocab_size: int, rng: np.random.Generator):
        self.norm = LayerNorm(d_model)
        self.linear = Linear(d_model, vocab_size, rng)

    def logits(self, h: Tensor) -> Tensor:
        return self.linear(self.norm(h))


def intermediate_posterior(h: Tensor, proj: VocabProjection) -> Tensor:
    """Soft labels: softmax(Linear(LN(h))) per frame."""
    return tn.softmax(proj.logits(h), axis=-1)


def textual_embedding(q: Tensor, emb: Tensor) -> Tensor:
    """Probability-weighted sum of token embeddings: (..., T, V) @ (V, d)."""
    if q.shape[-1] != emb.shape[0]:
        raise tn.DimensionError(f"soft labels over {q.shape[-1]} tokens, table has {emb.shape[0]}")
    return tn.matmul(q, emb)


class Gate(Module):
    def __init__(self, d_model: int, rng: np.random.Generator, bias_init: float = 1.0):
        self.acoustic = Linear(d_model, d_model, rng, bias=False)
        self.textual = Linear(d_model, d_model, rng, bias=False)
        self.bias = Tensor(np.full(d_model, bias_init), requires_grad=True)


def gate_fuse(h: Tensor, e: Tensor, gate: Gate) -> Tensor:
    """g = sigmoid(h W1 + e W2 + b);  g * h + (1 - g) * e."""
    if h.shape != e.shape:
        raise tn.DimensionError(f"acoustic {h.shape} and textual {e.shape} states differ")
    g = tn.sigmoid(gate.acoustic(h) + gate.textual(e) + gate.bias)
    return g * h + (1.0 - g) * e


@dataclass
class ModelOutput:
    log_probs: Tensor  # (B, T', V) final layer
    lengths: np.ndarray  # (B,) valid frames after subsampling
    tap_log_probs: dict[int, Tensor] = field(default_factory=dict)
    fused_states: dict[int, Tensor] = field(default_factory=dict)
    final_loss: Tensor | None = None
    tap_losses: dict[int, Tensor] = field(default_factory=dict)
    loss: Tensor | None = None
    utterance_losses: np.ndarray | None = None  # (B,) total per utterance

    def posteriorgram(self, b: int, tap: int | None = None) -> np.ndarray:
        lp = self.log_probs if tap is None else self.tap_log_probs[tap]
        return np.exp(lp.data[b, : self.lengths[b]])


class GicModel(Module):
    def __init__(self, config: GicConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.frontend = Subsampling(c.d_feat, c.d_model, rng)
        if c.backbone == "transformer":
            self.layers = [TransformerLayer(c.d_model, c.heads, c.d_ff, rng, c.dropout)
                           for _ in range(c.num_layers)]
        else:
            self.layers = [ConformerLayer(c.d_model, c.heads, c.d_ff, rng, c.conv_kernel, c.dropout)
                           for _ in range(c.num_layers)]
        self.final_proj = VocabProjection(c.d_model, c.vocab_size, rng)
        self.tap_proj: list[VocabProjection] = []
        self.gates: list[Gate] = []
        self.embedding = None
        if c.has_taps:
            if not c.share_tap_projection:
                self.tap_proj = [VocabProjection(c.d_model, c.vocab_size, rng) for _ in c.taps]
            if c.enable_gic:
                self.embedding = Tensor(rng.normal(0.0, c.d_model ** -0.5, (c.vocab_size, c.d_model)),
                                        requires_grad=True)
                if c.fusion == "gate":
                    self.gates = [Gate(c.d_model, rng, c.gate_bias_init) for _ in c.taps]

    def projection_for_tap(self, i: int) -> VocabProjection:
        return self.final_proj if self.config.share_tap_projection else self.tap_proj[i]

    def __call__(self, features, lengths, labels: Sequence[Sequence[int]] | None = None,
                 train: bool = False, rng: np.random.Generator | None = None) -> ModelOutput:
        c = self.config
        x = tn.as_tensor(features)
        h, mask = self.frontend(x, lengths)
        h = tn.dropout(add_positional_encoding(h), c.dropout, train, rng)
        taps = c.taps if c.has_taps else []
        out_taps: dict[int, Tensor] = {}
        fused: dict[int, Tensor] = {}
        for depth, layer in enumerate(self.layers, start=1):
            h = layer(h, mask, train, rng)
            if depth in taps:
                i = taps.index(depth)
                logits = self.projection_for_tap(i).logits(h)
                out_taps[depth] = tn.log_softmax(logits, axis=-1)
                if c.enable_gic:
                    q = tn.softmax(logits, axis=-1)
                    if c.stop_gradient_soft_labels:
                        q = Tensor(q.data)
                    e = textual_embedding(q, self.embedding)
                    h = gate_fuse(h, e, self.gates[i]) if c.fusion == "gate" else h + e
                    fused[depth] = h
        log_probs = tn.log_softmax(self.final_proj.logits(h), axis=-1)
        out = ModelOutput(log_probs, mask.lengths, out_taps, fused)
        if labels is not None:
            self._attach_losses(out, labels)
        return out

    def _attach_losses(self, out: ModelOutput, labels) -> None:
        c = self.config
        per_final = ctc_loss(out.log_probs, out.lengths, labels)
        out.final_loss = tn.sum_(per_final)
        per_taps = []
        if c.enable_intermediate_loss:
            for depth, lp in out.tap_log_probs.items():
                per = ctc_loss(lp, out.lengths, labels)
                per_taps.append(per)
                out.tap_losses[depth] = tn.sum_(per)
        per_utt = total_loss(per_final, per_taps, c.inter_weight)
        out.utterance_losses = per_utt.data.copy()
        out.loss = tn.sum_(per_utt)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ConfigError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            if p.shape != state[name].shape:
                raise ConfigError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


def config_from_dict(d: dict) -> GicConfig:
    names = {f.name for f in dataclasses.fields(GicConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown model keys: {sorted(unknown)}")
    return GicConfig(**d)
