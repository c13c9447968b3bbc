"""Token n-gram language model with fixed-weight (Jelinek-Mercer) interpolation.

Outcomes are the non-blank token ids ``1..vocab_size-1`` plus an end-of-sentence
id ``vocab_size``. Histories are left-padded with ``BOS`` (-1).

For order ``k`` the component ``P_k(w | h)`` is the relative frequency given
the last ``k-1`` history tokens, falling back to ``P_{k-1}`` when that context
was never seen. ``P_1`` is add-one smoothed, i.e. the unigram relative
frequency interpolated with the uniform distribution, so no in-vocabulary
outcome ever gets zero mass while ``weights[-1] > 0``. The model is
``sum_k weights_k * P_k``.
"""
from __future__ import annotations

import math
from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np

from . import checkpoint

BOS = -1
DEFAULT_WEIGHTS = {1: (1.0,), 2: (0.6, 0.4), 3: (0.5, 0.3, 0.2), 4: (0.4, 0.3, 0.2, 0.1)}


class UnknownTokenError(KeyError):
    pass


class NgramModel:
    def __init__(self, order: int, vocab_size: int, weights: Sequence[float],
                 counts: list[dict[tuple, dict[int, int]]]):
        """``weights[0]`` belongs to the highest order, ``weights[-1]`` to the unigram."""
        if order < 1:
            raise ValueError("order must be >= 1")
        if len(weights) != order:
            raise ValueError(f"need {order} interpolation weights, got {len(weights)}")
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-12:
            raise ValueError(f"weights must be a probability simplex, got {list(weights)}")
        self.order = order
        self.vocab_size = vocab_size
        self.end = vocab_size
        self.weights = tuple(float(w) for w in weights)
        self.counts = counts  # counts[k-1][context of length k-1][token]
        self.context_totals = [{ctx: sum(c.values()) for ctx, c in table.items()} for table in counts]
        self.num_unigrams = sum(self.context_totals[0].values())
        self._cache: dict[tuple, np.ndarray] = {}

    @property
    def outcomes(self) -> list[int]:
        return list(range(1, self.vocab_size)) + [self.end]

    def _history(self, context: Sequence[int]) -> tuple:
        ctx = tuple(int(c) for c in context)[-(self.order - 1):] if self.order > 1 else ()
        return (BOS,) * (self.order - 1 - len(ctx)) + ctx

    def distribution(self, context: Sequence[int]) -> np.ndarray:
        """Probabilities over ``outcomes`` (index i -> token i+1, last -> end)."""
        hist = self._history(context)
        if hist in self._cache:
            return self._cache[hist]
        n_out = self.vocab_size
        uni = np.ones(n_out)
        for tok, c in self.counts[0].get((), {}).items():
            uni[tok - 1] += c
        comp = uni / (self.num_unigrams + n_out)
        mix = self.weights[-1] * comp
        for k in range(2, self.order + 1):
            ctx = hist[len(hist) - (k - 1):]
            total = self.context_totals[k - 1].get(ctx, 0)
            if total:
                comp = np.zeros(n_out)
                for tok, c in self.counts[k - 1][ctx].items():
                    comp[tok - 1] = c / total
            mix = mix + self.weights[self.order - k] * comp
        self._cache[hist] = mix
        return mix

    def prob(self, token: int, context: Sequence[int]) -> float:
        if not 1 <= token <= self.end:
            raise UnknownTokenError(token)
        return float(self.distribution(context)[token - 1])

    def log_prob(self, token: int, context: Sequence[int]) -> float:
        p = self.prob(token, context)
        return math.log(p) if p > 0 else -math.inf

    def end_log_prob(self, context: Sequence[int]) -> float:
        return self.log_prob(self.end, context)

    def sentence_log_prob(self, tokens: Sequence[int]) -> float:
        total = 0.0
        for i, t in enumerate(list(tokens) + [self.end]):
            total += self.log_prob(t, tokens[:i])
        return total

    def perplexity(self, corpus: Iterable[Sequence[int]]) -> float:
        total = 0.0
        events = 0
        for sent in corpus:
            total += self.sentence_log_prob(sent)
            events += len(sent) + 1
        return math.exp(-total / events)

    # ------------------------------------------------------------ serialisation

    def to_container(self) -> tuple[dict, dict[str, np.ndarray]]:
        arrays = {}
        for k, table in enumerate(self.counts, start=1):
            rows = sorted(ctx + (tok, c) for ctx, dist in table.items() for tok, c in dist.items())
            arrays[f"order{k}"] = np.array(rows, dtype=np.int64).reshape(len(rows), k + 1)
        meta = {"kind": "ngram", "format_version": 1, "order": self.order,
                "vocab_size": self.vocab_size, "weights": list(self.weights)}
        return meta, arrays

    def save(self, path) -> None:
        checkpoint.save(path, *self.to_container())

    @classmethod
    def load(cls, path) -> "NgramModel":
        meta, arrays = checkpoint.load(path)
        if meta.get("kind") != "ngram":
            raise checkpoint.CheckpointError(f"{path} is not an n-gram model")
        counts = []
        for k in range(1, meta["order"] + 1):
            table: dict[tuple, dict[int, int]] = defaultdict(dict)
            for row in arrays[f"order{k}"].tolist():
                table[tuple(row[: k - 1])][row[k - 1]] = row[k]
            counts.append(dict(table))
        return cls(meta["order"], meta["vocab_size"], meta["weights"], counts)


def lm_train(corpus: Sequence[Sequence[int]], vocab_size: int, order: int = 4,
             weights: Sequence[float] | None = None) -> NgramModel:
    """Count n-grams over ``corpus`` (token ids in ``1..vocab_size-1``)."""
    if not corpus:
        raise ValueError("empty corpus")
    weights = DEFAULT_WEIGHTS.get(order) if weights is None else weights
    if weights is None:
        raise ValueError(f"no default weights for order {order}; pass them explicitly")
    end = vocab_size
    tables = [defaultdict(lambda: defaultdict(int)) for _ in range(order)]
    for sent in corpus:
        for t in sent:
            if not 1 <= t < vocab_size:
                raise UnknownTokenError(t)
        seq = [BOS] * (order - 1) + [int(t) for t in sent] + [end]
        for i in range(order - 1, len(seq)):
            for k in range(1, order + 1):
                ctx = tuple(seq[i - (k - 1): i])
                tables[k - 1][ctx][seq[i]] += 1
    counts = [{ctx: dict(d) for ctx, d in t.items()} for t in tables]
    return NgramModel(order, vocab_size, weights, counts)
