"""Connectionist temporal classification: loss, exhaustive oracle and decoders.

Token 0 is the blank. Posteriorgrams are ``(T, V)`` row-stochastic matrices;
the batched loss works on log-probabilities ``(B, T, V)``.
"""
from __future__ import annotations

import itertools
import math
from collections import defaultdict
from typing import Protocol, Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor

BLANK = 0
NEG_INF = -np.inf


class InfeasibleAlignment(ValueError):
    """Target needs more frames than the input provides."""


def collapse(alignment: Sequence[int], blank: int = BLANK) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for a in alignment:
        a = int(a)
        if a != prev and a != blank:
            out.append(a)
        prev = a
    return out


def min_frames(labels: Sequence[int]) -> int:
    """Shortest input that can emit ``labels``: one frame per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extend(labels: Sequence[int]) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, BLANK, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _lse(*xs: np.ndarray) -> np.ndarray:
    m = np.maximum.reduce(xs)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(sum(np.exp(x - safe) for x in xs))


def ctc_forward_backward(log_probs: np.ndarray, input_lengths, labels: Sequence[Sequence[int]],
                         need_grad: bool = True):
    """Negative log-likelihood per utterance and its gradient w.r.t. ``log_probs``.

    log_probs: (B, T, V) per-frame log-probabilities. Frames past
    ``input_lengths[b]`` are ignored. Infeasible utterances get ``inf`` loss
    and zero gradient.
    """
    B, T, V = log_probs.shape
    input_lengths = np.asarray(input_lengths, dtype=np.int64)
    S = 2 * max((len(y) for y in labels), default=0) + 1
    ext = np.zeros((B, S), dtype=np.int64)
    n_states = np.empty(B, dtype=np.int64)
    skip = np.zeros((B, S), dtype=bool)  # transition s-2 -> s allowed
    for b, y in enumerate(labels):
        e = _extend(y)
        ext[b, : len(e)] = e
        n_states[b] = len(e)
        if len(e) > 2:
            skip[b, 2: len(e)] = (e[2:] != BLANK) & (e[2:] != e[:-2])
    in_lattice = np.arange(S)[None, :] < n_states[:, None]
    bidx = np.arange(B)[:, None]
    emit = log_probs[bidx[:, :, None], np.arange(T)[None, :, None], ext[:, None, :]]  # (B, T, S)
    emit = np.where(in_lattice[:, None, :], emit, NEG_INF)

    alpha = np.full((B, T, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        stay = prev
        step = np.concatenate([np.full((B, 1), NEG_INF), prev[:, :-1]], axis=1)
        jump = np.concatenate([np.full((B, 2), NEG_INF), prev[:, :-2]], axis=1)[:, :S]
        jump = np.where(skip, jump, NEG_INF)
        alpha[:, t] = _lse(stay, step, jump) + emit[:, t]

    last = input_lengths - 1
    a_end = alpha[np.arange(B), last]  # (B, S)
    fin1 = a_end[np.arange(B), n_states - 1]
    fin2 = np.where(n_states > 1, a_end[np.arange(B), np.maximum(n_states - 2, 0)], NEG_INF)
    log_p = _lse(fin1, fin2)
    losses = -log_p
    if not need_grad:
        return losses, None

    # beta[t, s]: log-prob of frames t+1.. given state s at t (emission at t excluded)
    beta = np.full((B, T, S), NEG_INF)
    final = np.full((B, S), NEG_INF)
    final[np.arange(B), n_states - 1] = 0.0
    has2 = n_states > 1
    final[np.arange(B)[has2], n_states[has2] - 2] = 0.0
    skip_from = np.zeros((B, S), dtype=bool)  # transition s -> s+2 allowed
    skip_from[:, :-2] = skip[:, 2:]
    for t in range(T - 1, -1, -1):
        if t + 1 < T:
            nxt = beta[:, t + 1] + emit[:, t + 1]
            step = np.concatenate([nxt[:, 1:], np.full((B, 1), NEG_INF)], axis=1)
            jump = np.concatenate([nxt[:, 2:], np.full((B, 2), NEG_INF)], axis=1)[:, :S]
            jump = np.where(skip_from, jump, NEG_INF)
            rec = _lse(nxt, step, jump)
        else:
            rec = np.full((B, S), NEG_INF)
        is_last = (t == last)[:, None]
        beta[:, t] = np.where(is_last, final, np.where((t < last)[:, None], rec, NEG_INF))

    feasible = np.isfinite(log_p)
    grad = np.zeros_like(log_probs)
    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha + beta - np.where(feasible, log_p, 0.0)[:, None, None])
    occ = np.where(feasible[:, None, None] & np.isfinite(alpha + beta), occ, 0.0)
    b_ix = np.broadcast_to(bidx[:, :, None], occ.shape)
    t_ix = np.broadcast_to(np.arange(T)[None, :, None], occ.shape)
    k_ix = np.broadcast_to(ext[:, None, :], occ.shape)
    np.add.at(grad, (b_ix, t_ix, k_ix), -occ)
    return losses, grad


def ctc_loss(log_probs: Tensor, input_lengths, labels: Sequence[Sequence[int]]) -> Tensor:
    """Per-utterance CTC loss ``(B,)`` as a differentiable tensor op."""
    losses, grad = ctc_forward_backward(log_probs.data, input_lengths, labels, need_grad=log_probs.requires_grad)

    def bw(g):
        g = np.where(np.isfinite(losses), g, 0.0)
        tn._accum(log_probs, grad * g[:, None, None])

    return tn._make(losses, (log_probs,), bw, "ctc_loss")


def ctc_neg_log_likelihood(q: np.ndarray, labels: Sequence[int]) -> float:
    """``-log P_ctc(labels | q)`` for one posteriorgram ``q`` of shape (T, V)."""
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore"):
        lp = np.log(q)[None]
    losses, _ = ctc_forward_backward(lp, [q.shape[0]], [list(labels)], need_grad=False)
    return float(losses[0])


MAX_BRUTE_FORCE = 10 ** 6


def ctc_brute_force(q: np.ndarray, labels: Sequence[int]) -> float:
    """Probability of ``labels`` by summing over every alignment explicitly."""
    q = np.asarray(q, dtype=np.float64)
    T, V = q.shape
    if V ** T > MAX_BRUTE_FORCE:
        raise ValueError(f"|V|^T = {V}^{T} exceeds the enumeration limit")
    target = [int(a) for a in labels]
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == target:
            total += math.prod(q[t, a] for t, a in enumerate(path))
    return total


def greedy_decode(q: np.ndarray) -> list[int]:
    """Best path: per-frame argmax (ties to the lowest index), then collapse."""
    return collapse(np.argmax(np.asarray(q), axis=-1))


class LanguageModel(Protocol):
    def log_prob(self, token: int, context: Sequence[int]) -> float: ...

    def end_log_prob(self, context: Sequence[int]) -> float: ...


def _logaddexp(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = max(a, b)
    return m + math.log(math.exp(a - m) + math.exp(b - m))


def prefix_beam_search(q: np.ndarray, beam: int = 10, lm: LanguageModel | None = None,
                       lm_weight: float = 0.3, length_bonus: float = 0.0,
                       log_domain: bool = False, return_score: bool = False):
    """CTC prefix search with optional shallow fusion.

    Each prefix keeps separate log masses for paths ending in blank and in a
    label. The fused score is ``log P(prefix) + lm_weight * log P_lm(prefix)
    + length_bonus * len(prefix)``; the LM end-of-sentence term is added
    before the final pick. With ``lm_weight == 0`` the LM is never queried.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if log_domain:
        lp = np.asarray(q, dtype=np.float64)
    else:
        with np.errstate(divide="ignore"):
            lp = np.log(np.asarray(q, dtype=np.float64))
    T, V = lp.shape
    use_lm = lm is not None and lm_weight != 0.0

    beams: dict[tuple, tuple[float, float]] = {(): (0.0, NEG_INF)}
    lm_acc: dict[tuple, float] = {(): 0.0}

    def fused(prefix, pb, pnb):
        score = _logaddexp(pb, pnb) + length_bonus * len(prefix)
        if use_lm:
            score += lm_weight * lm_acc[prefix]
        return score

    for t in range(T):
        row = lp[t]
        nxt: dict[tuple, list[float]] = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (pb, pnb) in beams.items():
            total = _logaddexp(pb, pnb)
            if row[BLANK] > NEG_INF:
                cell = nxt[prefix]
                cell[0] = _logaddexp(cell[0], total + row[BLANK])
            for v in range(V):
                if v == BLANK or row[v] == NEG_INF:
                    continue
                repeat = bool(prefix) and v == prefix[-1]
                if repeat:
                    same = nxt[prefix]
                    same[1] = _logaddexp(same[1], pnb + row[v])
                ext = prefix + (v,)
                if use_lm and ext not in lm_acc:
                    lm_acc[ext] = lm_acc[prefix] + lm.log_prob(v, prefix)
                if use_lm and lm_acc[ext] == NEG_INF:
                    continue
                cell = nxt[ext]
                cell[1] = _logaddexp(cell[1], (pb if repeat else total) + row[v])
        ranked = sorted(nxt.items(), key=lambda kv: (-fused(kv[0], *kv[1]), kv[0]))
        beams = {p: (m[0], m[1]) for p, m in ranked[:beam]}

    def final(prefix, masses):
        score = fused(prefix, *masses)
        if use_lm:
            score += lm_weight * lm.end_log_prob(prefix)
        return score

    best = min(beams.items(), key=lambda kv: (-final(*kv), kv[0]))
    tokens = list(best[0])
    if return_score:
        return tokens, final(*best)
    return tokens
