import itertools
import math

import numpy as np
import pytest

from gicctc import tensor as tn
from gicctc.ctc import (BLANK, collapse, ctc_brute_force, ctc_forward_backward, ctc_loss,
                        ctc_neg_log_likelihood, greedy_decode, min_frames, prefix_beam_search)

from gradcheck import TOL, max_rel_error


def random_posteriorgram(rng, T, V):
    logits = rng.normal(scale=1.5, size=(T, V))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def random_labels(rng, V, max_len):
    n = int(rng.integers(0, max_len + 1))
    return [int(v) for v in rng.integers(1, V, size=n)]


def best_label_sequence(q):
    """Enumerate every label sequence the input could emit and pick max P_ctc."""
    T, V = q.shape
    best, best_p = None, -1.0
    for n in range(T + 1):
        for y in itertools.product(range(1, V), repeat=n):
            p = ctc_brute_force(q, y)
            if p > best_p:
                best, best_p = list(y), p
    return best, best_p


class TestCollapse:
    def test_merge_then_drop_blanks(self):
        a, b = 1, 2
        assert collapse([a, a, BLANK, a, b, BLANK]) == [a, a, b]

    @pytest.mark.parametrize("T", [1, 2, 5, 9])
    def test_all_blank(self, T):
        assert collapse([BLANK] * T) == []


class TestCtcLoss:
    def test_single_frame(self):
        q = np.array([[0.1, 0.9]])
        assert ctc_neg_log_likelihood(q, [1]) == pytest.approx(-math.log(0.9), abs=1e-14)

    def test_two_frames_uniform(self):
        # alignments aa, a-, -a out of four equally likely paths
        q = np.full((2, 2), 0.5)
        assert ctc_brute_force(q, [1]) == pytest.approx(0.75, abs=1e-15)
        assert ctc_neg_log_likelihood(q, [1]) == pytest.approx(-math.log(0.75), abs=1e-14)

    def test_empty_target_is_all_blank(self):
        q = random_posteriorgram(np.random.default_rng(0), 5, 4)
        assert ctc_neg_log_likelihood(q, []) == pytest.approx(-np.log(q[:, 0]).sum(), abs=1e-12)

    def test_dp_matches_brute_force(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(200):
            T = int(rng.integers(1, 7))
            V = int(rng.integers(2, 5))
            q = random_posteriorgram(rng, T, V)
            y = random_labels(rng, V, 3)
            p = ctc_brute_force(q, y)
            nll = ctc_neg_log_likelihood(q, y)
            if p == 0.0:
                assert nll == math.inf
            else:
                worst = max(worst, abs(-nll - math.log(p)))
        assert worst < 1e-8

    def test_infeasible_gives_inf_and_zero_grad(self):
        lp = np.log(np.full((1, 2, 3), 1 / 3))
        losses, grad = ctc_forward_backward(lp, [2], [[1, 1]])
        assert losses[0] == math.inf
        assert not grad.any()
        assert min_frames([1, 1]) == 3

    def test_batch_equals_individual(self):
        rng = np.random.default_rng(3)
        lens = [6, 3, 5]
        labels = [[1, 2, 2], [3], [2, 1]]
        lp = np.log(np.stack([random_posteriorgram(rng, 6, 4) for _ in lens]))
        batch, _ = ctc_forward_backward(lp, lens, labels)
        for b, (T, y) in enumerate(zip(lens, labels)):
            assert batch[b] == pytest.approx(ctc_neg_log_likelihood(np.exp(lp[b, :T]), y), abs=1e-12)

    def test_gradient_wrt_logits(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            T, V = int(rng.integers(2, 7)), int(rng.integers(2, 5))
            y = random_labels(rng, V, 2)
            if min_frames(y) > T:
                continue
            logits = tn.Tensor(rng.normal(size=(1, T, V)), requires_grad=True)
            f = lambda: tn.sum_(ctc_loss(tn.log_softmax(logits, axis=-1), [T], [y]))
            assert max_rel_error(f, [logits]) < TOL

    def test_gradient_batched_with_padding(self):
        rng = np.random.default_rng(9)
        logits = tn.Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
        f = lambda: tn.sum_(ctc_loss(tn.log_softmax(logits, axis=-1), [5, 3], [[1, 2], [3, 3]]))
        assert max_rel_error(f, [logits]) < TOL

    def test_pure_blank_frame_keeps_empty_probability(self):
        rng = np.random.default_rng(2)
        q = random_posteriorgram(rng, 4, 3)
        extra = np.vstack([q, [[1.0, 0.0, 0.0]]])
        assert ctc_neg_log_likelihood(extra, []) == ctc_neg_log_likelihood(q, [])


class TestBruteForce:
    def test_target_longer_than_input(self):
        q = np.full((2, 3), 1 / 3)
        assert ctc_brute_force(q, [1, 2, 1]) == 0.0

    def test_single_frame_lookup(self):
        q = np.array([[0.2, 0.3, 0.5]])
        assert ctc_brute_force(q, [2]) == 0.5
        assert ctc_brute_force(q, []) == 0.2

    def test_size_limit(self):
        with pytest.raises(ValueError):
            ctc_brute_force(np.full((13, 3), 1 / 3), [1])


class TestGreedy:
    def test_one_hot_alignment(self):
        align = [1, 1, 0, 2, 2, 0, 1]
        q = np.eye(3)[align]
        assert greedy_decode(q) == collapse(align)

    def test_all_blank(self):
        assert greedy_decode(np.tile([0.8, 0.1, 0.1], (4, 1))) == []

    def test_ties_go_to_lowest_index(self):
        assert greedy_decode(np.array([[0.25, 0.375, 0.375]])) == [1]

    def test_random_against_hand_oracle(self):
        rng = np.random.default_rng(8)
        q = random_posteriorgram(rng, 5, 3)
        path = [max(range(3), key=lambda k: (q[t, k], -k)) for t in range(5)]
        expected = [a for i, a in enumerate(path) if a != 0 and (i == 0 or path[i - 1] != a)]
        assert greedy_decode(q) == expected


class _BanLM:
    """Uniform LM that forbids one token outright."""

    def __init__(self, vocab_size, banned):
        self.vocab_size = vocab_size
        self.banned = banned

    def log_prob(self, token, context):
        return -math.inf if token == self.banned else -math.log(self.vocab_size)

    def end_log_prob(self, context):
        return -math.log(self.vocab_size)


class TestPrefixBeamSearch:
    def test_finds_most_probable_labelling(self):
        rng = np.random.default_rng(21)
        for _ in range(30):
            T, V = int(rng.integers(1, 6)), int(rng.integers(2, 4))
            q = random_posteriorgram(rng, T, V)
            hyp = prefix_beam_search(q, beam=32, lm_weight=0.0)
            best, _ = best_label_sequence(q)
            assert hyp == best

    def test_beam_one_on_one_hot_equals_greedy(self):
        align = [2, 0, 1, 1, 0, 2]
        q = np.eye(3)[align]
        assert prefix_beam_search(q, beam=1, lm_weight=0.0) == greedy_decode(q)

    def test_banned_token_never_emitted(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            q = random_posteriorgram(rng, 6, 4)
            q[:, 2] += 2.0
            q /= q.sum(axis=1, keepdims=True)
            hyp = prefix_beam_search(q, beam=8, lm=_BanLM(4, banned=2), lm_weight=0.5)
            assert 2 not in hyp

    def test_zero_lm_weight_ignores_lm(self):
        rng = np.random.default_rng(6)
        q = random_posteriorgram(rng, 6, 4)
        a = prefix_beam_search(q, beam=5, lm=None, lm_weight=0.0, return_score=True)
        b = prefix_beam_search(q, beam=5, lm=_BanLM(4, banned=1), lm_weight=0.0, return_score=True)
        assert a == b

    def test_score_matches_brute_force_without_lm(self):
        rng = np.random.default_rng(12)
        q = random_posteriorgram(rng, 4, 3)
        hyp, score = prefix_beam_search(q, beam=32, lm_weight=0.0, return_score=True)
        assert score == pytest.approx(math.log(ctc_brute_force(q, hyp)), abs=1e-10)

    def test_pruned_score_is_lower_bound(self):
        # pruning only drops alignments, so the reported mass never exceeds the true one
        rng = np.random.default_rng(13)
        for _ in range(30):
            q = random_posteriorgram(rng, int(rng.integers(3, 7)), 4)
            for b in (1, 2, 4):
                hyp, score = prefix_beam_search(q, beam=b, lm_weight=0.0, return_score=True)
                assert score <= math.log(ctc_brute_force(q, hyp)) + 1e-12

    def test_exhaustive_beam_dominates_narrower(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            T = int(rng.integers(2, 6))
            q = random_posteriorgram(rng, T, 3)
            wide = prefix_beam_search(q, beam=2 ** T, lm_weight=0.0)
            p_wide = ctc_brute_force(q, wide)
            for b in (1, 2, 4):
                assert p_wide >= ctc_brute_force(q, prefix_beam_search(q, beam=b, lm_weight=0.0)) - 1e-15

    def test_score_not_monotone_in_beam_counterexample(self):
        # beam 2 keeps [1, 3] with part of its mass pruned; beam 4 prefers [3, 1]
        rng = np.random.default_rng(13)
        for _ in range(7):
            q = random_posteriorgram(rng, int(rng.integers(3, 9)), 4)
        _, s2 = prefix_beam_search(q, beam=2, lm_weight=0.0, return_score=True)
        _, s4 = prefix_beam_search(q, beam=4, lm_weight=0.0, return_score=True)
        assert s4 < s2

    def test_invalid_beam(self):
        with pytest.raises(ValueError):
            prefix_beam_search(np.full((2, 2), 0.5), beam=0)
