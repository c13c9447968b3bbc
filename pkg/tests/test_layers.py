import math

import numpy as np
import pytest

from gicctc import tensor as tn
from gicctc.layers import (ConformerLayer, ConvModule, FeedForward, MultiHeadAttention, PadMask,
                           Subsampling, TransformerLayer, add_positional_encoding, sinusoidal_encoding,
                           subsampled_length)
from gicctc.tensor import DimensionError, Tensor

from gradcheck import TOL, max_rel_error


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0.0


def inputs(rng, B, T, d):
    return Tensor(rng.normal(size=(B, T, d)), requires_grad=True)


class TestPadMask:
    def test_from_lengths(self):
        m = PadMask.from_lengths([3, 1], 4)
        np.testing.assert_array_equal(m.valid, [[1, 1, 1, 0], [1, 0, 0, 0]])
        assert m.frames().shape == (2, 4, 1)

    @pytest.mark.parametrize("lengths", [[0, 2], [5, 1]])
    def test_bad_lengths(self, lengths):
        with pytest.raises(ValueError):
            PadMask.from_lengths(lengths, 4)


class TestAttention:
    def test_single_frame_is_value_then_output(self):
        rng = np.random.default_rng(0)
        mha = MultiHeadAttention(8, 2, rng)
        x = Tensor(rng.normal(size=(1, 1, 8)))
        expected = mha.out(mha.value(x)).data
        np.testing.assert_allclose(mha(x, PadMask.full(1, 1)).data, expected, atol=1e-14)
        np.testing.assert_array_equal(mha.last_weights, 1.0)

    def test_identical_frames_give_identical_rows(self):
        rng = np.random.default_rng(1)
        mha = MultiHeadAttention(8, 2, rng)
        row = rng.normal(size=8)
        out = mha(Tensor(np.tile(row, (1, 3, 1))), PadMask.full(1, 3)).data
        np.testing.assert_allclose(out[0, 1], out[0, 0], atol=1e-14)
        np.testing.assert_allclose(out[0, 2], out[0, 0], atol=1e-14)

    def test_weights_are_distributions_with_masked_zeros(self):
        rng = np.random.default_rng(2)
        mha = MultiHeadAttention(8, 2, rng)
        mha(Tensor(rng.normal(size=(2, 5, 8))), PadMask.from_lengths([5, 3], 5))
        w = mha.last_weights
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-9)
        assert np.all(w[1, :, :, 3:] == 0.0)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(6, 4, np.random.default_rng(0))

    def test_grad(self):
        rng = np.random.default_rng(3)
        mha = MultiHeadAttention(8, 2, rng)
        x = inputs(rng, 1, 5, 8)
        mask = PadMask.full(1, 5)
        assert max_rel_error(lambda: mha(x, mask), [x] + mha.parameters()) < TOL


class TestFeedForward:
    @pytest.mark.parametrize("activation", ["relu", "swish"])
    def test_grad(self, activation):
        rng = np.random.default_rng(4)
        ff = FeedForward(4, 6, rng, activation)
        x = inputs(rng, 1, 3, 4)
        assert max_rel_error(lambda: ff(x), [x] + ff.parameters()) < TOL


class TestTransformerLayer:
    def test_zero_params_is_identity(self):
        rng = np.random.default_rng(5)
        layer = TransformerLayer(8, 2, 16, rng)
        zero_params(layer)
        x = rng.normal(size=(1, 4, 8))
        np.testing.assert_array_equal(layer(Tensor(x), PadMask.full(1, 4)).data, x)

    @pytest.mark.parametrize("T", [1, 4, 9])
    def test_shape_preserved(self, T):
        layer = TransformerLayer(8, 2, 16, np.random.default_rng(0))
        out = layer(Tensor(np.ones((2, T, 8))), PadMask.full(2, T))
        assert out.shape == (2, T, 8)

    def test_grad(self):
        rng = np.random.default_rng(6)
        layer = TransformerLayer(8, 2, 16, rng)
        x = inputs(rng, 1, 4, 8)
        mask = PadMask.full(1, 4)
        assert max_rel_error(lambda: layer(x, mask), [x] + layer.parameters()) < TOL


class TestConformerLayer:
    def test_zero_params_is_final_norm(self):
        rng = np.random.default_rng(7)
        layer = ConformerLayer(8, 2, 16, rng, kernel=3)
        zero_params(layer)
        layer.norm_out.gain.data[...] = 1.0
        x = rng.normal(size=(1, 5, 8))
        mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
        expected = (x - mu) / np.sqrt(var + tn.LN_EPS)
        np.testing.assert_allclose(layer(Tensor(x), PadMask.full(1, 5)).data, expected, atol=1e-12)

    @pytest.mark.parametrize("T", [1, 7, 32])
    def test_shape_preserved(self, T):
        layer = ConformerLayer(8, 2, 16, np.random.default_rng(0))
        assert layer(Tensor(np.ones((1, T, 8))), PadMask.full(1, T)).shape == (1, T, 8)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            ConvModule(8, 4, np.random.default_rng(0))

    def test_grad(self):
        rng = np.random.default_rng(8)
        layer = ConformerLayer(8, 2, 16, rng, kernel=3)
        x = inputs(rng, 1, 6, 8)
        mask = PadMask.full(1, 6)
        assert max_rel_error(lambda: layer(x, mask), [x] + layer.parameters()) < TOL


@pytest.mark.parametrize("make", [
    lambda rng: TransformerLayer(8, 2, 16, rng),
    lambda rng: ConformerLayer(8, 2, 16, rng, kernel=5),
], ids=["transformer", "conformer"])
def test_padding_invariance(make):
    rng = np.random.default_rng(9)
    layer = make(rng)
    x = rng.normal(size=(1, 5, 8))
    alone = layer(Tensor(x), PadMask.full(1, 5)).data
    padded = np.concatenate([x, rng.normal(size=(1, 3, 8)) * 10], axis=1)
    out = layer(Tensor(padded), PadMask.from_lengths([5], 8)).data
    np.testing.assert_allclose(out[:, :5], alone, atol=1e-9)


class TestSubsampling:
    @pytest.mark.parametrize("T,expected", [(4, 1), (5, 2), (8, 2), (9, 3), (100, 25), (101, 26)])
    def test_length_is_ceil_quarter(self, T, expected):
        # each stage: floor((T + 2 - 3) / 2) + 1 == ceil(T / 2)
        assert subsampled_length(T) == expected == math.ceil(math.ceil(T / 2) / 2)

    def test_shape(self):
        sub = Subsampling(83, 16, np.random.default_rng(0))
        h, mask = sub(Tensor(np.ones((1, 100, 83))), [100])
        assert h.shape == (1, 25, 16)
        assert mask.lengths.tolist() == [25]

    def test_too_short(self):
        sub = Subsampling(4, 8, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            sub(Tensor(np.ones((1, 3, 4))), [3])

    def test_padding_invariance(self):
        rng = np.random.default_rng(10)
        sub = Subsampling(3, 8, rng)
        x = rng.normal(size=(1, 9, 3))
        alone, _ = sub(Tensor(x), [9])
        padded = np.concatenate([x, np.full((1, 7, 3), 5.0)], axis=1)
        out, mask = sub(Tensor(padded), [9])
        np.testing.assert_allclose(out.data[:, :3], alone.data, atol=1e-12)
        assert mask.lengths.tolist() == [3]

    def test_grad(self):
        rng = np.random.default_rng(11)
        sub = Subsampling(3, 4, rng)
        x = inputs(rng, 1, 8, 3)
        assert max_rel_error(lambda: sub(x, [8])[0], [x] + sub.parameters()) < TOL


class TestPositionalEncoding:
    def test_position_zero(self):
        pe = sinusoidal_encoding(3, 6)
        np.testing.assert_array_equal(pe[0, 0::2], 0.0)
        np.testing.assert_array_equal(pe[0, 1::2], 1.0)

    def test_hand_values(self):
        pe = sinusoidal_encoding(2, 4)
        np.testing.assert_allclose(pe[1], [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)],
                                   atol=1e-15)

    def test_content_independent_and_deterministic(self):
        rng = np.random.default_rng(12)
        a, b = rng.normal(size=(1, 4, 6)), rng.normal(size=(1, 4, 6))
        da = add_positional_encoding(Tensor(a)).data - a
        db = add_positional_encoding(Tensor(b)).data - b
        np.testing.assert_allclose(da, db, atol=1e-15)
        assert add_positional_encoding(Tensor(a)).data.tobytes() == add_positional_encoding(Tensor(a)).data.tobytes()
