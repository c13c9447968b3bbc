import numpy as np
import pytest

from gicctc.data import (DataError, Vocabulary, load_manifest, make_batches, read_features,
                         read_transcripts, synth_generate, write_features, write_manifest)
from gicctc.model import GicConfig, GicModel


def small_synth(seed=0, **kw):
    args = dict(n_utts=6, vocab_size=5, min_len=2, max_len=5, frames_per_token=4, noise_std=0.1, d_feat=6)
    args.update(kw)
    return synth_generate(seed, **args)


class TestVocabulary:
    def test_blank_first(self):
        v = Vocabulary.synthetic(4)
        assert v.tokens == ["<blank>", "a", "b", "c"]
        assert v.encode(["c", "a"]) == [3, 1]
        assert v.decode([3, 1]) == ["c", "a"]

    @pytest.mark.parametrize("tokens", [["a", "<blank>"], ["<blank>", "a", "a"], []])
    def test_invalid(self, tokens):
        with pytest.raises(DataError):
            Vocabulary(tokens)

    @pytest.mark.parametrize("text", [["z"], ["<blank>"]])
    def test_encode_rejects(self, text):
        with pytest.raises(DataError):
            Vocabulary.synthetic(4).encode(text)

    def test_save_load(self, tmp_path):
        v = Vocabulary.synthetic(30)
        v.save(tmp_path / "vocab.txt")
        assert Vocabulary.load(tmp_path / "vocab.txt") == v


class TestSynth:
    def test_same_seed_identical(self):
        a, b = small_synth(3), small_synth(3)
        for u, w in zip(a.utterances, b.utterances):
            assert u.features.tobytes() == w.features.tobytes()
            assert u.transcript == w.transcript

    def test_different_seed_differs(self):
        assert small_synth(1).utterances[0].features.tobytes() != small_synth(2).utterances[0].features.tobytes()

    def test_noise_free_is_pattern_concatenation(self):
        ds = small_synth(4, noise_std=0.0)
        for u in ds.utterances:
            expected = np.repeat(ds.patterns[u.transcript], 4, axis=0).astype(np.float32)
            np.testing.assert_array_equal(u.features, expected)

    def test_nearest_pattern_recovers_transcripts(self):
        ds = small_synth(5, n_utts=20, noise_std=0.0)
        for u in ds.utterances:
            dist = ((u.features[:, None, :] - ds.patterns[None, 1:, :]) ** 2).sum(-1)
            frame_ids = 1 + dist.argmin(axis=1)
            assert [int(t) for t in frame_ids[::4]] == u.transcript

    def test_no_adjacent_repeats_by_default(self):
        for u in small_synth(6, n_utts=50, vocab_size=3).utterances:
            assert all(a != b for a, b in zip(u.transcript, u.transcript[1:]))

    def test_shapes_and_ranges(self):
        ds = small_synth(7, n_utts=30)
        for u in ds.utterances:
            assert 2 <= len(u.transcript) <= 5
            assert u.features.shape == (4 * len(u.transcript), 6)
            assert 0 not in u.transcript
        np.testing.assert_allclose(np.linalg.norm(ds.patterns[1:], axis=1), 1.0, atol=1e-12)

    def test_markov_text_is_more_predictable(self):
        def bigram_entropy(ds):
            counts = np.zeros((5, 5))
            for u in ds.utterances:
                for a, b in zip(u.transcript, u.transcript[1:]):
                    counts[a, b] += 1
            p = counts[1:] / counts[1:].sum(axis=1, keepdims=True)
            with np.errstate(divide="ignore", invalid="ignore"):
                return -np.nansum(p * np.log(p)) / 4

        uniform = small_synth(8, n_utts=300)
        markov = small_synth(8, n_utts=300, transition_concentration=0.2)
        assert bigram_entropy(markov) < bigram_entropy(uniform)

    @pytest.mark.parametrize("kw", [
        {"vocab_size": 1}, {"min_len": 0}, {"min_len": 4, "max_len": 3}, {"frames_per_token": 0},
        {"noise_std": -1.0}, {"transition_concentration": 0.0},
    ])
    def test_invalid_arguments(self, kw):
        with pytest.raises(DataError):
            small_synth(**kw)


class TestFeatureFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32)
        write_features(tmp_path / "x.feat", x)
        back = read_features(tmp_path / "x.feat")
        assert back.dtype == np.float64
        assert back.astype(np.float32).tobytes() == x.tobytes()
        write_features(tmp_path / "y.feat", back)
        assert (tmp_path / "y.feat").read_bytes() == (tmp_path / "x.feat").read_bytes()

    def test_bad_magic(self, tmp_path):
        write_features(tmp_path / "x.feat", np.ones((2, 2)))
        raw = bytearray((tmp_path / "x.feat").read_bytes())
        raw[:4] = b"NOPE"
        (tmp_path / "x.feat").write_bytes(bytes(raw))
        with pytest.raises(DataError, match="magic"):
            read_features(tmp_path / "x.feat")

    def test_length_mismatch(self, tmp_path):
        write_features(tmp_path / "x.feat", np.ones((3, 2)))
        (tmp_path / "x.feat").write_bytes((tmp_path / "x.feat").read_bytes()[:-4])
        with pytest.raises(DataError, match="payload"):
            read_features(tmp_path / "x.feat")


class TestManifest:
    def test_round_trip(self, tmp_path):
        ds = small_synth(9)
        write_manifest(tmp_path / "m.tsv", ds.utterances, ds.vocab)
        back = load_manifest(tmp_path / "m.tsv", ds.vocab)
        assert [u.id for u in back] == [u.id for u in ds.utterances]
        for u, w in zip(back, ds.utterances):
            assert u.features.tobytes() == w.features.tobytes()
            assert u.transcript == w.transcript
        assert read_transcripts(tmp_path / "m.tsv")[back[0].id] == ds.vocab.decode(back[0].transcript)

    def test_missing_file_names_row(self, tmp_path):
        ds = small_synth(10, n_utts=3)
        write_manifest(tmp_path / "m.tsv", ds.utterances, ds.vocab)
        (tmp_path / "feats" / f"{ds.utterances[1].id}.feat").unlink()
        with pytest.raises(DataError, match=r"m\.tsv:2"):
            load_manifest(tmp_path / "m.tsv", ds.vocab)

    def test_duplicate_id(self, tmp_path):
        ds = small_synth(11, n_utts=2)
        write_manifest(tmp_path / "m.tsv", ds.utterances, ds.vocab)
        lines = (tmp_path / "m.tsv").read_text().splitlines()
        (tmp_path / "m.tsv").write_text("\n".join(lines + lines[:1]) + "\n")
        with pytest.raises(DataError, match="duplicate"):
            load_manifest(tmp_path / "m.tsv", ds.vocab)

    def test_wrong_column_count(self, tmp_path):
        (tmp_path / "m.tsv").write_text("utt0\tonly-two\n")
        with pytest.raises(DataError, match="3 tab-separated"):
            load_manifest(tmp_path / "m.tsv", Vocabulary.synthetic(3))


class TestBatching:
    def test_batch_size_one_is_unpadded(self):
        ds = small_synth(12)
        for batch, u in zip(make_batches(ds.utterances, 1), ds.utterances):
            assert batch.features.shape == (1, u.num_frames, 6)
            assert batch.mask.valid.all()

    def test_equal_lengths_need_no_padding(self):
        ds = small_synth(13, min_len=3, max_len=3)
        (batch,) = make_batches(ds.utterances, 6)
        assert batch.mask.valid.all()

    def test_padding_is_zero_and_mask_matches(self):
        ds = small_synth(14, n_utts=10)
        for batch in make_batches(ds.utterances, 4, seed=1):
            np.testing.assert_array_equal(batch.mask.lengths, batch.lengths)
            assert not batch.features[~batch.mask.valid].any()

    def test_seeded_order_is_deterministic_and_complete(self):
        ds = small_synth(15, n_utts=11)
        a = [b.ids for b in make_batches(ds.utterances, 3, seed=[7, 0, 2])]
        b = [b.ids for b in make_batches(ds.utterances, 3, seed=[7, 0, 2])]
        assert a == b
        assert sorted(i for ids in a for i in ids) == sorted(u.id for u in ds.utterances)

    def test_sorted_batches_group_lengths(self):
        ds = small_synth(16, n_utts=12, min_len=1, max_len=8)
        ranges = sorted((b.lengths.min(), b.lengths.max()) for b in
                        make_batches(ds.utterances, 4, sort_by_length=True, seed=0))
        assert all(hi <= lo_next for (_, hi), (lo_next, _) in zip(ranges, ranges[1:]))

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            make_batches([], 0)


@pytest.mark.parametrize("backbone", ["transformer", "conformer"])
def test_batched_loss_equals_individual(backbone):
    ds = small_synth(17, n_utts=4, min_len=2, max_len=6)
    cfg = GicConfig(backbone=backbone, num_layers=2, num_taps=1, d_model=8, heads=2, d_ff=16,
                    vocab_size=5, d_feat=6, conv_kernel=5)
    model = GicModel(cfg, seed=0)
    (batch,) = make_batches(ds.utterances, 4)
    assert not batch.mask.valid.all()
    together = model(batch.features, batch.lengths, batch.labels).utterance_losses
    alone = [float(model(u.features[None], [u.num_frames], [u.transcript]).loss.data) for u in ds.utterances]
    np.testing.assert_allclose(together, alone, rtol=0, atol=1e-9)

