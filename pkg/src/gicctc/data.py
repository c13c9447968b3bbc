"""Vocabulary, feature/manifest files, synthetic corpora and padded batches.

Feature file layout (little-endian)::

    b"GICF"  magic
    u8       format version (1)
    u32      T (frames)
    u32      d (feature dimension)
    f32[T*d] row-major values

Manifest: UTF-8 TSV rows ``utt_id<TAB>feature_path<TAB>transcript`` where the
transcript is whitespace-separated tokens and relative feature paths resolve
against the manifest's directory.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .layers import PadMask

BLANK_TOKEN = "<blank>"
FEATURE_MAGIC = b"GICF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sBII")


class DataError(ValueError):
    pass


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens or tokens[0] != BLANK_TOKEN:
            raise DataError(f"vocabulary must start with {BLANK_TOKEN}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary tokens must be unique")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, tokens: Iterable[str]) -> list[int]:
        ids = []
        for t in tokens:
            if t not in self.index:
                raise DataError(f"unknown token {t!r}")
            if self.index[t] == 0:
                raise DataError("blank may not appear in a transcript")
            ids.append(self.index[t])
        return ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        names = [chr(ord("a") + i) if i < 26 else f"t{i}" for i in range(size - 1)]
        return cls([BLANK_TOKEN] + names)


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # (T, d_feat) float64
    transcript: list[int]

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


# ---------------------------------------------------------------- feature files

def write_features(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise DataError(f"features must be 2-D, got shape {arr.shape}")
    T, d = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, d))
        f.write(arr.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, T, d = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * T * d:
        raise DataError(f"{path}: header says {T}x{d} but payload has {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(T, d).astype(np.float64)


def write_manifest(path, utterances: Sequence[Utterance], vocab: Vocabulary, feature_dir="feats") -> None:
    path = Path(path)
    fdir = path.parent / feature_dir
    fdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for u in utterances:
        rel = Path(feature_dir) / f"{u.id}.feat"
        write_features(path.parent / rel, u.features)
        rows.append(f"{u.id}\t{rel.as_posix()}\t{' '.join(vocab.decode(u.transcript))}")
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_transcripts(path) -> dict[str, list[str]]:
    """id -> token strings, from a manifest or hypothesis TSV (``id<TAB>...<TAB>tokens``)."""
    out: dict[str, list[str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            raise DataError(f"{path}:{lineno}: expected tab-separated columns")
        if cols[0] in out:
            raise DataError(f"{path}:{lineno}: duplicate utterance id {cols[0]!r}")
        out[cols[0]] = cols[-1].split()
    return out


def load_manifest(path, vocab: Vocabulary) -> list[Utterance]:
    path = Path(path)
    utts: list[Utterance] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(cols)}")
        uid, fpath, text = cols
        if uid in seen:
            raise DataError(f"{path}:{lineno}: duplicate utterance id {uid!r}")
        seen.add(uid)
        fp = Path(fpath)
        if not fp.is_absolute():
            fp = path.parent / fp
        if not fp.exists():
            raise DataError(f"{path}:{lineno}: feature file for {uid!r} not found: {fp}")
        try:
            ids = vocab.encode(text.split())
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        utts.append(Utterance(uid, read_features(fp), ids))
    return utts


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthDataset:
    vocab: Vocabulary
    patterns: np.ndarray  # (|V|, d_feat); row 0 unused
    utterances: list[Utterance] = field(default_factory=list)


def synth_generate(seed: int, n_utts: int, vocab_size: int, min_len: int, max_len: int,
                   frames_per_token: int, noise_std: float, d_feat: int = 16,
                   allow_repeats: bool = False,
                   transition_concentration: float | None = None) -> SynthDataset:
    """Random token strings rendered as noisy per-token pattern frames.

    Token patterns are seeded Gaussian rows scaled to unit norm. Adjacent
    repeats are excluded unless ``allow_repeats``: identical neighbours
    would render as one indistinguishable segment. Features are rounded
    to float32 so that writing and re-reading them is lossless.

    Tokens are drawn uniformly unless ``transition_concentration`` is set, in
    which case they follow a seeded first-order Markov chain whose rows are
    Dirichlet draws with that concentration (small values -> predictable text).
    """
    if vocab_size < 2:
        raise DataError("vocab_size must be >= 2")
    if not allow_repeats and vocab_size < 3 and max_len > 1:
        raise DataError("need at least two tokens to avoid adjacent repeats")
    if not 1 <= min_len <= max_len:
        raise DataError(f"invalid length range [{min_len}, {max_len}]")
    if frames_per_token < 1 or noise_std < 0 or n_utts < 0:
        raise DataError("frames_per_token >= 1, noise_std >= 0 and n_utts >= 0 required")
    rng = np.random.default_rng(seed)
    patterns = rng.normal(size=(vocab_size, d_feat))
    patterns /= np.linalg.norm(patterns, axis=1, keepdims=True)
    patterns[0] = 0.0
    n_tok = vocab_size - 1
    if transition_concentration is not None:
        if transition_concentration <= 0:
            raise DataError("transition_concentration must be positive")
        # row 0: sentence start; row v: successors of token v
        trans = rng.dirichlet(np.full(n_tok, transition_concentration), size=vocab_size)
        if not allow_repeats:
            trans[np.arange(1, vocab_size), np.arange(n_tok)] = 0.0
            trans /= trans.sum(axis=1, keepdims=True)
    else:
        trans = np.ones((vocab_size, n_tok))
        if not allow_repeats:
            trans[np.arange(1, vocab_size), np.arange(n_tok)] = 0.0
        trans /= trans.sum(axis=1, keepdims=True)
    utts = []
    width = len(str(max(n_utts - 1, 0)))
    for i in range(n_utts):
        n = int(rng.integers(min_len, max_len + 1))
        toks: list[int] = []
        for _ in range(n):
            row = trans[toks[-1] if toks else 0]
            toks.append(1 + int(rng.choice(n_tok, p=row)))
        clean = np.repeat(patterns[toks], frames_per_token, axis=0)
        feats = clean + noise_std * rng.normal(size=clean.shape)
        feats = feats.astype(np.float32).astype(np.float64)
        utts.append(Utterance(f"utt{i:0{width}d}", feats, toks))
    return SynthDataset(Vocabulary.synthetic(vocab_size), patterns, utts)


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray  # (B, T_max, d_feat), zero padded
    lengths: np.ndarray
    labels: list[list[int]]
    label_lengths: np.ndarray
    mask: PadMask

    def __len__(self) -> int:
        return len(self.ids)


def collate(utts: Sequence[Utterance]) -> Batch:
    T = max(u.num_frames for u in utts)
    d = utts[0].features.shape[1]
    feats = np.zeros((len(utts), T, d))
    for b, u in enumerate(utts):
        feats[b, : u.num_frames] = u.features
    lengths = np.array([u.num_frames for u in utts], dtype=np.int64)
    return Batch([u.id for u in utts], feats, lengths, [list(u.transcript) for u in utts],
                 np.array([len(u.transcript) for u in utts], dtype=np.int64),
                 PadMask.from_lengths(lengths, T))


def make_batches(utts: Sequence[Utterance], batch_size: int, sort_by_length: bool = False,
                 seed: int | None = None) -> list[Batch]:
    """Group utterances into padded batches.

    ``sort_by_length`` buckets similar lengths together; a ``seed`` shuffles
    (utterances, or whole batches when sorting). Same inputs, same batches.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = list(range(len(utts)))
    rng = np.random.default_rng(seed) if seed is not None else None
    if sort_by_length:
        order.sort(key=lambda i: (utts[i].num_frames, utts[i].id))
    elif rng is not None:
        order = [int(i) for i in rng.permutation(len(utts))]
    groups = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if sort_by_length and rng is not None:
        groups = [groups[int(i)] for i in rng.permutation(len(groups))]
    return [collate([utts[i] for i in g]) for g in groups]

