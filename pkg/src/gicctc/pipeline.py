"""End-to-end operations behind the command line: data, training runs,
checkpoints, decoding, scoring and sweeps."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import checkpoint
from .config import RunConfig, SynthSection
from .data import DataError, Utterance, Vocabulary, load_manifest, read_transcripts, synth_generate
from .metrics import ErrorReport, aggregate_cer
from .model import ConfigError, GicModel, config_from_dict
from .ngram import NgramModel
from .train import EpochMetrics, Trainer, decode

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class Corpus:
    vocab: Vocabulary
    train: list[Utterance]
    valid: list[Utterance]


def synth_corpus(s: SynthSection) -> Corpus:
    ds = synth_generate(s.seed, s.n_train + s.n_valid, s.vocab_size, s.min_len, s.max_len,
                        s.frames_per_token, s.noise_std, s.d_feat, s.allow_repeats,
                        s.transition_concentration)
    return Corpus(ds.vocab, ds.utterances[: s.n_train], ds.utterances[s.n_train:])


def load_corpus(cfg: RunConfig) -> Corpus:
    d = cfg.data
    if d.synth is not None:
        corpus = synth_corpus(d.synth)
    else:
        vocab = Vocabulary.load(d.vocab)
        train = load_manifest(d.train_manifest, vocab)
        valid = load_manifest(d.valid_manifest, vocab) if d.valid_manifest else []
        corpus = Corpus(vocab, train, valid)
    check_compatible(cfg, corpus.vocab, corpus.train + corpus.valid)
    return corpus


def check_compatible(cfg: RunConfig, vocab: Vocabulary, utts: Sequence[Utterance]) -> None:
    if cfg.model.vocab_size != len(vocab):
        raise DataError(f"model.vocab_size={cfg.model.vocab_size} but vocabulary has {len(vocab)} tokens")
    for u in utts:
        if u.features.shape[1] != cfg.model.d_feat:
            raise DataError(f"{u.id}: feature dim {u.features.shape[1]} != model.d_feat {cfg.model.d_feat}")


def make_trainer(cfg: RunConfig, corpus: Corpus) -> Trainer:
    model = GicModel(copy.deepcopy(cfg.model), seed=cfg.seed)
    return Trainer(model, corpus.train, cfg.optim, cfg.train.batch_size, cfg.seed,
                   valid=corpus.valid, sort_by_length=cfg.train.sort_by_length)


# ---------------------------------------------------------------- checkpoints

def checkpoint_contents(trainer: Trainer, cfg: RunConfig, vocab: Vocabulary) -> tuple[dict, dict]:
    arrays = {f"param.{k}": v for k, v in trainer.model.state_dict().items()}
    arrays.update({f"adam.{k}": v for k, v in trainer.optimizer.state_dict().items()})
    meta = {
        "kind": "model",
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "vocab": vocab.tokens,
        "step": trainer.step,
        "epoch": trainer.step // trainer.steps_per_epoch,
        "rng_state": trainer.rng_state(),
        "history": [m.row() for m in trainer.history],
    }
    return meta, arrays


def save_checkpoint(path, trainer: Trainer, cfg: RunConfig, vocab: Vocabulary) -> None:
    checkpoint.save(path, *checkpoint_contents(trainer, cfg, vocab))


def _split(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_model(path) -> tuple[GicModel, Vocabulary, dict]:
    meta, arrays = checkpoint.load(path)
    if meta.get("kind") != "model":
        raise checkpoint.CheckpointError(f"{path} is not a model checkpoint")
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise checkpoint.CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    model = GicModel(config_from_dict(meta["config"]["model"]), seed=meta["config"]["seed"])
    model.load_state_dict(_split(arrays, "param."))
    return model, Vocabulary(meta["vocab"]), meta


def _resumable(config: dict) -> dict:
    # the epoch budget may grow between runs; everything else must match
    out = copy.deepcopy(config)
    out["train"].pop("epochs", None)
    return out


def restore_trainer(path, cfg: RunConfig, corpus: Corpus) -> Trainer:
    """Rebuild a trainer from a checkpoint; the stored config must equal ``cfg`` up to ``train.epochs``."""
    meta, arrays = checkpoint.load(path)
    if meta.get("kind") != "model":
        raise checkpoint.CheckpointError(f"{path} is not a model checkpoint")
    if _resumable(meta["config"]) != _resumable(cfg.to_dict()):
        raise ConfigError(f"{path}: checkpoint was written with a different configuration")
    if meta["vocab"] != corpus.vocab.tokens:
        raise ConfigError(f"{path}: checkpoint vocabulary differs from the data vocabulary")
    trainer = make_trainer(cfg, corpus)
    trainer.model.load_state_dict(_split(arrays, "param."))
    trainer.optimizer.load_state_dict(_split(arrays, "adam."), meta["step"])
    trainer.step = meta["step"]
    trainer.set_rng_state(meta["rng_state"])
    trainer.history = [_metrics_from_row(r) for r in meta["history"]]
    return trainer


def _metrics_from_row(r: dict) -> EpochMetrics:
    taps = {int(k[len("ctc_layer"):]): v for k, v in r.items() if k.startswith("ctc_layer")}
    return EpochMetrics(int(r["epoch"]), int(r["step"]), r["lr"], r["loss"], r["ctc_final"], taps,
                        r.get("valid_cer"))


# ---------------------------------------------------------------- metrics log

def format_metrics(history: Sequence[EpochMetrics]) -> str:
    if not history:
        return ""
    cols = list(history[0].row())
    lines = ["\t".join(cols)]
    for m in history:
        row = m.row()
        lines.append("\t".join(repr(row.get(c, "")) if isinstance(row.get(c), float) else str(row.get(c, ""))
                               for c in cols))
    return "\n".join(lines) + "\n"


def run_training(cfg: RunConfig, out_dir, resume=None, on_epoch=None) -> Trainer:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(cfg)
    trainer = restore_trainer(resume, cfg, corpus) if resume else make_trainer(cfg, corpus)
    ckpt = out / "checkpoint.ckpt"

    def after_epoch(m: EpochMetrics):
        (out / "metrics.tsv").write_text(format_metrics(trainer.history), encoding="utf-8")
        save_checkpoint(ckpt, trainer, cfg, corpus.vocab)
        if on_epoch:
            on_epoch(m)

    trainer.fit(cfg.train.epochs, callback=after_epoch)
    if not trainer.history or not ckpt.exists():
        save_checkpoint(ckpt, trainer, cfg, corpus.vocab)
        (out / "metrics.tsv").write_text(format_metrics(trainer.history), encoding="utf-8")
    return trainer


# ---------------------------------------------------------------- decode / evaluate

def write_hypotheses(path, ids: Sequence[str], hyps: Sequence[Sequence[int]], vocab: Vocabulary) -> None:
    rows = [f"{uid}\t{' '.join(vocab.decode(h))}" for uid, h in zip(ids, hyps)]
    Path(path).write_text("\n".join(rows) + ("\n" if rows else ""), encoding="utf-8")


def run_decode(checkpoint_path, manifest, out, mode="greedy", beam=10, lm_path=None, lm_weight=0.3,
               length_bonus=0.0, probe_taps=False) -> dict[int | None, Path]:
    model, vocab, _ = load_model(checkpoint_path)
    utts = load_manifest(manifest, vocab)
    for u in utts:
        if u.features.shape[1] != model.config.d_feat:
            raise DataError(f"{u.id}: feature dim {u.features.shape[1]} != model.d_feat {model.config.d_feat}")
    lm = None
    if lm_path:
        lm = NgramModel.load(lm_path)
        if lm.vocab_size != len(vocab):
            raise DataError(f"LM vocabulary size {lm.vocab_size} != model vocabulary {len(vocab)}")
    results = decode(model, utts, mode, beam, lm, lm_weight, length_bonus, probe_taps=probe_taps)
    out = Path(out)
    written = {}
    ids = [u.id for u in utts]
    for key, hyps in results.items():
        path = out if key is None else out.with_name(f"{out.stem}.layer{key}{out.suffix}")
        write_hypotheses(path, ids, hyps, vocab)
        written[key] = path
    return written


def score_files(ref_path, hyp_path) -> ErrorReport:
    """Id-keyed scoring of a hypothesis TSV against a reference manifest/TSV."""
    refs = read_transcripts(ref_path)
    hyps = read_transcripts(hyp_path)
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise DataError(f"hypotheses missing for {len(missing)} utterance(s), e.g. {missing[:3]}")
    extra = sorted(set(hyps) - set(refs))
    if extra:
        raise DataError(f"hypotheses for unknown utterance(s), e.g. {extra[:3]}")
    ids = sorted(refs)
    return aggregate_cer([refs[i] for i in ids], [hyps[i] for i in ids], ids)


def format_report(report: ErrorReport, worst: int = 10) -> str:
    c = report.counts
    lines = [
        f"ER {100 * report.rate:.2f}%  ({c.errors} errors / {report.ref_tokens} reference tokens)",
        f"S {c.substitutions}  I {c.insertions}  D {c.deletions}",
    ]
    ranked = sorted(report.per_utterance, key=lambda r: (-r[1].errors, r[0]))[:worst]
    ranked = [r for r in ranked if r[1].errors > 0]
    if ranked:
        lines.append(f"worst {len(ranked)}:")
        for uid, cnt, n in ranked:
            lines.append(f"  {uid}\t{cnt.errors}/{n}\tS={cnt.substitutions} I={cnt.insertions} D={cnt.deletions}")
    return "\n".join(lines)


# ---------------------------------------------------------------- sweeps

SWEEP_AXES = ("K", "lambda")


@dataclass
class SweepRow:
    value: str
    taps: str
    valid_cer: float | None
    status: str


def run_sweep(template: RunConfig, axis: str, values: Sequence[str]) -> list[SweepRow]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    corpus = load_corpus(template)
    rows = []
    for raw in values:
        cfg = copy.deepcopy(template)
        try:
            if axis == "K":
                cfg.model.num_taps = int(raw)
            else:
                cfg.model.inter_weight = float(raw)
            cfg.validate()
            trainer = make_trainer(cfg, corpus)
            trainer.fit(cfg.train.epochs)
            cer = trainer.history[-1].valid_cer if trainer.history else None
            rows.append(SweepRow(raw, ",".join(map(str, cfg.model.taps)), cer, "ok"))
        except (ConfigError, ValueError, ArithmeticError, RuntimeError) as exc:
            log.warning("sweep point %s=%s failed: %s", axis, raw, exc)
            rows.append(SweepRow(raw, "", None, f"error: {exc}"))
    return rows


def format_sweep(axis: str, rows: Sequence[SweepRow]) -> str:
    lines = [f"{axis}\ttaps\tvalid_cer\tstatus"]
    for r in rows:
        cer = "" if r.valid_cer is None else f"{r.valid_cer:.4f}"
        lines.append(f"{r.value}\t{r.taps}\t{cer}\t{r.status}")
    return "\n".join(lines) + "\n"


def corpus_from_text(path, vocab: Vocabulary, mode: str = "words") -> list[list[int]]:
    """Token-id sentences from a text file, one utterance per line."""
    if mode not in ("words", "chars"):
        raise ValueError(f"mode must be words or chars, got {mode!r}")
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        toks = line.split() if mode == "words" else [ch for ch in line if not ch.isspace()]
        if not toks:
            continue
        try:
            out.append(vocab.encode(toks))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out

