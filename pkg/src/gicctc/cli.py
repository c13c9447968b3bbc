"""``gicctc`` command line.

Exit codes: 0 success, 1 usage/configuration error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .checkpoint import CheckpointError
from .data import DataError, Vocabulary, write_manifest
from .model import ConfigError
from .ngram import UnknownTokenError, lm_train
from .pipeline import (corpus_from_text, format_report, format_sweep, run_decode, run_sweep,
                       run_training, score_files, synth_corpus)
from .config import SynthSection
from .train import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("gicctc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_synth_data(args) -> int:
    s = SynthSection(seed=args.seed, n_train=args.n_train, n_valid=args.n_valid, vocab_size=args.vocab_size,
                     min_len=args.min_len, max_len=args.max_len, frames_per_token=args.frames_per_token,
                     noise_std=args.noise_std, d_feat=args.d_feat, allow_repeats=args.allow_repeats,
                     transition_concentration=args.transition_concentration)
    corpus = synth_corpus(s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(out / "vocab.txt")
    write_manifest(out / "train.tsv", corpus.train, corpus.vocab)
    write_manifest(out / "valid.tsv", corpus.valid, corpus.vocab)
    text = "\n".join(" ".join(corpus.vocab.decode(u.transcript)) for u in corpus.train)
    (out / "train.txt").write_text(text + "\n", encoding="utf-8")
    print(f"wrote {len(corpus.train)} train / {len(corpus.valid)} valid utterances to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = config_mod.load(args.config)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs

    def report(m):
        extra = "".join(f" layer{d}={v:.4f}" for d, v in m.taps.items())
        cer = "" if m.valid_cer is None else f" valid_cer={m.valid_cer:.4f}"
        log.info("epoch %d step %d lr=%.3g loss=%.4f final=%.4f%s%s",
                 m.epoch, m.step, m.lr, m.total, m.final, extra, cer)

    trainer = run_training(cfg, args.out, resume=args.resume, on_epoch=report)
    if trainer.skipped:
        print(f"skipped {trainer.skipped} infeasible utterance(s)")
    print(f"checkpoint: {Path(args.out) / 'checkpoint.ckpt'}")
    return EXIT_OK


def cmd_decode(args) -> int:
    written = run_decode(args.checkpoint, args.manifest, args.out, args.mode, args.beam, args.lm,
                         args.lm_weight, args.length_bonus, args.probe_taps)
    for key, path in sorted(written.items(), key=lambda kv: (kv[0] is None, kv[0] or 0)):
        print(f"{'final' if key is None else f'layer {key}'}: {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    report = score_files(args.ref, args.hyp)
    print(format_report(report, args.worst))
    return EXIT_OK


def cmd_lm_train(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    corpus = corpus_from_text(args.corpus, vocab, args.mode)
    weights = args.weights
    if weights is not None and len(weights) != args.order:
        raise UsageError(f"--weights needs {args.order} values, got {len(weights)}")
    model = lm_train(corpus, len(vocab), args.order, weights)
    model.save(args.out)
    print(f"{args.order}-gram LM over {len(corpus)} sentences, "
          f"train perplexity {model.perplexity(corpus):.3f}: {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = config_mod.load(args.config)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    rows = run_sweep(cfg, args.axis, [v for v in args.values.split(",") if v.strip()])
    table = format_sweep(args.axis, rows)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gicctc", description="CTC encoders with gated interlayer collaboration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write a synthetic corpus (features, manifests, vocab, text)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-train", type=int, default=256)
    s.add_argument("--n-valid", type=int, default=64)
    s.add_argument("--vocab-size", type=int, default=8, help="including the blank")
    s.add_argument("--min-len", type=int, default=4)
    s.add_argument("--max-len", type=int, default=10)
    s.add_argument("--frames-per-token", type=int, default=8)
    s.add_argument("--noise-std", type=float, default=0.05)
    s.add_argument("--d-feat", type=int, default=16)
    s.add_argument("--allow-repeats", action="store_true")
    s.add_argument("--transition-concentration", type=float, default=None)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train a model from a YAML run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="run directory (checkpoint.ckpt, metrics.tsv)")
    s.add_argument("--resume", help="checkpoint to continue from; its config must match")
    s.add_argument("--epochs", type=int, help="override train.epochs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("decode", help="decode a manifest to a hypothesis TSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("greedy", "beam"), default="greedy")
    s.add_argument("--beam", type=int, default=10)
    s.add_argument("--lm")
    s.add_argument("--lm-weight", type=float, default=0.3)
    s.add_argument("--length-bonus", type=float, default=0.0)
    s.add_argument("--probe-taps", action="store_true", help="also decode every tap layer")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("evaluate", help="score hypotheses against references")
    s.add_argument("--ref", required=True, help="reference manifest or id<TAB>tokens file")
    s.add_argument("--hyp", required=True)
    s.add_argument("--worst", type=int, default=10)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("lm-train", help="train an interpolated n-gram LM")
    s.add_argument("--corpus", required=True, help="text, one utterance per line")
    s.add_argument("--vocab", required=True)
    s.add_argument("--order", type=int, default=4)
    s.add_argument("--weights", type=_floats, help="highest order first, must sum to 1")
    s.add_argument("--mode", choices=("words", "chars"), default="words")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_lm_train)

    s = sub.add_parser("sweep", help="train once per value of K or lambda")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", choices=("K", "lambda"), required=True)
    s.add_argument("--values", required=True, help="comma-separated")
    s.add_argument("--epochs", type=int, help="override train.epochs")
    s.add_argument("--out", help="write the table here as TSV")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, UnknownTokenError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
