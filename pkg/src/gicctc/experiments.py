"""Desk-scale ablation, per-tap probe and LM fusion comparison.

Three encoder variants are trained on the same synthetic corpus and seed:

* ``plain``: final-layer CTC only,
* ``intermediate``: plus auxiliary CTC losses at the tap layers,
* ``gic``: plus gated interlayer collaboration blocks at the taps.

Run ``python -m gicctc.experiments --out table.tsv`` for the full table.
"""
from __future__ import annotations

import argparse
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .config import SynthSection
from .metrics import aggregate_cer
from .model import GicConfig, GicModel
from .ngram import lm_train
from .pipeline import Corpus, synth_corpus
from .train import OptimConfig, Trainer, decode

log = logging.getLogger(__name__)

VARIANTS: dict[str, dict] = {
    "plain": {"enable_gic": False, "enable_intermediate_loss": False},
    "intermediate": {"enable_gic": False},
    "gic": {},
}


@dataclass
class AblationSetup:
    seeds: tuple[int, ...] = (0, 1, 2)
    epochs: int = 80
    average_last: int = 10
    batch_size: int = 16
    model: GicConfig = field(default_factory=GicConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    # noisy frames plus a predictable token grammar, so textual context can help
    synth: SynthSection = field(default_factory=lambda: SynthSection(
        n_train=256, n_valid=64, noise_std=0.8, transition_concentration=0.2))


@dataclass
class RunResult:
    variant: str
    seed: int
    cer: float
    tap_cer: dict[int, float]
    seconds: float
    model: GicModel = field(repr=False)
    corpus: Corpus = field(repr=False)


def average_state(states: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Parameter-wise mean of several snapshots of one model."""
    return {k: np.mean([s[k] for s in states], axis=0) for k in states[0]}


def held_out_cer(model: GicModel, corpus: Corpus, **decode_kw) -> dict[int | None, float]:
    refs = [u.transcript for u in corpus.valid]
    hyps = decode(model, corpus.valid, **decode_kw)
    return {k: aggregate_cer(refs, h).rate for k, h in hyps.items()}


def train_variant(setup: AblationSetup, variant: str, seed: int, corpus: Corpus) -> RunResult:
    cfg = replace(setup.model, **VARIANTS[variant])
    start = time.perf_counter()
    model = GicModel(cfg, seed=seed)
    trainer = Trainer(model, corpus.train, setup.optim, setup.batch_size, seed)
    snapshots = []

    def keep(_):
        if trainer.step // trainer.steps_per_epoch > setup.epochs - setup.average_last:
            snapshots.append(model.state_dict())

    trainer.fit(setup.epochs, callback=keep)
    if snapshots:
        model.load_state_dict(average_state(snapshots))
    rates = held_out_cer(model, corpus, probe_taps=True)
    final = rates.pop(None)
    return RunResult(variant, seed, final, rates, time.perf_counter() - start, model, corpus)


def run_ablation(setup: AblationSetup, variants: Sequence[str] = tuple(VARIANTS),
                 on_result: Callable[[RunResult], None] | None = None) -> list[RunResult]:
    results = []
    for seed in setup.seeds:
        corpus = synth_corpus(replace(setup.synth, seed=seed))
        for name in variants:
            r = train_variant(setup, name, seed, corpus)
            log.info("%s seed %d: CER %.4f (%.0fs)", name, seed, r.cer, r.seconds)
            if on_result:
                on_result(r)
            results.append(r)
    return results


def mean_cer(results: Sequence[RunResult], variant: str) -> float:
    return float(np.mean([r.cer for r in results if r.variant == variant]))


def mean_tap_cer(results: Sequence[RunResult], variant: str = "gic") -> dict[int | None, float]:
    """Seed-averaged CER per tap layer, with the final layer under ``None``."""
    runs = [r for r in results if r.variant == variant]
    out: dict[int | None, float] = {t: float(np.mean([r.tap_cer[t] for r in runs])) for t in runs[0].tap_cer}
    out[None] = float(np.mean([r.cer for r in runs]))
    return out


def lm_fusion(results: Sequence[RunResult], variant: str = "gic", beam: int = 10,
              lm_weight: float = 0.3, order: int = 4) -> list[tuple[int, float, float]]:
    """(seed, CER without LM, CER with a transcript-trained LM) per run, both beam searched."""
    rows = []
    for r in results:
        if r.variant != variant:
            continue
        vocab_size = len(r.corpus.vocab)
        lm = lm_train([u.transcript for u in r.corpus.train], vocab_size, order)
        base = held_out_cer(r.model, r.corpus, mode="beam", beam=beam, lm_weight=0.0)[None]
        fused = held_out_cer(r.model, r.corpus, mode="beam", beam=beam, lm=lm, lm_weight=lm_weight)[None]
        rows.append((r.seed, base, fused))
    return rows


def format_table(results: Sequence[RunResult]) -> str:
    seeds = sorted({r.seed for r in results})
    variants = [v for v in VARIANTS if any(r.variant == v for r in results)]
    lines = ["variant\t" + "\t".join(f"seed{s}" for s in seeds) + "\tmean"]
    for v in variants:
        by_seed = {r.seed: r.cer for r in results if r.variant == v}
        cells = [f"{by_seed[s]:.4f}" for s in seeds]
        lines.append(f"{v}\t" + "\t".join(cells) + f"\t{mean_cer(results, v):.4f}")
    return "\n".join(lines) + "\n"


def format_probe(taps: dict[int | None, float]) -> str:
    keys = sorted((k for k in taps if k is not None)) + [None]
    return "\n".join(["layer\tcer"] + [f"{'final' if k is None else k}\t{taps[k]:.4f}" for k in keys]) + "\n"


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m gicctc.experiments", description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=AblationSetup.epochs)
    p.add_argument("--average-last", type=int, default=AblationSetup.average_last)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", help="write the ablation table here")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    setup = AblationSetup(seeds=tuple(int(s) for s in args.seeds.split(",")), epochs=args.epochs,
                          average_last=args.average_last)
    results = run_ablation(setup)
    table = format_table(results)
    print(table + "\n" + format_probe(mean_tap_cer(results)))
    for seed, base, fused in lm_fusion(results):
        print(f"seed {seed}: beam {base:.4f}  beam+LM {fused:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(table)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
