"""Training loop, optimiser, learning-rate schedule and batch decoding."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .ctc import greedy_decode, min_frames, prefix_beam_search
from .data import DataError, Utterance, make_batches
from .layers import subsampled_length
from .metrics import aggregate_cer
from .model import GicModel

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


@dataclass
class OptimConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 5.0


def learning_rate(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` then inverse-square-root decay (step is 1-based)."""
    if step < 1:
        return 0.0
    return peak * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    def __init__(self, named_params: Sequence[tuple[str, tn.Tensor]], cfg: OptimConfig):
        self.params = list(named_params)
        self.cfg = cfg
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self) -> tuple[float, float]:
        """Clip by global norm, apply one update; returns (lr, pre-clip grad norm)."""
        cfg = self.cfg
        self.step_count += 1
        norm = tn.parameters_grad_norm(p for _, p in self.params)
        if not math.isfinite(norm):
            raise NumericError(f"non-finite gradient norm at step {self.step_count}")
        clip = min(1.0, cfg.clip_norm / norm) if cfg.clip_norm > 0 and norm > 0 else 1.0
        lr = learning_rate(self.step_count, cfg.peak_lr, cfg.warmup_steps)
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad * clip
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        return lr, norm

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"m.{name}"] = self.m[name].copy()
            out[f"v.{name}"] = self.v[name].copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name] = np.array(state[f"m.{name}"], dtype=np.float64)
            self.v[name] = np.array(state[f"v.{name}"], dtype=np.float64)
        self.step_count = step_count


def feasible(utt: Utterance) -> bool:
    return int(subsampled_length(utt.num_frames)) >= min_frames(utt.transcript)


@dataclass
class EpochMetrics:
    epoch: int
    step: int
    lr: float
    total: float
    final: float
    taps: dict[int, float] = field(default_factory=dict)
    valid_cer: float | None = None

    def row(self) -> dict[str, float]:
        r = {"epoch": self.epoch, "step": self.step, "lr": self.lr, "loss": self.total, "ctc_final": self.final}
        for depth, v in self.taps.items():
            r[f"ctc_layer{depth}"] = v
        if self.valid_cer is not None:
            r["valid_cer"] = self.valid_cer
        return r


class Trainer:
    """Mini-batch training with a step-addressable data order.

    Batch order in epoch ``e`` depends only on ``(seed, e)``, so a run resumed
    from any step replays the same batches as an uninterrupted one.
    """

    def __init__(self, model: GicModel, train: Sequence[Utterance], optim: OptimConfig,
                 batch_size: int = 8, seed: int = 0, valid: Sequence[Utterance] | None = None,
                 sort_by_length: bool = False):
        self.model = model
        kept = [u for u in train if feasible(u)]
        self.skipped = len(train) - len(kept)
        if self.skipped:
            log.warning("skipping %d utterance(s) too short for their transcripts", self.skipped)
        if not kept:
            raise DataError("no feasible training utterances")
        self.train = kept
        self.valid = list(valid) if valid else []
        self.batch_size = batch_size
        self.sort_by_length = sort_by_length
        self.seed = seed
        self.optimizer = Adam(model.named_parameters(), optim)
        self.rng = np.random.default_rng([seed, 1])
        self.step = 0
        self._epoch_cache: tuple[int, list] | None = None
        self.history: list[EpochMetrics] = []

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train) / self.batch_size)

    def _batches(self, epoch: int):
        if self._epoch_cache is None or self._epoch_cache[0] != epoch:
            self._epoch_cache = (epoch, make_batches(self.train, self.batch_size, self.sort_by_length,
                                                     seed=[self.seed, 0, epoch]))
        return self._epoch_cache[1]

    def train_step(self) -> dict:
        epoch, idx = divmod(self.step, self.steps_per_epoch)
        batch = self._batches(epoch)[idx]
        model = self.model
        model.zero_grad()
        out = model(batch.features, batch.lengths, batch.labels, train=True, rng=self.rng)
        B = len(batch)
        loss = tn.scale(out.loss, 1.0 / B)
        if not math.isfinite(float(loss.data)):
            raise NumericError(f"non-finite loss at step {self.step + 1} (batch {batch.ids})")
        tn.backward(loss)
        lr, _ = self.optimizer.step()
        self.step += 1
        return {"lr": lr, "n": B, "total": float(out.loss.data), "final": float(out.final_loss.data),
                "taps": {d: float(v.data) for d, v in out.tap_losses.items()}}

    def train_epoch(self) -> EpochMetrics:
        epoch = self.step // self.steps_per_epoch
        end = (epoch + 1) * self.steps_per_epoch
        n = 0
        total = final = 0.0
        taps: dict[int, float] = {}
        lr = 0.0
        while self.step < end:
            r = self.train_step()
            n += r["n"]
            total += r["total"]
            final += r["final"]
            for d, v in r["taps"].items():
                taps[d] = taps.get(d, 0.0) + v
            lr = r["lr"]
        m = EpochMetrics(epoch + 1, self.step, lr, total / n, final / n, {d: v / n for d, v in taps.items()})
        if self.valid:
            m.valid_cer = evaluate_cer(self.model, self.valid)
        self.history.append(m)
        return m

    def fit(self, epochs: int, stop_at_zero_cer: bool = False, callback=None) -> list[EpochMetrics]:
        done = self.step // self.steps_per_epoch
        for _ in range(done, epochs):
            m = self.train_epoch()
            if callback:
                callback(m)
            if stop_at_zero_cer and m.valid_cer == 0.0:
                break
        return self.history

    def rng_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_rng_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def decode(model: GicModel, utts: Sequence[Utterance], mode: str = "greedy", beam: int = 10, lm=None,
           lm_weight: float = 0.3, length_bonus: float = 0.0, batch_size: int = 16,
           probe_taps: bool = False) -> dict[int | None, list[list[int]]]:
    """Hypotheses per utterance, keyed by tap layer (``None`` = final layer).

    Batches follow the input order, so outputs align with ``utts``.
    """
    if mode not in ("greedy", "beam"):
        raise ValueError(f"unknown decode mode {mode!r}")
    result: dict[int | None, list[list[int]]] = {None: []}
    for start in range(0, len(utts), batch_size):
        chunk = list(utts[start:start + batch_size])
        batch = make_batches(chunk, len(chunk))[0]
        with tn.no_grad():
            out = model(batch.features, batch.lengths)
        sources = [(None, out.log_probs)]
        if probe_taps:
            sources += sorted(out.tap_log_probs.items())
        for key, lp in sources:
            hyps = result.setdefault(key, [])
            for b in range(len(chunk)):
                frames = lp.data[b, : out.lengths[b]]
                if mode == "greedy":
                    hyps.append(greedy_decode(frames))
                else:
                    hyps.append(prefix_beam_search(frames, beam, lm, lm_weight, length_bonus, log_domain=True))
    return result


def evaluate_cer(model: GicModel, utts: Sequence[Utterance], **decode_kw) -> float:
    hyps = decode(model, utts, **decode_kw)[None]
    return aggregate_cer([u.transcript for u in utts], hyps).rate
