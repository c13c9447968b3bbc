"""Levenshtein alignment counts and corpus error rates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    insertions: int
    deletions: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(self.substitutions + other.substitutions,
                          self.insertions + other.insertions,
                          self.deletions + other.deletions)


def edit_distance(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Unit-cost Levenshtein alignment split into S/I/D.

    Among minimum-cost alignments the one with the most substitutions is
    reported, so swapping ``ref`` and ``hyp`` keeps S and exchanges I and D.
    """
    n, m = len(ref), len(hyp)
    # cell = (cost, -subs, ins, dels); tuple ordering gives the tie-break
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            c, s, ins, dels = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (c, s, ins, dels)
            else:
                diag = (c + 1, s - 1, ins, dels)
            c, s, ins, dels = prev[j]
            up = (c + 1, s, ins, dels + 1)
            c, s, ins, dels = cur[j - 1]
            left = (c + 1, s, ins + 1, dels)
            cur.append(min(diag, up, left, key=lambda x: (x[0], x[1])))
        prev = cur
    cost, neg_s, ins, dels = prev[m]
    return EditCounts(-neg_s, ins, dels)


@dataclass(frozen=True)
class ErrorReport:
    counts: EditCounts
    ref_tokens: int
    per_utterance: tuple[tuple[str, EditCounts, int], ...] = ()

    @property
    def rate(self) -> float:
        """(S+I+D)/N; an empty reference set divides by 1 instead."""
        return self.counts.errors / max(self.ref_tokens, 1)


def aggregate_cer(refs: Sequence[Sequence], hyps: Sequence[Sequence], ids: Sequence[str] | None = None) -> ErrorReport:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(refs))]
    total = EditCounts(0, 0, 0)
    rows = []
    for uid, r, h in zip(ids, refs, hyps):
        c = edit_distance(r, h)
        total = total + c
        rows.append((uid, c, len(r)))
    return ErrorReport(total, sum(len(r) for r in refs), tuple(rows))
