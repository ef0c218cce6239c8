"""Edit-distance and boundary metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class EditCounts:
    sub: int = 0
    ins: int = 0
    dele: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.sub + self.ins + self.dele

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(self.sub + other.sub, self.ins + other.ins, self.dele + other.dele,
                          self.ref_len + other.ref_len)


def edit_counts(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Minimal Levenshtein alignment of ``hyp`` against ``ref`` with S/I/D counts.

    Ties in the backtrace prefer a match/substitution, then deletion, then
    insertion, so the counts are deterministic.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j = n, m
    sub = ins = dele = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(sub), ins, dele, n)


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    return edit_counts(ref, hyp).errors


def corpus_cer(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> tuple[float, EditCounts]:
    """Total edits over total reference length."""
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps differ in length")
    total = EditCounts()
    for r, h in zip(refs, hyps):
        total = total + edit_counts(r, h)
    if total.ref_len == 0:
        return (0.0 if total.errors == 0 else float("inf")), total
    return total.errors / total.ref_len, total


@dataclass(frozen=True)
class BoundaryStats:
    mae: float  # nan when no utterance qualified
    signed: float
    n_tokens: int
    n_utterances: int


def boundary_errors(fire_positions: Sequence[Sequence[int]], true_ends: Sequence[Sequence[int]]) -> BoundaryStats:
    """Fire frame minus true last frame, pooled over tokens of utterances where L_hat = L."""
    diffs = []
    n_utt = 0
    for fires, ends in zip(fire_positions, true_ends):
        if len(fires) != len(ends):
            continue
        n_utt += 1
        diffs.extend(int(f) - int(e) for f, e in zip(fires, ends))
    if not diffs:
        return BoundaryStats(float("nan"), float("nan"), 0, n_utt)
    a = np.asarray(diffs, dtype=np.float64)
    return BoundaryStats(float(np.abs(a).mean()), float(a.mean()), len(diffs), n_utt)
