"""Decoder latency of single-pass NAR inference vs the token-by-token baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from ..checkpoint import load_checkpoint
from ..synth import Utterance
from .evaluate import measure_latency

BUCKETS = ((2, 4), (5, 7), (8, 10))


@dataclass
class BucketRow:
    lo: int
    hi: int
    n: int
    nar_seconds: float  # summed decoder time
    ar_seconds: float

    @property
    def ratio(self) -> float | None:
        return self.ar_seconds / self.nar_seconds if self.n and self.nar_seconds > 0 else None


@dataclass
class BenchReport:
    rows: list[BucketRow]
    nar_latency_ratio: float
    nar_passes: list[int]  # per utterance
    ar_passes: list[int]
    output_lengths: list[int]

    def table(self) -> str:
        lines = ["bucket   n    nar_ms/utt  ar_ms/utt  ratio"]
        for r in self.rows:
            if r.n:
                lines.append(f"{r.lo:>2}-{r.hi:<3} {r.n:>4}  {1e3 * r.nar_seconds / r.n:>10.3f} "
                             f"{1e3 * r.ar_seconds / r.n:>10.3f}  {r.ratio:.2f}")
            else:
                lines.append(f"{r.lo:>2}-{r.hi:<3} {0:>4}  {'-':>10} {'-':>10}  -")
        lines.append(f"aggregate nar_latency_ratio {self.nar_latency_ratio:.2f}")
        return "\n".join(lines)


def bench_params(params, cfg, utterances: Sequence[Utterance], per_bucket: int = 20, repeats: int = 3,
                 buckets=BUCKETS) -> BenchReport:
    """Time up to ``per_bucket`` utterances per bucket of true output length.

    Buckets are chosen by reference length so the timed set is known before
    decoding; rows are then reported by hypothesis length L_hat.
    """
    chosen: list[Utterance] = []
    for lo, hi in buckets:
        chosen.extend([u for u in utterances if lo <= len(u.tokens) <= hi][:per_bucket])
    timing = measure_latency(params, cfg, chosen, repeats=repeats)
    rows = []
    for lo, hi in buckets:
        sel = [t for t in timing if lo <= t[0] <= hi]
        rows.append(BucketRow(lo, hi, len(sel), sum(t[1] for t in sel), sum(t[2] for t in sel)))
    nar = sum(t[1] for t in timing)
    ar = sum(t[2] for t in timing)
    return BenchReport(rows, ar / nar if nar > 0 else float("nan"), [t[3] for t in timing], [t[4] for t in timing],
                       [t[0] for t in timing])


def bench(checkpoint, utterances: Sequence[Utterance], **kw) -> BenchReport:
    cfg, params, _ = load_checkpoint(checkpoint)
    return bench_params(params, cfg, utterances, **kw)
