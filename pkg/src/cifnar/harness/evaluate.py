"""Corpus evaluation: CER, length accuracy, boundary deviation and decoder latency."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..checkpoint import load_checkpoint
from ..model import ModelConfig, ar_baseline_decode, infer
from ..synth import TaskSpec, Utterance
from .metrics import boundary_errors, corpus_cer


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    cer: float
    sub: int
    ins: int
    dele: int
    ref_len: int
    n_utterances: int
    length_accuracy: float
    boundary_mae: float | None  # None when no utterance had L_hat = L
    boundary_signed: float | None  # mean(fire frame - true end frame)
    boundary_tokens: int
    nar_latency_ratio: float | None = None
    nar_decoder_seconds: float | None = None
    ar_decoder_seconds: float | None = None
    curves: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class Predictions:
    hypotheses: list[list[int]]
    fire_frames: list[list[int]]  # crossings plus the residual fire at the last frame
    alphas: list[np.ndarray]
    posteriors: list[np.ndarray]


def fire_frames(positions: Sequence[int], n_tokens: int, n_frames: int) -> list[int]:
    """Frame of every fired token; a residual fire is placed on the last frame."""
    frames = [int(p) for p in positions]
    frames.extend([n_frames - 1] * (n_tokens - len(frames)))
    return frames


def predict(params, cfg: ModelConfig, utterances: Sequence[Utterance], batch_size: int = 32) -> Predictions:
    """Batched single-pass inference, grouped by length; results in input order."""
    order = sorted(range(len(utterances)), key=lambda i: (utterances[i].n_frames, i))
    hyps: list = [None] * len(utterances)
    fires: list = [None] * len(utterances)
    alphas: list = [None] * len(utterances)
    posts: list = [None] * len(utterances)
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        rec = infer(params, cfg, [utterances[i].frames for i in idx])
        for j, i in enumerate(idx):
            hyps[i] = rec.hypotheses[j]
            fires[i] = fire_frames(rec.fire_positions[j], len(rec.hypotheses[j]), utterances[i].n_frames)
            alphas[i] = rec.alphas[j]
            posts[i] = rec.ctc_posteriors[j]
    return Predictions(hyps, fires, alphas, posts)


def measure_latency(params, cfg: ModelConfig, utterances: Sequence[Utterance], repeats: int = 3):
    """Per-utterance (L_hat, NAR decoder seconds, AR decoder seconds, NAR passes, AR passes).

    Each time is the minimum over ``repeats`` runs to suppress scheduler noise.
    """
    rows = []
    for u in utterances:
        nar = [infer(params, cfg, [u.frames]) for _ in range(repeats)]
        ar = [ar_baseline_decode(params, cfg, u.frames) for _ in range(repeats)]
        rows.append((
            len(nar[0].hypotheses[0]),
            min(r.decoder_seconds for r in nar),
            min(r.decoder_seconds for r in ar),
            nar[0].decoder_passes,
            ar[0].decoder_passes,
        ))
    return rows


def evaluate_params(params, cfg: ModelConfig, utterances: Sequence[Utterance], *, latency: int = 0,
                    curves: dict[str, list[float]] | None = None) -> EvalReport:
    """Evaluate in-memory parameters. ``latency`` utterances are timed (0 skips timing)."""
    if not utterances:
        raise EvalError("dataset is empty")
    pred = predict(params, cfg, utterances)
    refs = [u.tokens for u in utterances]
    cer, counts = corpus_cer(refs, pred.hypotheses)
    len_acc = float(np.mean([len(h) == len(r) for h, r in zip(pred.hypotheses, refs)]))
    bstats = boundary_errors(pred.fire_frames, [u.end_frames() for u in utterances])
    report = EvalReport(
        cer=float(cer), sub=counts.sub, ins=counts.ins, dele=counts.dele, ref_len=counts.ref_len,
        n_utterances=len(utterances), length_accuracy=len_acc,
        boundary_mae=None if math.isnan(bstats.mae) else bstats.mae,
        boundary_signed=None if math.isnan(bstats.signed) else bstats.signed,
        boundary_tokens=bstats.n_tokens, curves=dict(curves or {}),
    )
    if latency:
        rows = measure_latency(params, cfg, utterances[:latency])
        nar_s = sum(r[1] for r in rows)
        ar_s = sum(r[2] for r in rows)
        report.nar_decoder_seconds = nar_s
        report.ar_decoder_seconds = ar_s
        report.nar_latency_ratio = ar_s / nar_s if nar_s > 0 else None
    return report


def read_curves(log_path) -> dict[str, list[float]]:
    """Per-loss curves from a JSONL metrics log."""
    keys = ("ce_cif", "ce_ctx", "ali", "ctc", "qua", "total", "ali_applied_rate")
    curves: dict[str, list[float]] = {k: [] for k in ("step",) + keys}
    with Path(log_path).open() as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "step" not in rec or "total" not in rec:
                continue
            curves["step"].append(rec["step"])
            for k in keys:
                curves[k].append(rec[k])
    return curves


def evaluate(checkpoint, utterances: Sequence[Utterance], task: TaskSpec | None = None, *,
             latency: int = 0, metrics_log=None) -> EvalReport:
    cfg, params, _ = load_checkpoint(checkpoint)
    if task is not None and (task.vocab_size != cfg.vocab_size or task.feature_dim != cfg.feature_dim):
        raise EvalError(
            f"checkpoint expects V={cfg.vocab_size}, d_in={cfg.feature_dim}; "
            f"dataset has V={task.vocab_size}, d_in={task.feature_dim}"
        )
    if utterances and utterances[0].frames.shape[1] != cfg.feature_dim:
        raise EvalError("frame dimension does not match the checkpoint")
    curves = read_curves(metrics_log) if metrics_log else None
    return evaluate_params(params, cfg, utterances, latency=latency, curves=curves)
