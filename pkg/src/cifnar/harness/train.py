"""Adam + inverse-sqrt warmup training loop over generated batches."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .. import autodiff as ad
from ..checkpoint import save_checkpoint
from ..model import Batch, ModelError, init_params, loss_and_grads
from ..synth import TaskSpec, Utterance, generate
from .config import TrainConfig, save_config
from .evaluate import evaluate_params

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "ce_cif", "ce_ctx", "ali", "ctc", "qua", "total", "ali_applied_rate")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, batch_seed: tuple, reason: str):
        super().__init__(f"diverged at step {step} (batch seed {batch_seed}): {reason}")
        self.step = step
        self.batch_seed = batch_seed
        self.reason = reason


def noam_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` at ``warmup``, then ``peak * sqrt(warmup / step)``."""
    if warmup <= 0:
        return peak
    return peak * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.98), eps=1e-9):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k in sorted(params):
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


def dev_set(cfg: TrainConfig) -> list[Utterance]:
    protos = cfg.task.prototypes()
    return [generate(cfg.task, (cfg.dev_seed, i), protos) for i in range(cfg.dev_size)]


def training_batches(task: TaskSpec, batch_size: int, seed: int, pool: int = 8) -> Iterator[tuple[tuple, list[Utterance]]]:
    """Endless stream of ``(batch_seed, utterances)``.

    ``pool`` batches are generated together, sorted by length and cut into
    batches (less padding), and then visited in a seeded random order.
    """
    protos = task.prototypes()
    k = 0
    while True:
        utts = [generate(task, (seed, k, i), protos) for i in range(batch_size * pool)]
        utts.sort(key=lambda u: u.n_frames)
        order = np.random.default_rng((seed, k, 1 << 20)).permutation(pool)
        for j in order:
            yield (seed, k, int(j)), utts[j * batch_size:(j + 1) * batch_size]
        k += 1


@dataclass
class TrainResult:
    out_dir: Path
    best_checkpoint: Path
    final_checkpoint: Path
    metrics_log: Path
    best_cer: float
    best_step: int
    steps: int
    params: dict[str, np.ndarray] = field(repr=False)
    evals: list[dict] = field(default_factory=list)


def train(cfg: TrainConfig, *, quiet: bool = False) -> TrainResult:
    """Run training; writes config.json, metrics.jsonl, dev.jsonl, best.ckpt and final.ckpt."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    mcfg = cfg.effective_model()
    params = init_params(mcfg, cfg.seed)
    opt = Adam(params, cfg.adam_betas, cfg.adam_eps)
    dev = dev_set(cfg)
    metrics_path = out / "metrics.jsonl"
    dev_path = out / "dev.jsonl"
    best_path, final_path = out / "best.ckpt", out / "final.ckpt"
    best_cer, best_step = math.inf, 0
    evals: list[dict] = []
    applied_window: list[float] = []
    batches = training_batches(cfg.task, cfg.batch_size, cfg.seed, cfg.bucket_pool)

    with metrics_path.open("w") as mlog, dev_path.open("w") as dlog:
        for step in range(1, cfg.max_steps + 1):
            batch_seed, utts = next(batches)
            try:
                lb, grads = loss_and_grads(params, mcfg, Batch.from_utterances(utts))
            except (ad.NonFiniteError, FloatingPointError) as e:
                _record_divergence(mlog, step, batch_seed, str(e))
                raise DivergenceError(step, batch_seed, str(e)) from None
            except ModelError as e:
                # a fire-count mismatch after scaling means the weights blew up
                _record_divergence(mlog, step, batch_seed, str(e))
                raise DivergenceError(step, batch_seed, str(e)) from None
            if lb is None:
                continue
            if not math.isfinite(lb.total) or lb.total > cfg.divergence_limit:
                _record_divergence(mlog, step, batch_seed, f"loss {lb.total}")
                raise DivergenceError(step, batch_seed, f"loss {lb.total}")
            lr = noam_lr(step, cfg.learning_rate, cfg.warmup_steps)
            gnorm = clip_grads(grads, cfg.grad_clip)
            if not math.isfinite(gnorm):
                _record_divergence(mlog, step, batch_seed, "non-finite gradient")
                raise DivergenceError(step, batch_seed, "non-finite gradient")
            opt.step(params, grads, lr)

            rec = {"step": step, **lb.as_record(), "lr": lr, "grad_norm": gnorm,
                   "n_skipped": lb.n_skipped, "batch_seed": list(batch_seed)}
            mlog.write(json.dumps(rec) + "\n")
            applied_window.append(lb.ali_applied)

            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                mlog.flush()
                rep = evaluate_params(params, mcfg, dev)
                ev = {"step": step, "cer": rep.cer, "length_accuracy": rep.length_accuracy,
                      "boundary_mae": rep.boundary_mae, "boundary_signed": rep.boundary_signed,
                      "ali_applied_rate": float(np.mean(applied_window))}
                applied_window = []
                evals.append(ev)
                dlog.write(json.dumps(ev) + "\n")
                dlog.flush()
                if rep.cer < best_cer:
                    best_cer, best_step = rep.cer, step
                    save_checkpoint(best_path, mcfg, params, {"step": step, "dev_cer": rep.cer, "seed": cfg.seed})
                if not quiet:
                    log.info("step %d  loss %.4f  dev cer %.4f  len acc %.3f", step, lb.total, rep.cer,
                             rep.length_accuracy)

    save_checkpoint(final_path, mcfg, params, {"step": cfg.max_steps, "seed": cfg.seed})
    if not best_path.exists():
        save_checkpoint(best_path, mcfg, params, {"step": cfg.max_steps, "seed": cfg.seed})
    return TrainResult(out, best_path, final_path, metrics_path, best_cer, best_step, cfg.max_steps, params, evals)


def _record_divergence(mlog, step, batch_seed, reason):
    mlog.write(json.dumps({"event": "divergence", "step": step, "batch_seed": list(batch_seed),
                           "reason": reason}) + "\n")
    mlog.flush()
