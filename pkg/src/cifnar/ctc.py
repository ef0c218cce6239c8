"""CTC negative log-likelihood, frame posteriors and spike/boundary extraction.

Blank is class 0; tokens are 1..V. The loss is computed with the usual
blank-augmented forward-backward recursion in log space and is exposed as a
single tape op whose backward uses the state occupancies.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

BLANK = 0
DEFAULT_THETA = 0.5
BRUTE_FORCE_LIMIT = 10**7


class CtcError(ValueError):
    pass


@dataclass
class SpikeBoundaries:
    theta: float
    spikes: np.ndarray  # (U,) 0/1
    boundaries: list[int]  # [0, spike frames...]
    spike_count: int


@dataclass
class CtcLoss:
    """Result of :func:`ctc_loss`.

    ``loss`` is the mean NLL over reachable utterances (``None`` when none is
    reachable). ``nll`` holds per-utterance values, ``inf`` where the target
    cannot be aligned in the available frames.
    """

    loss: ad.Var | None
    nll: np.ndarray
    reachable: np.ndarray


def required_frames(target: Sequence[int]) -> int:
    """Minimum number of frames that can emit ``target`` (repeats need a blank)."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def is_reachable(target: Sequence[int], n_frames: int) -> bool:
    return required_frames(target) <= n_frames


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def ctc_posteriors(logits) -> np.ndarray:
    """Per-frame softmax over the V+1 classes."""
    x = logits.value if isinstance(logits, ad.Var) else np.asarray(logits, dtype=np.float64)
    return np.exp(_log_softmax(x))


class _CtcNll(ad.Op):
    """Per-utterance CTC NLL, shape (B,). Rows flagged unreachable give 0."""

    name = "ctc_nll"

    def forward(self, logits, targets, in_lens, tgt_lens, valid):
        B, U, C = logits.shape
        Lmax = targets.shape[1]
        S = 2 * Lmax + 1
        logp = _log_softmax(logits)
        ext = np.zeros((B, S), dtype=np.intp)
        ext[:, 1::2] = targets
        state_ok = np.arange(S)[None, :] < (2 * tgt_lens + 1)[:, None]
        frame_ok = np.arange(U)[None, :] < in_lens[:, None]
        em = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (B, U, S)), axis=2)
        em = np.where(state_ok[:, None, :] & frame_ok[:, :, None], em, -np.inf)
        skip = np.zeros((B, S), dtype=bool)
        if S > 3:
            skip[:, 3::2] = ext[:, 3::2] != ext[:, 1:-2:2]
        ninf = -np.inf
        alpha = np.full((B, U, S), ninf)
        beta_ex = np.full((B, U, S), ninf)
        b_idx = np.arange(B)
        t_end = in_lens - 1
        s_last = 2 * tgt_lens
        with np.errstate(invalid="ignore", divide="ignore"):
            alpha[:, 0, 0] = em[:, 0, 0]
            if S > 1:
                alpha[:, 0, 1] = em[:, 0, 1]
            for t in range(1, U):
                prev = alpha[:, t - 1]
                a1 = np.concatenate([np.full((B, 1), ninf), prev[:, :-1]], axis=1)
                acc = np.logaddexp(prev, a1)
                if S > 2:
                    a2 = np.concatenate([np.full((B, 2), ninf), prev[:, :-2]], axis=1)
                    acc = np.logaddexp(acc, np.where(skip, a2, ninf))
                alpha[:, t] = acc + em[:, t]

            end_init = np.full((B, S), ninf)
            end_init[b_idx, s_last] = 0.0
            has_label = tgt_lens > 0
            end_init[b_idx[has_label], s_last[has_label] - 1] = 0.0
            nxt = None
            for t in range(U - 1, -1, -1):
                if nxt is None:
                    rec = np.full((B, S), ninf)
                else:
                    b1 = np.concatenate([nxt[:, 1:], np.full((B, 1), ninf)], axis=1)
                    rec = np.logaddexp(nxt, b1)
                    if S > 2:
                        b2 = np.concatenate([nxt[:, 2:], np.full((B, 2), ninf)], axis=1)
                        skip_next = np.concatenate([skip[:, 2:], np.zeros((B, 2), bool)], axis=1)
                        rec = np.logaddexp(rec, np.where(skip_next, b2, ninf))
                row = np.where((t == t_end)[:, None], end_init, np.where((t < t_end)[:, None], rec, ninf))
                beta_ex[:, t] = row
                nxt = row + em[:, t]
            ll = np.logaddexp.reduce(alpha[:, 0] + beta_ex[:, 0], axis=1)
        nll = np.where(valid, -ll, 0.0)
        return nll, (logp, alpha, beta_ex, ll, ext, state_ok, frame_ok)

    def backward(self, g, out, cache, logits, targets, in_lens, tgt_lens, valid):
        logp, alpha, beta_ex, ll, ext, state_ok, frame_ok = cache
        B, U, C = logits.shape
        S = ext.shape[1]
        with np.errstate(invalid="ignore"):
            occ = np.exp(alpha + beta_ex - np.where(valid, ll, 0.0)[:, None, None])
        occ = np.where(np.isfinite(occ), occ, 0.0)
        onehot = np.zeros((B, S, C))
        np.put_along_axis(onehot, ext[:, :, None], 1.0, axis=2)
        onehot *= state_ok[:, :, None]
        grad = np.exp(logp) - occ @ onehot
        grad *= (frame_ok & valid[:, None])[:, :, None]
        return (grad * g[:, None, None],)


CTC_NLL = _CtcNll()


def _pad_targets(targets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(t) for t in targets], dtype=np.intp)
    out = np.zeros((len(targets), max(1, int(lens.max(initial=0)))), dtype=np.intp)
    for i, t in enumerate(targets):
        out[i, : len(t)] = t
    return out, lens


def ctc_loss(logits: ad.Var, targets, lengths: Sequence[int] | None = None) -> CtcLoss:
    """CTC loss of ``targets`` under ``logits``.

    ``logits`` is either (U, V+1) with ``targets`` a single token sequence, or
    (B, U, V+1) with ``targets`` a list of sequences and optional per-utterance
    frame ``lengths``. Unreachable targets are flagged and excluded rather than
    raising.
    """
    single = logits.ndim == 2
    if single:
        targets = [list(targets)]
        logits3 = ad.reshape(logits, (1,) + logits.shape)
    else:
        targets = [list(t) for t in targets]
        logits3 = logits
    B, U, C = logits3.shape
    in_lens = np.full(B, U, dtype=np.intp) if lengths is None else np.asarray(lengths, dtype=np.intp)
    if len(targets) != B or in_lens.shape != (B,):
        raise CtcError("batch size mismatch between logits, targets and lengths")
    if (in_lens < 1).any() or (in_lens > U).any():
        raise CtcError("frame lengths must lie in [1, U]")
    for t in targets:
        if any(tok < 1 or tok >= C for tok in t):
            raise CtcError(f"token ids must lie in [1, {C - 1}]")
    reachable = np.array([is_reachable(t, n) for t, n in zip(targets, in_lens)])
    padded, tgt_lens = _pad_targets(targets)
    nll_var = logits.tape.record(
        CTC_NLL, (logits3,), targets=padded, in_lens=in_lens, tgt_lens=tgt_lens, valid=reachable
    )
    nll = np.where(reachable, nll_var.value, np.inf)
    if not reachable.any():
        return CtcLoss(None, nll, reachable)
    if reachable.all():
        loss = ad.mean(nll_var)
    else:
        loss = ad.mean(ad.gather(nll_var, np.flatnonzero(reachable)))
    return CtcLoss(loss, nll, reachable)


def brute_force_ctc(logits, target: Sequence[int]) -> float:
    """-log P(target) by enumerating every frame-level label path.

    Returns ``inf`` when no path collapses to ``target``.
    """
    x = np.asarray(logits, dtype=np.float64)
    U, C = x.shape
    if C**U > BRUTE_FORCE_LIMIT:
        raise CtcError(f"search space {C}^{U} exceeds {BRUTE_FORCE_LIMIT}")
    target = np.asarray(list(target), dtype=np.intp)
    L = len(target)
    logp = _log_softmax(x)
    paths = np.array(list(itertools.product(range(C), repeat=U)), dtype=np.intp)
    path_logp = logp[np.arange(U)[None, :], paths].sum(axis=1)
    # collapse: drop repeats, then blanks
    new = np.ones_like(paths, dtype=bool)
    new[:, 1:] = paths[:, 1:] != paths[:, :-1]
    keep = new & (paths != BLANK)
    count = keep.sum(axis=1)
    match = count == L
    if L:
        pos = np.clip(np.cumsum(keep, axis=1) - 1, 0, L - 1)
        agrees = ~keep | (paths == target[pos])
        match &= agrees.all(axis=1)
    if not match.any():
        return float("inf")
    return float(-np.logaddexp.reduce(path_logp[match]))


def extract_spikes(posteriors, theta: float = DEFAULT_THETA, merge: bool = False) -> SpikeBoundaries:
    """Frames whose best non-blank posterior exceeds ``theta``.

    By default every supra-threshold frame is its own spike. With ``merge`` a
    run of consecutive supra-threshold frames counts once, at its peak frame
    (earliest on ties). Boundaries are ``[0]`` followed by the spike frames.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    p = np.asarray(posteriors, dtype=np.float64)
    best = p[:, 1:].max(axis=1) if p.shape[0] else np.zeros(0)
    spikes = (best > theta).astype(np.int64)
    if merge and spikes.any():
        edges = np.diff(np.concatenate([[0], spikes, [0]]))
        merged = np.zeros_like(spikes)
        for a, b in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
            merged[a + int(np.argmax(best[a:b]))] = 1
        spikes = merged
    frames = np.flatnonzero(spikes).tolist()
    return SpikeBoundaries(float(theta), spikes, [0] + frames, len(frames))


SPIKE_CSV_COLUMNS = ("frame_index", "p_blank", "p_max_nonblank", "argmax_token", "is_spike")


def write_spike_csv(path, posteriors, theta: float = DEFAULT_THETA, merge: bool = False) -> Path:
    p = np.asarray(posteriors, dtype=np.float64)
    sb = extract_spikes(p, theta, merge)
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SPIKE_CSV_COLUMNS)
        for u in range(p.shape[0]):
            w.writerow([
                u,
                repr(float(p[u, BLANK])),
                repr(float(p[u, 1:].max())),
                int(p[u, 1:].argmax()) + 1,
                int(sb.spikes[u]),
            ])
    return path
