"""Continuous integrate-and-fire: weight accumulation, firing and its losses.

Frame indices are 0-based throughout. ``fire`` works on a single utterance
(``h`` of shape (U, d), ``alpha`` of shape (U,)) or on a padded batch
(``h`` (B, U, d), ``alpha`` (B, U) plus frame lengths).

The integration weights of every fired token form a row of a (tokens x frames)
matrix W, so the embeddings are ``W @ h``. W is produced by a tape op whose
backward treats the discrete split points as fixed and differentiates the
split weights through the cumulative weight sums.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .ctc import SpikeBoundaries

BETA = 1.0
RESIDUAL_THRESHOLD = 0.5
# accumulations within FIRE_TOL of beta fire; absorbs rounding in rescaled weights
FIRE_TOL = 1e-10


class CifError(ValueError):
    pass


@dataclass
class ScanResult:
    """Outcome of one left-to-right integrate-and-fire scan."""

    # (token, frame, weight, d/dS_u coefficient, d/dS_{u-1} coefficient)
    pieces: list[tuple[int, int, float, int, int]]
    fire_positions: list[int]
    residual_weight: float
    residual_fired: bool

    @property
    def n_fires(self) -> int:
        return len(self.fire_positions) + int(self.residual_fired)


def cif_scan(alpha: Sequence[float], beta: float = BETA,
             residual_threshold: float | None = RESIDUAL_THRESHOLD,
             tol: float = FIRE_TOL) -> ScanResult:
    """Integrate ``alpha`` left to right, splitting the weight at every fire.

    A frame whose weight completes the in-flight token contributes exactly
    what the token still needs to reach ``beta``; the remainder opens the next
    token in the same frame. ``residual_threshold=None`` disables the
    trailing residual fire.
    """
    if beta <= 0:
        raise CifError("beta must be positive")
    pieces: list[tuple[int, int, float, int, int]] = []
    fires: list[int] = []
    tok = 0
    acc = 0.0
    for u, a in enumerate(alpha):
        rem = float(a)
        if rem < 0:
            raise CifError(f"negative weight at frame {u}")
        split = False
        while acc + rem >= beta - tol:
            take = beta - acc
            pieces.append((tok, u, take, 0, 0 if split else -1))
            fires.append(u)
            tok += 1
            acc = 0.0
            rem = max(rem - take, 0.0)
            split = True
        if split and rem <= 0.0:
            continue
        pieces.append((tok, u, rem, 1, 0 if split else -1))
        acc += rem
    fired = residual_threshold is not None and acc > residual_threshold
    return ScanResult(pieces, fires, acc, fired)


class _CifWeights(ad.Op):
    """alpha (B, U) -> integration matrix W (B, Lmax, U)."""

    name = "cif_weights"

    def forward(self, alpha, lengths, beta, residual_threshold, tol, n_tokens=None):
        B, U = alpha.shape
        scans = [cif_scan(alpha[b, : lengths[b]], beta, residual_threshold, tol) for b in range(B)]
        lmax = max(s.n_fires for s in scans)
        if n_tokens is not None:
            if lmax > n_tokens:
                raise ad.ShapeError("cif_weights: more fires than the recorded token count")
            lmax = n_tokens
        W = np.zeros((B, max(lmax, 1), U))
        meta = []
        for b, s in enumerate(scans):
            if s.pieces:
                p = np.array([(t, u) for t, u, *_ in s.pieces], dtype=np.intp)
                w = np.array([x[2] for x in s.pieces])
                ca = np.array([x[3] for x in s.pieces], dtype=np.float64)
                cb = np.array([x[4] for x in s.pieces], dtype=np.float64)
            else:
                p = np.zeros((0, 2), dtype=np.intp)
                w = ca = cb = np.zeros(0)
            n_reg = len(s.fire_positions)
            regular = p[:, 0] < n_reg
            W[b, p[regular, 0], p[regular, 1]] = w[regular]
            if s.residual_fired:
                W[b, n_reg, p[~regular, 1]] = w[~regular] / s.residual_weight
            meta.append((p, w, ca, cb, regular, s))
        return W, meta

    def backward(self, g, out, meta, alpha, lengths, beta, residual_threshold, tol, n_tokens=None):
        B, U = alpha.shape
        galpha = np.zeros_like(alpha)
        for b, (p, w, ca, cb, regular, s) in enumerate(meta):
            if not len(p):
                continue
            gw = np.zeros(len(w))
            gw[regular] = g[b, p[regular, 0], p[regular, 1]]
            if s.residual_fired:
                n_reg = len(s.fire_positions)
                R = s.residual_weight
                gr = g[b, n_reg, p[~regular, 1]]
                wr = w[~regular] / R
                gw[~regular] = (gr - (gr * wr).sum()) / R
            u = p[:, 1]
            dS = np.bincount(u, weights=ca * gw, minlength=U)
            prev = cb != 0
            prev &= u > 0
            dS[: U - 1] += np.bincount(u[prev] - 1, weights=cb[prev] * gw[prev], minlength=U)[: U - 1]
            # S_u = sum_{k<=u} alpha_k  =>  dalpha_k = sum_{u>=k} dS_u
            galpha[b] = np.cumsum(dS[::-1])[::-1]
            galpha[b, lengths[b]:] = 0.0
        return (galpha,)


CIF_WEIGHTS = _CifWeights()


@dataclass
class FiredEmbeddings:
    """Fired token embeddings and where each token fired.

    ``embeddings`` is (L, d) for a single utterance or (B, Lmax, d) for a
    batch (``None`` if nothing fired anywhere). ``counts`` includes residual
    fires; ``fire_positions`` lists only threshold crossings.
    """

    embeddings: ad.Var | None
    weights: ad.Var | None
    fire_positions: list[list[int]]
    residual_weight: np.ndarray
    residual_fired: np.ndarray
    counts: np.ndarray
    scans: list[ScanResult] = field(default_factory=list, repr=False)

    @property
    def token_mask(self) -> np.ndarray:
        lmax = 0 if self.embeddings is None else self.embeddings.shape[-2]
        return np.arange(lmax)[None, :] < self.counts[:, None]


def _as_var(x, tape: ad.Tape | None = None) -> ad.Var:
    if isinstance(x, ad.Var):
        return x
    return (tape or ad.Tape()).const(x)


def fire(h, alpha, lengths: Sequence[int] | None = None, beta: float = BETA,
         residual_threshold: float | None = RESIDUAL_THRESHOLD, tol: float = FIRE_TOL) -> FiredEmbeddings:
    """Integrate-and-fire encoder states ``h`` with weights ``alpha``."""
    if isinstance(h, ad.Var) or isinstance(alpha, ad.Var):
        tape = h.tape if isinstance(h, ad.Var) else alpha.tape
        h, alpha = _as_var(h, tape), _as_var(alpha, tape)
    else:
        tape = ad.Tape()
        h, alpha = tape.const(h), tape.const(alpha)
    single = alpha.ndim == 1
    if single:
        if h.ndim != 2 or h.shape[0] != alpha.shape[0]:
            raise CifError(f"h {h.shape} does not match alpha {alpha.shape}")
        alpha2 = ad.reshape(alpha, (1, alpha.shape[0]))
        h3 = ad.reshape(h, (1,) + h.shape)
    else:
        if h.ndim != 3 or h.shape[:2] != alpha.shape:
            raise CifError(f"h {h.shape} does not match alpha {alpha.shape}")
        alpha2, h3 = alpha, h
    B, U = alpha2.shape
    if U < 1:
        raise CifError("need at least one frame")
    lens = np.full(B, U, dtype=np.intp) if lengths is None else np.asarray(lengths, dtype=np.intp)
    if (alpha2.value < 0).any():
        raise CifError("weights must be non-negative")
    W = tape.record(CIF_WEIGHTS, (alpha2,), lengths=lens, beta=float(beta),
                    residual_threshold=residual_threshold, tol=tol)
    scans = [m[5] for m in W.node.cache]
    W.node.attrs["n_tokens"] = W.shape[1]
    counts = np.array([s.n_fires for s in scans], dtype=np.intp)
    positions = [list(s.fire_positions) for s in scans]
    resid = np.array([s.residual_weight for s in scans])
    rfired = np.array([s.residual_fired for s in scans])
    if counts.max() == 0:
        return FiredEmbeddings(None, None, positions, resid, rfired, counts, scans)
    c = ad.matmul(W, h3)
    if single:
        n = int(counts[0])
        c = ad.reshape(c, c.shape[1:])
        if n < c.shape[0]:
            c = ad.slice_(c, 0, n, axis=0)
    return FiredEmbeddings(c, W, positions, resid, rfired, counts, scans)


class _ScaleToLength(ad.Op):
    name = "scale_to_length"

    def forward(self, alpha, target):
        s = alpha.sum(axis=-1, keepdims=True)
        if (s <= 0).any():
            raise CifError("cannot rescale weights that sum to zero")
        return alpha * (target / s), s

    def backward(self, g, out, s, alpha, target):
        k = target / s
        return (k * g - (k / s) * (g * alpha).sum(axis=-1, keepdims=True),)


SCALE_TO_LENGTH = _ScaleToLength()


def scale_weights(alpha, target_len) -> ad.Var:
    """Rescale weights so each utterance's weights sum to its target length."""
    alpha = _as_var(alpha)
    t = np.asarray(target_len, dtype=np.float64)
    if (t < 1).any():
        raise CifError("target length must be >= 1")
    t = t.reshape(1) if alpha.ndim == 1 else t.reshape(-1, 1)
    return alpha.tape.record(SCALE_TO_LENGTH, (alpha,), target=t)


def quantity_loss(alpha, target_len) -> ad.Var:
    """|sum(alpha) - target length|, averaged over the batch for 2-D input."""
    alpha = _as_var(alpha)
    tape = alpha.tape
    total = ad.sum(alpha, axis=-1)
    if alpha.ndim == 1:
        return ad.abs(total - tape.const(float(target_len)))
    t = np.asarray(target_len, dtype=np.float64).reshape(-1)
    return ad.mean(ad.abs(total - tape.const(t)))


def interval_matrix(boundaries: Sequence[int], n_frames: int, inclusive: bool = True) -> np.ndarray:
    """Rows select the frames of consecutive boundary intervals.

    Inclusive intervals span ``P_b(i)..P_b(i+1)`` so a shared endpoint is
    counted twice; otherwise a shared endpoint belongs only to the interval it
    closes.
    """
    b = list(boundaries)
    M = np.zeros((max(len(b) - 1, 0), n_frames))
    for i in range(len(b) - 1):
        lo = b[i] if (inclusive or i == 0) else b[i] + 1
        M[i, lo: b[i + 1] + 1] = 1.0
    return M


def alignment_loss(alpha, bounds, target_len, inclusive: bool = True):
    """CTC-spike alignment loss.

    Each boundary interval should carry exactly unit weight. Utterances whose
    spike count differs from the target length are skipped. Returns
    ``(loss, applied)``; for a batch the loss is the mean over applied
    utterances and ``applied`` is a boolean array.
    """
    alpha = _as_var(alpha)
    tape = alpha.tape
    single = alpha.ndim == 1
    if single:
        bounds, target_len = [bounds], [target_len]
    U = alpha.shape[-1]
    B = len(bounds)
    applied = np.array([sb.spike_count == int(n) for sb, n in zip(bounds, target_len)])
    if not applied.any():
        zero = tape.const(0.0)
        return (zero, bool(applied[0])) if single else (zero, applied)
    lmax = max(int(n) for n, ok in zip(target_len, applied) if ok)
    M = np.zeros((B, lmax, U))
    ones = np.zeros((B, lmax))
    for b, (sb, n) in enumerate(zip(bounds, target_len)):
        if applied[b]:
            M[b, : int(n)] = interval_matrix(sb.boundaries, U, inclusive)
            ones[b, : int(n)] = 1.0
    a3 = ad.reshape(alpha, (1, U, 1) if single else (B, U, 1))
    sums = ad.reshape(ad.matmul(tape.const(M), a3), (B, lmax))
    per_utt = ad.sum(ad.abs(sums - tape.const(ones)), axis=-1)
    if single:
        return ad.sum(per_utt), True
    return ad.scale(ad.sum(per_utt), 1.0 / applied.sum()), applied


ALPHA_CSV_COLUMNS = ("frame_index", "alpha", "accumulated", "fired")


def alpha_curve(alpha: Sequence[float], beta: float = BETA,
                residual_threshold: float | None = RESIDUAL_THRESHOLD) -> list[tuple[int, float, float, int]]:
    """Per-frame (index, alpha, in-flight accumulation after the frame, fires)."""
    scan = cif_scan(alpha, beta, residual_threshold)
    fired = np.bincount(np.asarray(scan.fire_positions, dtype=np.intp), minlength=len(alpha))
    if scan.residual_fired:
        fired[len(alpha) - 1] += 1
    rows = []
    acc = 0.0
    fire_iter = 0
    for u, a in enumerate(alpha):
        acc += float(a)
        while fire_iter < len(scan.fire_positions) and scan.fire_positions[fire_iter] == u:
            acc -= beta
            fire_iter += 1
        rows.append((u, float(a), max(acc, 0.0), int(fired[u])))
    return rows


def write_alpha_csv(path, alpha, beta: float = BETA,
                    residual_threshold: float | None = RESIDUAL_THRESHOLD) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ALPHA_CSV_COLUMNS)
        for u, a, acc, fired in alpha_curve(alpha, beta, residual_threshold):
            w.writerow([u, repr(a), repr(acc), fired])
    return path
