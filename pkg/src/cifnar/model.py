"""Toy-scale Conformer-CIF model with a contextual decoder.

Parameters live in a flat ``dict[str, np.ndarray]``; every forward pass binds
them as named inputs on a fresh :class:`~cifnar.autodiff.Tape`. Batches are
padded to the longest utterance and carry explicit frame/token masks.

Pipeline (training)::

    frames -> encoder -> h, alpha, ctc logits
    ctc loss, spikes -> alignment loss (unscaled alpha), quantity loss
    alpha scaled to the target length -> fire -> CIF decoder (y')
    -> contextual decoder (y'')

Tokens are 1..V; decoder classes are ``token - 1``; CTC classes are
``[blank, 1..V]``.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import cif as cifm
from . import ctc as ctcm

DECODER_MODES = ("c_only", "c_and_h")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 16
    vocab_size: int = 16
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 128
    n_encoder_layers: int = 2
    n_cif_decoder_layers: int = 2
    n_contextual_layers: int = 2
    conv_kernel_size: int = 7
    max_frames: int = 256
    max_tokens: int = 64
    theta: float = ctcm.DEFAULT_THETA
    residual_threshold: float = cifm.RESIDUAL_THRESHOLD
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    decoder_input_mode: str = "c_and_h"
    contextual: bool = True
    ali_inclusive: bool = True
    ali_on_scaled: bool = False
    merge_spikes: bool = False
    alpha_bias_init: float = float(np.log(1 / 7))

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if min(self.n_heads, self.d_ff, self.n_encoder_layers, self.n_cif_decoder_layers) < 1:
            raise ModelError("layer counts and sizes must be >= 1")
        if self.n_contextual_layers < 0:
            raise ModelError("n_contextual_layers must be >= 0")
        if self.conv_kernel_size % 2 == 0:
            raise ModelError("conv_kernel_size must be odd")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ModelError("loss weights must be >= 0")
        if self.decoder_input_mode not in DECODER_MODES:
            raise ModelError(f"decoder_input_mode must be one of {DECODER_MODES}")
        if not 0 < self.theta < 1:
            raise ModelError("theta must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters


def _xavier(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _ln(p, prefix, d):
    p[f"{prefix}.g"] = np.ones(d)
    p[f"{prefix}.b"] = np.zeros(d)


def _lin(p, rng, prefix, n_in, n_out, bias=True):
    p[f"{prefix}.w"] = _xavier(rng, n_in, n_out)
    if bias:
        p[f"{prefix}.b"] = np.zeros(n_out)


def _attn_params(p, rng, prefix, d):
    _ln(p, f"{prefix}.ln", d)
    _lin(p, rng, f"{prefix}.q", d, d)
    # no key bias: softmax is invariant to it, so it would never get a gradient
    _lin(p, rng, f"{prefix}.k", d, d, bias=False)
    _lin(p, rng, f"{prefix}.v", d, d)
    _lin(p, rng, f"{prefix}.o", d, d)


def _ffn_params(p, rng, prefix, d, dff):
    _ln(p, f"{prefix}.ln", d)
    _lin(p, rng, f"{prefix}.l1", d, dff)
    _lin(p, rng, f"{prefix}.l2", dff, d)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, V = cfg.d_model, cfg.vocab_size
    p: dict[str, np.ndarray] = {}
    _lin(p, rng, "enc.in", cfg.feature_dim, d)
    p["enc.pos"] = rng.normal(scale=0.1, size=(cfg.max_frames, d))
    for i in range(cfg.n_encoder_layers):
        pre = f"enc.{i}"
        _ffn_params(p, rng, f"{pre}.ff1", d, cfg.d_ff)
        _attn_params(p, rng, f"{pre}.att", d)
        _ln(p, f"{pre}.conv.ln", d)
        _lin(p, rng, f"{pre}.conv.pw1", d, 2 * d)
        p[f"{pre}.conv.dw.w"] = rng.normal(scale=1.0 / np.sqrt(cfg.conv_kernel_size), size=(cfg.conv_kernel_size, d))
        p[f"{pre}.conv.dw.b"] = np.zeros(d)
        _ln(p, f"{pre}.conv.norm", d)
        _lin(p, rng, f"{pre}.conv.pw2", d, d)
        _ffn_params(p, rng, f"{pre}.ff2", d, cfg.d_ff)
        _ln(p, f"{pre}.out_ln", d)
    _lin(p, rng, "alpha", d, 1)
    p["alpha.b"][:] = cfg.alpha_bias_init
    _lin(p, rng, "ctc", d, V + 1)
    p["dec.pos"] = rng.normal(scale=0.1, size=(cfg.max_tokens, d))
    for i in range(cfg.n_cif_decoder_layers):
        pre = f"dec.{i}"
        _attn_params(p, rng, f"{pre}.self", d)
        _attn_params(p, rng, f"{pre}.cross", d)
        _ffn_params(p, rng, f"{pre}.ff", d, cfg.d_ff)
    _ln(p, "dec.out_ln", d)
    _lin(p, rng, "dec.head", d, V)
    for i in range(cfg.n_contextual_layers):
        pre = f"ctx.{i}"
        _attn_params(p, rng, f"{pre}.self", d)
        _ffn_params(p, rng, f"{pre}.ff", d, cfg.d_ff)
    if cfg.n_contextual_layers:
        _ln(p, "ctx.out_ln", d)
    _lin(p, rng, "ctx.head", d, V)
    return p


def bind_params(tape: ad.Tape, params: dict[str, np.ndarray], trainable: bool = True) -> dict[str, ad.Var]:
    if trainable:
        return {k: tape.input(k, v) for k, v in params.items()}
    return {k: tape.const(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# building blocks


def _layer_norm(P, prefix, x):
    return ad.layer_norm(x, P[f"{prefix}.g"], P[f"{prefix}.b"])


def _linear(P, prefix, x):
    b = P.get(f"{prefix}.b")
    return ad.linear(x, P[f"{prefix}.w"], b)


def _ffn(P, prefix, x):
    y = _layer_norm(P, f"{prefix}.ln", x)
    return _linear(P, f"{prefix}.l2", ad.gelu(_linear(P, f"{prefix}.l1", y)))


def _attention(P, prefix, x, kv, mask, n_heads):
    """Pre-norm multi-head attention; ``mask`` (B, Lq, Lk) marks usable keys."""
    y = _layer_norm(P, f"{prefix}.ln", x)
    src = y if kv is None else kv
    q = _linear(P, f"{prefix}.q", y)
    k = _linear(P, f"{prefix}.k", src)
    v = _linear(P, f"{prefix}.v", src)
    d = q.shape[-1]
    dh = d // n_heads
    heads = []
    for i in range(n_heads):
        lo, hi = i * dh, (i + 1) * dh
        qh, kh, vh = (ad.slice_(t, lo, hi, axis=-1) for t in (q, k, v))
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
        heads.append(ad.matmul(ad.softmax(scores, mask), vh))
    out = heads[0] if n_heads == 1 else ad.concat(heads, axis=-1)
    return _linear(P, f"{prefix}.o", out)


def _conv_module(P, prefix, x, frame_mask):
    d = x.shape[-1]
    y = _layer_norm(P, f"{prefix}.ln", x)
    y = _linear(P, f"{prefix}.pw1", y)
    y = ad.mul(ad.slice_(y, 0, d, axis=-1), ad.sigmoid(ad.slice_(y, d, 2 * d, axis=-1)))
    y = ad.row_mask(y, frame_mask)
    y = ad.depthwise_conv1d(y, P[f"{prefix}.dw.w"], P[f"{prefix}.dw.b"])
    y = ad.swish(_layer_norm(P, f"{prefix}.norm", y))
    return _linear(P, f"{prefix}.pw2", y)


def _key_mask(n_query: int, key_lens: np.ndarray, n_key: int, causal: bool = False) -> np.ndarray:
    keys = np.arange(n_key)[None, None, :] < key_lens[:, None, None]
    m = np.broadcast_to(keys, (len(key_lens), n_query, n_key))
    if causal:
        m = m & np.tril(np.ones((n_query, n_key), dtype=bool))[None]
    return np.ascontiguousarray(m)


def pad_frames(frames: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([f.shape[0] for f in frames], dtype=np.intp)
    out = np.zeros((len(frames), int(lens.max()), frames[0].shape[1]))
    for i, f in enumerate(frames):
        out[i, : len(f)] = f
    return out, lens


@dataclass
class EncoderOutput:
    h: ad.Var  # (B, T, d)
    alpha: ad.Var  # (B, T), zero on padding
    ctc_logits: ad.Var  # (B, T, V+1)
    lengths: np.ndarray

    @property
    def frame_mask(self) -> np.ndarray:
        return np.arange(self.h.shape[1])[None, :] < self.lengths[:, None]


def encode(P: dict[str, ad.Var], cfg: ModelConfig, frames: np.ndarray, lengths: np.ndarray,
           positional: bool = True) -> EncoderOutput:
    tape = next(iter(P.values())).tape
    B, T, _ = frames.shape
    if T < 1:
        raise ModelError("need at least one frame")
    if T > cfg.max_frames:
        raise ModelError(f"{T} frames exceed max_frames={cfg.max_frames}")
    fmask = np.arange(T)[None, :] < lengths[:, None]
    x = _linear(P, "enc.in", tape.const(frames))
    if positional:
        x = ad.bias_add(x, ad.slice_(P["enc.pos"], 0, T, axis=0))
    x = ad.row_mask(x, fmask)
    amask = _key_mask(T, lengths, T)
    for i in range(cfg.n_encoder_layers):
        pre = f"enc.{i}"
        x = x + ad.scale(_ffn(P, f"{pre}.ff1", x), 0.5)
        x = x + _attention(P, f"{pre}.att", x, None, amask, cfg.n_heads)
        x = x + _conv_module(P, f"{pre}.conv", x, fmask)
        x = x + ad.scale(_ffn(P, f"{pre}.ff2", x), 0.5)
        x = ad.row_mask(_layer_norm(P, f"{pre}.out_ln", x), fmask)
    a = ad.sigmoid(_linear(P, "alpha", x))
    alpha = ad.mul(ad.reshape(a, (B, T)), tape.const(fmask.astype(np.float64)))
    logits = _linear(P, "ctc", x)
    return EncoderOutput(x, alpha, logits, lengths)


def cif_decode(P: dict[str, ad.Var], cfg: ModelConfig, c: ad.Var, token_counts: np.ndarray,
               h: ad.Var | None = None, frame_lengths: np.ndarray | None = None,
               mode: str | None = None, causal: bool = False) -> tuple[ad.Var, ad.Var]:
    """Non-causal attention decoder over fired embeddings ``c`` (B, L, d).

    In ``c_and_h`` mode every block also cross-attends to the encoder states.
    Returns (hidden states y', logits y').
    """
    mode = mode or cfg.decoder_input_mode
    B, L, d = c.shape
    if L > cfg.max_tokens:
        raise ModelError(f"{L} tokens exceed max_tokens={cfg.max_tokens}")
    tmask = np.arange(L)[None, :] < token_counts[:, None]
    x = ad.bias_add(c, ad.slice_(P["dec.pos"], 0, L, axis=0))
    smask = _key_mask(L, token_counts, L, causal)
    xmask = None
    if mode == "c_and_h":
        if h is None or frame_lengths is None:
            raise ModelError("c_and_h mode needs encoder states and their lengths")
        xmask = _key_mask(L, frame_lengths, h.shape[1])
    for i in range(cfg.n_cif_decoder_layers):
        pre = f"dec.{i}"
        x = x + _attention(P, f"{pre}.self", x, None, smask, cfg.n_heads)
        if mode == "c_and_h":
            x = x + _attention(P, f"{pre}.cross", x, h, xmask, cfg.n_heads)
        x = x + _ffn(P, f"{pre}.ff", x)
    hidden = ad.row_mask(_layer_norm(P, "dec.out_ln", x), tmask)
    return hidden, _linear(P, "dec.head", hidden)


def contextual_decode(P: dict[str, ad.Var], cfg: ModelConfig, hidden: ad.Var, token_counts: np.ndarray,
                      causal: bool = False) -> ad.Var:
    """Self-attention stack over the CIF decoder's hidden states; returns y'' logits."""
    B, L, d = hidden.shape
    x = hidden
    if cfg.n_contextual_layers:
        smask = _key_mask(L, token_counts, L, causal)
        for i in range(cfg.n_contextual_layers):
            pre = f"ctx.{i}"
            x = x + _attention(P, f"{pre}.self", x, None, smask, cfg.n_heads)
            x = x + _ffn(P, f"{pre}.ff", x)
        x = _layer_norm(P, "ctx.out_ln", x)
    return _linear(P, "ctx.head", x)


# ---------------------------------------------------------------------------
# training objective


@dataclass
class LossBreakdown:
    ce_cif: float
    ce_ctx: float
    ali: float
    ctc: float
    qua: float
    ali_applied: float  # fraction of utterances where the alignment loss applied
    total: float
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_utterances: int = 0
    n_skipped: int = 0
    var: ad.Var | None = field(default=None, compare=False, repr=False)
    tape: ad.Tape | None = field(default=None, compare=False, repr=False)

    def recomputed_total(self) -> float:
        l1, l2, l3 = self.weights
        return self.ce_cif + self.ce_ctx + l1 * self.ali + l2 * self.ctc + l3 * self.qua

    def as_record(self) -> dict:
        return {
            "ce_cif": self.ce_cif, "ce_ctx": self.ce_ctx, "ali": self.ali, "ctc": self.ctc,
            "qua": self.qua, "total": self.total, "ali_applied_rate": self.ali_applied,
        }


@dataclass
class Batch:
    frames: np.ndarray  # (B, T, feature_dim)
    lengths: np.ndarray
    targets: list[list[int]]

    @classmethod
    def from_utterances(cls, utts) -> "Batch":
        frames, lens = pad_frames([u.frames for u in utts])
        return cls(frames, lens, [list(u.tokens) for u in utts])

    def subset(self, keep: np.ndarray) -> "Batch":
        idx = np.flatnonzero(keep)
        T = int(self.lengths[idx].max())
        return Batch(self.frames[idx, :T], self.lengths[idx], [self.targets[i] for i in idx])


def combined_loss(params: dict[str, np.ndarray], cfg: ModelConfig, batch: Batch,
                  tape: ad.Tape | None = None) -> LossBreakdown | None:
    """Forward pass of the full training objective on a padded batch.

    Returns ``None`` when every utterance is CTC-unreachable. The returned
    breakdown carries the differentiable total in ``var``.
    """
    if any(len(t) < 1 for t in batch.targets):
        raise ModelError("training targets must be non-empty")
    reach = np.array([ctcm.is_reachable(t, n) for t, n in zip(batch.targets, batch.lengths)])
    n_skipped = int((~reach).sum())
    if not reach.any():
        return None
    if n_skipped:
        batch = batch.subset(reach)
    tape = tape or ad.Tape()
    P = bind_params(tape, params)
    enc = encode(P, cfg, batch.frames, batch.lengths)
    B = len(batch.targets)
    tlens = np.array([len(t) for t in batch.targets], dtype=np.intp)

    ctc_res = ctcm.ctc_loss(enc.ctc_logits, batch.targets, batch.lengths)
    post = ctcm.ctc_posteriors(enc.ctc_logits)
    spikes = [ctcm.extract_spikes(post[b, : batch.lengths[b]], cfg.theta, cfg.merge_spikes) for b in range(B)]

    qua = cifm.quantity_loss(enc.alpha, tlens)
    scaled = cifm.scale_weights(enc.alpha, tlens)
    ali, applied = cifm.alignment_loss(scaled if cfg.ali_on_scaled else enc.alpha, spikes, tlens,
                                       inclusive=cfg.ali_inclusive)
    fired = cifm.fire(enc.h, scaled, batch.lengths, residual_threshold=cfg.residual_threshold)
    if not np.array_equal(fired.counts, tlens):
        raise ModelError(f"scaled weights fired {fired.counts.tolist()} tokens, expected {tlens.tolist()}")
    hidden, y1 = cif_decode(P, cfg, fired.embeddings, tlens, enc.h, batch.lengths)
    L = hidden.shape[1]
    tgt = np.zeros((B, L), dtype=np.intp)
    for b, t in enumerate(batch.targets):
        tgt[b, : len(t)] = np.asarray(t) - 1
    tmask = np.arange(L)[None, :] < tlens[:, None]
    ce1 = ad.cross_entropy(y1, tgt, tmask)
    total = ce1
    ce2_val = 0.0
    if cfg.contextual:
        y2 = contextual_decode(P, cfg, hidden, tlens)
        ce2 = ad.cross_entropy(y2, tgt, tmask)
        total = total + ce2
        ce2_val = float(ce2.value)
    total = total + ad.scale(ali, cfg.lambda1)
    total = total + ad.scale(ctc_res.loss, cfg.lambda2)
    total = total + ad.scale(qua, cfg.lambda3)
    tape.output("total", total)
    return LossBreakdown(
        ce_cif=float(ce1.value), ce_ctx=ce2_val, ali=float(ali.value), ctc=float(ctc_res.loss.value),
        qua=float(qua.value), ali_applied=float(np.mean(applied)), total=float(total.value),
        weights=(cfg.lambda1, cfg.lambda2, cfg.lambda3), n_utterances=B, n_skipped=n_skipped,
        var=total, tape=tape,
    )


def loss_and_grads(params, cfg: ModelConfig, batch: Batch):
    lb = combined_loss(params, cfg, batch)
    if lb is None:
        return None, None
    return lb, ad.backward(lb.tape, lb.var)


# ---------------------------------------------------------------------------
# inference


@dataclass
class InferenceRecord:
    hypotheses: list[list[int]]
    fire_positions: list[list[int]]
    alphas: list[np.ndarray]
    ctc_posteriors: list[np.ndarray]
    encoder_seconds: float
    decoder_seconds: float
    decoder_passes: int


def _decode_tokens(logits: np.ndarray, counts: np.ndarray) -> list[list[int]]:
    best = logits.argmax(axis=-1) + 1
    return [best[b, : counts[b]].tolist() for b in range(len(counts))]


def _encode_for_inference(params, cfg, frames_list):
    tape = ad.Tape()
    P = bind_params(tape, params, trainable=False)
    frames, lens = pad_frames(list(frames_list))
    t0 = time.perf_counter()
    enc = encode(P, cfg, frames, lens)
    fired = cifm.fire(enc.h, enc.alpha, lens, residual_threshold=cfg.residual_threshold)
    enc_s = time.perf_counter() - t0
    post = ctcm.ctc_posteriors(enc.ctc_logits)
    alphas = [enc.alpha.value[b, : lens[b]].copy() for b in range(len(lens))]
    posts = [post[b, : lens[b]] for b in range(len(lens))]
    return P, enc, fired, lens, enc_s, alphas, posts


def infer(params, cfg: ModelConfig, frames_list: Sequence[np.ndarray]) -> InferenceRecord:
    """Single-pass non-autoregressive recognition of a batch of utterances.

    The fired embeddings come from the unscaled weights (with the residual
    rule); the hypothesis is read from the contextual decoder when present.
    """
    P, enc, fired, lens, enc_s, alphas, posts = _encode_for_inference(params, cfg, frames_list)
    counts = fired.counts
    if fired.embeddings is None:
        return InferenceRecord([[] for _ in lens], fired.fire_positions, alphas, posts, enc_s, 0.0, 0)
    t0 = time.perf_counter()
    hidden, y1 = cif_decode(P, cfg, fired.embeddings, counts, enc.h, lens)
    logits = contextual_decode(P, cfg, hidden, counts) if cfg.contextual else y1
    dec_s = time.perf_counter() - t0
    return InferenceRecord(_decode_tokens(logits.value, counts), fired.fire_positions, alphas, posts,
                           enc_s, dec_s, 1)


def ar_baseline_decode(params, cfg: ModelConfig, frames: np.ndarray) -> InferenceRecord:
    """Token-by-token decoding of one utterance, used only as a latency baseline.

    Step k re-runs both decoders on the first k fired embeddings under a causal
    mask and keeps the prediction at position k.
    """
    P, enc, fired, lens, enc_s, alphas, posts = _encode_for_inference(params, cfg, [frames])
    n = int(fired.counts[0])
    hyp: list[int] = []
    t0 = time.perf_counter()
    tape = enc.h.tape
    for k in range(1, n + 1):
        prefix = ad.slice_(fired.embeddings, 0, k, axis=1)
        kk = np.array([k])
        hidden, y1 = cif_decode(P, cfg, prefix, kk, enc.h, lens, causal=True)
        logits = contextual_decode(P, cfg, hidden, kk, causal=True) if cfg.contextual else y1
        hyp.append(int(logits.value[0, k - 1].argmax()) + 1)
        del tape.nodes[prefix.id:]  # drop this step's graph; nothing downstream refers to it
    dec_s = time.perf_counter() - t0
    return InferenceRecord([hyp], fired.fire_positions, alphas, posts, enc_s, dec_s, n)


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
