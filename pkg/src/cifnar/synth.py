"""Synthetic segmental utterances with exact token boundaries.

Each token owns a fixed prototype feature vector. An utterance is a sequence
of tokens, each held for a random number of frames, with i.i.d. Gaussian
noise added to every frame. Boundaries are therefore known exactly.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"CIFDSET\x00"
VERSION = 1
_HEADER = struct.Struct("<8sI6IdQB")
_RECORD_HEAD = struct.Struct("<QII")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int = 16
    feature_dim: int = 16
    dur_min: int = 4
    dur_max: int = 12
    len_min: int = 2
    len_max: int = 10
    noise_std: float = 0.3
    prototype_seed: int = 0
    silence: bool = False

    def __post_init__(self):
        if self.vocab_size < 1 or self.feature_dim < 1:
            raise ValueError("vocab_size and feature_dim must be >= 1")
        if not 1 <= self.dur_min <= self.dur_max:
            raise ValueError("need 1 <= dur_min <= dur_max")
        if not 1 <= self.len_min <= self.len_max:
            raise ValueError("need 1 <= len_min <= len_max")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def prototypes(self) -> np.ndarray:
        """Row 0 is the silence prototype, row t the prototype of token t."""
        rng = np.random.default_rng(self.prototype_seed)
        return rng.normal(size=(self.vocab_size + 1, self.feature_dim))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Utterance:
    frames: np.ndarray  # (T, feature_dim)
    tokens: list[int]
    boundaries: list[tuple[int, int]]  # [start, end) per token

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    def end_frames(self) -> list[int]:
        """Last frame (inclusive) of every token."""
        return [e - 1 for _, e in self.boundaries]

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.tokens == other.tokens
            and self.boundaries == other.boundaries
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
        )


def generate(spec: TaskSpec, seed, prototypes: np.ndarray | None = None) -> Utterance:
    """Deterministic utterance for ``(spec, seed)``; ``seed`` may be an int or int sequence."""
    rng = np.random.default_rng(seed)
    protos = spec.prototypes() if prototypes is None else prototypes
    L = int(rng.integers(spec.len_min, spec.len_max + 1))
    tokens = rng.integers(1, spec.vocab_size + 1, size=L)
    durs = rng.integers(spec.dur_min, spec.dur_max + 1, size=L)
    ids: list[int] = []
    bounds: list[tuple[int, int]] = []
    for i, (tok, dur) in enumerate(zip(tokens, durs)):
        if spec.silence and i > 0:
            ids.extend([0] * int(rng.integers(1, spec.dur_min + 1)))
        start = len(ids)
        ids.extend([int(tok)] * int(dur))
        bounds.append((start, len(ids)))
    frames = protos[np.asarray(ids)]
    if spec.noise_std > 0:
        frames = frames + rng.normal(scale=spec.noise_std, size=frames.shape)
    return Utterance(np.ascontiguousarray(frames), [int(t) for t in tokens], bounds)


def generate_many(spec: TaskSpec, seeds: Iterable) -> list[Utterance]:
    protos = spec.prototypes()
    return [generate(spec, s, protos) for s in seeds]


def nearest_prototype(frames: np.ndarray, spec: TaskSpec) -> np.ndarray:
    """Token id of the closest token prototype for every frame."""
    protos = spec.prototypes()[1:]
    d = ((frames[:, None, :] - protos[None, :, :]) ** 2).sum(axis=-1)
    return d.argmin(axis=1) + 1


# ---------------------------------------------------------------------------
# binary dataset files (little-endian)
#
# header : magic[8] version:u32 vocab:u32 dim:u32 dur_min:u32 dur_max:u32
#          len_min:u32 len_max:u32 noise_std:f64 prototype_seed:u64 silence:u8
#          n_records:u64
# record : nbytes:u64 T:u32 L:u32 frames:f64[T*dim] tokens:u32[L]
#          boundaries:u32[L*2]     (nbytes counts everything after itself)


def write_dataset(utterances: Sequence[Utterance], path, spec: TaskSpec) -> Path:
    path = Path(path)
    with path.open("wb") as f:
        f.write(_HEADER.pack(
            MAGIC, VERSION, spec.vocab_size, spec.feature_dim, spec.dur_min, spec.dur_max,
            spec.len_min, spec.len_max, spec.noise_std, spec.prototype_seed, int(spec.silence),
        ))
        f.write(struct.pack("<Q", len(utterances)))
        for utt in utterances:
            T, L = utt.frames.shape[0], len(utt.tokens)
            if utt.frames.shape[1] != spec.feature_dim:
                raise DatasetFormatError("frame dimension does not match the task spec")
            body = b"".join([
                np.ascontiguousarray(utt.frames, dtype="<f8").tobytes(),
                np.asarray(utt.tokens, dtype="<u4").tobytes(),
                np.asarray(utt.boundaries, dtype="<u4").reshape(-1).tobytes(),
            ])
            f.write(_RECORD_HEAD.pack(8 + len(body), T, L))
            f.write(body)
    return path


def read_dataset(path) -> tuple[TaskSpec, list[Utterance]]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 8:
        raise DatasetFormatError("file too short for a dataset header")
    magic, version, *fields = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetFormatError("bad magic; not a dataset file")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    V, dim, dmin, dmax, lmin, lmax, noise, pseed, silence = fields
    spec = TaskSpec(V, dim, dmin, dmax, lmin, lmax, noise, pseed, bool(silence))
    off = _HEADER.size
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    utts = []
    for i in range(n):
        if off + _RECORD_HEAD.size > len(data):
            raise DatasetFormatError(f"truncated before record {i}")
        nbytes, T, L = _RECORD_HEAD.unpack_from(data, off)
        expected = 8 + 8 * T * dim + 4 * L + 8 * L
        if nbytes != expected or off + 8 + nbytes > len(data):
            raise DatasetFormatError(f"record {i} is truncated or malformed")
        p = off + _RECORD_HEAD.size
        frames = np.frombuffer(data, dtype="<f8", count=T * dim, offset=p).reshape(T, dim).astype(np.float64)
        p += 8 * T * dim
        tokens = np.frombuffer(data, dtype="<u4", count=L, offset=p).astype(int).tolist()
        p += 4 * L
        b = np.frombuffer(data, dtype="<u4", count=2 * L, offset=p).astype(int).reshape(L, 2)
        utts.append(Utterance(frames, tokens, [(int(s), int(e)) for s, e in b]))
        off += 8 + nbytes
    if off != len(data):
        raise DatasetFormatError("trailing bytes after the last record")
    return spec, utts
