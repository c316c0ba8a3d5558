"""Domain types and numeric primitives shared across the package.

Embeddings and frame sequences are plain float64 numpy arrays; the
``as_embedding`` / ``as_frames`` helpers validate and normalise them.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np


class AidError(Exception):
    """Base class for errors raised by aidbench."""

    exit_code = 1


class ConfigError(AidError, ValueError):
    exit_code = 2


class DataError(AidError, ValueError):
    exit_code = 3


class NumericError(AidError, ArithmeticError):
    exit_code = 4


def as_embedding(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DataError(f"embedding must be a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DataError("embedding contains non-finite values")
    return v


def as_frames(values) -> np.ndarray:
    f = np.asarray(values, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise DataError(f"frame sequence must be a T x D matrix with T, D >= 1, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise DataError("frame sequence contains non-finite values")
    return f


@dataclass(frozen=True)
class Provenance:
    """Where an utterance came from: ``original`` or ``converted``."""

    kind: str = "original"
    source_id: Optional[str] = None
    target_speaker: Optional[str] = None

    @classmethod
    def converted(cls, source_id: str, target_speaker: str) -> "Provenance":
        return cls("converted", source_id, target_speaker)

    @property
    def is_converted(self) -> bool:
        return self.kind == "converted"

    def encode(self) -> str:
        if self.kind == "original":
            return "original"
        return f"converted:{self.source_id}:{self.target_speaker}"

    @classmethod
    def decode(cls, text: str) -> "Provenance":
        if text == "original":
            return cls()
        kind, sep, rest = text.partition(":")
        source_id, sep2, target = rest.rpartition(":")
        if kind != "converted" or not sep or not sep2 or not source_id or not target:
            raise DataError(f"malformed provenance field: {text!r}")
        return cls.converted(source_id, target)


@dataclass(frozen=True, eq=False)
class Utterance:
    id: str
    speaker: str
    accent: str
    frames: Optional[np.ndarray] = None
    embedding: Optional[np.ndarray] = None
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        if self.frames is None and self.embedding is None:
            raise DataError(f"utterance {self.id!r} has neither frames nor embedding")
        if self.frames is not None:
            frames = as_frames(self.frames)
            frames.flags.writeable = False
            object.__setattr__(self, "frames", frames)
        if self.embedding is not None:
            emb = as_embedding(self.embedding)
            emb.flags.writeable = False
            object.__setattr__(self, "embedding", emb)

    @property
    def dim(self) -> int:
        if self.frames is not None:
            return self.frames.shape[1]
        return self.embedding.shape[0]

    def vector(self) -> np.ndarray:
        """Utterance-level vector: the stored embedding, else pooled frames."""
        if self.embedding is not None:
            return self.embedding
        return mean_pool(self.frames)


@dataclass(frozen=True)
class LabelIndex:
    """Lexicographically ordered accent and speaker label sets."""

    accents: tuple[str, ...]
    speakers: tuple[str, ...]

    def __post_init__(self):
        for name, labels in (("accent", self.accents), ("speaker", self.speakers)):
            if len(set(labels)) != len(labels):
                raise DataError(f"duplicate {name} labels")
            if list(labels) != sorted(labels):
                raise DataError(f"{name} labels must be sorted")

    @classmethod
    def from_labels(cls, accents: Iterable[str], speakers: Iterable[str]) -> "LabelIndex":
        return cls(tuple(sorted(set(accents))), tuple(sorted(set(speakers))))

    @classmethod
    def from_utterances(cls, utterances: Iterable[Utterance]) -> "LabelIndex":
        utts = list(utterances)
        return cls.from_labels((u.accent for u in utts), (u.speaker for u in utts))

    def accent_id(self, label: str) -> int:
        try:
            return self.accents.index(label)
        except ValueError:
            raise DataError(f"unknown accent label {label!r}") from None

    def speaker_id(self, label: str) -> int:
        try:
            return self.speakers.index(label)
        except ValueError:
            raise DataError(f"unknown speaker label {label!r}") from None


def cosine_similarity(a, b) -> float:
    a = as_embedding(a)
    b = as_embedding(b)
    if a.shape != b.shape:
        raise DataError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DataError("cosine similarity of a zero-norm embedding is undefined")
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


def mean_pool(frames) -> np.ndarray:
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise DataError("cannot pool an empty frame sequence")
    f = as_frames(f)
    # shifted by the first frame so a constant sequence pools to itself exactly
    return f[0] + (f - f[0]).mean(axis=0)


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max-subtraction; accepts a vector or a batch."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise DataError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax input contains non-finite values")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def argmax(scores) -> np.ndarray | int:
    # np.argmax returns the first maximum, i.e. the lowest class id on ties
    return np.argmax(np.asarray(scores), axis=-1)


def stream_seed(seed: int, *names: str | int) -> np.random.SeedSequence:
    """Named RNG substream: same (seed, names) always yields the same stream."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for n in names:
        key.append(zlib.crc32(str(n).encode("utf-8")))
    return np.random.SeedSequence(key)


def derive_seed(seed: int, *names: str | int) -> int:
    return int(stream_seed(seed, *names).generate_state(1, np.uint64)[0])


def rng_for(seed: int, *names: str | int) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, *names))


def centroid(vectors: Sequence[np.ndarray]) -> np.ndarray:
    if len(vectors) == 0:
        raise DataError("centroid of an empty set")
    return np.mean(np.stack(vectors), axis=0)
