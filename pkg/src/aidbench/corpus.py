"""Synthetic corpora, manifest + feature-store I/O and speaker-disjoint splits.

A synthetic frame of an utterance by speaker ``s`` with accent ``a`` is::

    alpha * g[a] + speaker_part(h[s], g[a]) + sigma * eps
    speaker_part = beta * h[s] + rho * (h[s] * g[a])

where ``g`` and ``h`` are seeded standard-normal latents. Embedding variants
shrink the component of ``speaker_part`` along ``h[s]`` before noise is added
("lid": halved, "wnta64": removed).
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import (
    DataError,
    ConfigError,
    LabelIndex,
    Provenance,
    Utterance,
    rng_for,
)

MAGIC = b"AIDF"
STORE_VERSION = 1
MANIFEST_COLUMNS = ("id", "speaker", "accent", "store_offset", "n_frames")
MANIFEST_NAME = "manifest.tsv"
STORE_NAME = "features.aidf"
FACTORS_NAME = "factors.json"

VARIANT_SHRINK = {"raw": 0.0, "lid": 0.5, "wnta64": 1.0}


class MalformedHeaderError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class DanglingReferenceError(DataError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_accents: int = 13
    speakers_per_accent: int = 10
    utterances_per_speaker: int = 10
    frame_dim: int = 16
    t_min: int = 20
    t_max: int = 40
    accent_scale: float = 1.0
    speaker_scale: float = 1.0
    noise_scale: float = 0.1
    entanglement: float = 0.0
    seed: int = 0
    # extra speakers reserved as conversion targets, never placed in a split
    pool_speakers: int = 0
    variant: str = "raw"

    def validate(self) -> None:
        counts = (self.n_accents, self.speakers_per_accent, self.utterances_per_speaker,
                  self.frame_dim, self.t_min)
        if any(int(c) < 1 for c in counts):
            raise ConfigError(f"synthetic corpus counts must all be >= 1: {self}")
        if self.t_max < self.t_min:
            raise ConfigError("t_max must be >= t_min")
        if self.pool_speakers < 0:
            raise ConfigError("pool_speakers must be >= 0")
        for name in ("accent_scale", "speaker_scale", "noise_scale"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and nonnegative, got {v}")
        if not 0.0 <= self.entanglement <= 1.0:
            raise ConfigError(f"entanglement must lie in [0, 1], got {self.entanglement}")
        if self.variant not in VARIANT_SHRINK:
            raise ConfigError(f"unknown embedding variant {self.variant!r}")


@dataclass(frozen=True, eq=False)
class FactorTable:
    """Latent generator vectors of a synthetic corpus, kept for oracle checks."""

    config: SynthConfig
    accents: dict[str, np.ndarray]
    speakers: dict[str, np.ndarray]
    speaker_accent: dict[str, str]

    def clean_frame(self, accent: str, speaker: str) -> np.ndarray:
        cfg = self.config
        return clean_signal(self.accents[accent], self.speakers[speaker], cfg.accent_scale,
                            cfg.speaker_scale, cfg.entanglement, VARIANT_SHRINK[cfg.variant])

    def to_json(self) -> dict:
        return {
            "config": asdict(self.config),
            "accents": {k: self.accents[k].tolist() for k in sorted(self.accents)},
            "speakers": {k: self.speakers[k].tolist() for k in sorted(self.speakers)},
            "speaker_accent": {k: self.speaker_accent[k] for k in sorted(self.speaker_accent)},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FactorTable":
        return cls(
            config=SynthConfig(**obj["config"]),
            accents={k: np.asarray(v, dtype=np.float64) for k, v in obj["accents"].items()},
            speakers={k: np.asarray(v, dtype=np.float64) for k, v in obj["speakers"].items()},
            speaker_accent=dict(obj["speaker_accent"]),
        )


def clean_signal(g, h, alpha, beta, rho, shrink=0.0) -> np.ndarray:
    speaker_part = beta * h + rho * (h * g)
    if shrink:
        u = h / np.linalg.norm(h)
        speaker_part = speaker_part - shrink * np.dot(speaker_part, u) * u
    return alpha * g + speaker_part


def _to_f32(x: np.ndarray) -> np.ndarray:
    # values stay float64 in memory but are exactly representable on disk
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True, eq=False)
class Corpus:
    utterances: tuple[Utterance, ...]
    label_index: LabelIndex
    factor_table: Optional[FactorTable] = None
    target_pool: tuple[str, ...] = ()

    def __post_init__(self):
        ids = [u.id for u in self.utterances]
        if len(set(ids)) != len(ids):
            dup = next(i for i, c in Counter(ids).items() if c > 1)
            raise DataError(f"duplicate utterance id {dup!r}")
        accents = set(self.label_index.accents)
        speakers = set(self.label_index.speakers)
        for u in self.utterances:
            if u.accent not in accents or u.speaker not in speakers:
                raise DataError(f"utterance {u.id!r} has labels missing from the label index")
        object.__setattr__(self, "_by_id", {u.id: u for u in self.utterances})

    @classmethod
    def build(cls, utterances: Iterable[Utterance], factor_table=None, target_pool=()) -> "Corpus":
        utts = tuple(sorted(utterances, key=lambda u: u.id))
        index = LabelIndex.from_utterances(utts)
        return cls(utts, index, factor_table, tuple(sorted(target_pool)))

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, uid: str) -> Utterance:
        try:
            return self._by_id[uid]
        except KeyError:
            raise DataError(f"unknown utterance id {uid!r}") from None

    def __contains__(self, uid: str) -> bool:
        return uid in self._by_id

    @property
    def dim(self) -> int:
        return self.utterances[0].dim

    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self.utterances})

    def speaker_accents(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for u in self.utterances:
            if not u.provenance.is_converted:
                out.setdefault(u.speaker, u.accent)
        return out

    def of_speaker(self, speaker: str) -> list[Utterance]:
        return [u for u in self.utterances if u.speaker == speaker]

    def subset(self, ids: Iterable[str]) -> list[Utterance]:
        return [self[i] for i in sorted(ids)]


def generate_synthetic(cfg: SynthConfig) -> Corpus:
    cfg.validate()
    D = cfg.frame_dim
    accents = [f"acc{a:02d}" for a in range(cfg.n_accents)]
    speaker_accent: dict[str, str] = {}
    for a, acc in enumerate(accents):
        for j in range(cfg.speakers_per_accent):
            speaker_accent[f"spk{a:02d}_{j:02d}"] = acc
    pool = [f"pool{j:03d}" for j in range(cfg.pool_speakers)]
    for j, spk in enumerate(pool):
        speaker_accent[spk] = accents[j % cfg.n_accents]

    latent_rng = rng_for(cfg.seed, "latents")
    G = _to_f32(latent_rng.standard_normal((cfg.n_accents, D)))
    H = _to_f32(latent_rng.standard_normal((len(speaker_accent), D)))
    factors = FactorTable(
        config=cfg,
        accents={acc: G[i] for i, acc in enumerate(accents)},
        speakers={spk: H[i] for i, spk in enumerate(speaker_accent)},
        speaker_accent=speaker_accent,
    )

    utts = []
    for spk, acc in speaker_accent.items():
        clean = factors.clean_frame(acc, spk)
        for k in range(cfg.utterances_per_speaker):
            uid = f"{spk}_u{k:03d}"
            rng = rng_for(cfg.seed, "utt", uid)
            T = int(rng.integers(cfg.t_min, cfg.t_max + 1))
            eps = rng.standard_normal((T, D))
            frames = _to_f32(clean + cfg.noise_scale * eps)
            utts.append(Utterance(uid, spk, acc, frames=frames))
    return Corpus.build(utts, factors, pool)


# ---------------------------------------------------------------------------
# manifest + feature store


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_store(records: list[tuple[str, np.ndarray]], dim: int) -> tuple[bytes, list[int]]:
    """Serialise ``(id, T x D frames)`` records; returns bytes and record offsets."""
    parts = [MAGIC, struct.pack("<IIQ", STORE_VERSION, dim, len(records))]
    offset = sum(len(p) for p in parts)
    offsets = []
    for uid, frames in records:
        if frames.shape[1] != dim:
            raise DimensionMismatchError(f"record {uid!r} has dim {frames.shape[1]}, store dim {dim}")
        raw_id = uid.encode("utf-8")
        chunk = (struct.pack("<H", len(raw_id)) + raw_id + struct.pack("<I", frames.shape[0])
                 + np.ascontiguousarray(frames, dtype="<f4").tobytes())
        offsets.append(offset)
        offset += len(chunk)
        parts.append(chunk)
    return b"".join(parts), offsets


def decode_store(data: bytes) -> tuple[int, dict[str, tuple[int, np.ndarray]]]:
    """Parse a feature store; returns the dim and ``{id: (offset, frames)}``."""
    if len(data) < 20 or data[:4] != MAGIC:
        raise MalformedHeaderError("feature store does not start with AIDF magic")
    version, dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != STORE_VERSION:
        raise MalformedHeaderError(f"unsupported feature store version {version}")
    if dim == 0:
        raise DimensionMismatchError("feature store declares dim 0")
    pos = 20
    records: dict[str, tuple[int, np.ndarray]] = {}
    for _ in range(count):
        start = pos
        try:
            (n_id,) = struct.unpack_from("<H", data, pos)
            pos += 2
            uid = data[pos:pos + n_id].decode("utf-8")
            pos += n_id
            (T,) = struct.unpack_from("<I", data, pos)
            pos += 4
        except (struct.error, UnicodeDecodeError) as exc:
            raise DataError(f"truncated or corrupt record at byte {start}") from exc
        nbytes = 4 * T * dim
        if pos + nbytes > len(data) or T == 0:
            raise DimensionMismatchError(f"record {uid!r}: {T} x {dim} payload does not fit the store")
        frames = np.frombuffer(data, dtype="<f4", count=T * dim, offset=pos).reshape(T, dim)
        pos += nbytes
        if uid in records:
            raise DataError(f"duplicate record id {uid!r} in feature store")
        records[uid] = (start, frames.astype(np.float64))
    if pos != len(data):
        raise DataError(f"{len(data) - pos} trailing bytes after {count} records")
    return dim, records


def _store_frames(u: Utterance) -> np.ndarray:
    # utterance-level embeddings travel as single-frame records
    return u.frames if u.frames is not None else u.embedding[None, :]


def write_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    records = [(u.id, _store_frames(u)) for u in corpus.utterances]
    store, offsets = encode_store(records, corpus.dim)
    lines = ["#" + "\t".join(MANIFEST_COLUMNS + ("provenance",))]
    if corpus.target_pool:
        lines.append("#@target_pool\t" + ",".join(corpus.target_pool))
    for u, off, (_, fr) in zip(corpus.utterances, offsets, records):
        lines.append("\t".join([u.id, u.speaker, u.accent, str(off), str(fr.shape[0]),
                                u.provenance.encode()]))
    _atomic_write(out / STORE_NAME, store)
    _atomic_write(out / MANIFEST_NAME, ("\n".join(lines) + "\n").encode("utf-8"))
    if corpus.factor_table is not None:
        text = json.dumps(corpus.factor_table.to_json(), sort_keys=True, indent=1)
        _atomic_write(out / FACTORS_NAME, text.encode("utf-8"))
    elif (out / FACTORS_NAME).exists():
        (out / FACTORS_NAME).unlink()
    return out


def _parse_manifest(text: str):
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise MalformedHeaderError("manifest must start with a '#' header line")
    columns = tuple(c.strip() for c in lines[0][1:].split("\t"))
    if columns[:5] != MANIFEST_COLUMNS or len(columns) > 6 or (len(columns) == 6 and columns[5] != "provenance"):
        raise MalformedHeaderError(f"unexpected manifest columns {columns}")
    meta: dict[str, str] = {}
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#@"):
            key, _, value = line[2:].partition("\t")
            meta[key] = value
            continue
        if line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != len(columns):
            raise DataError(f"manifest line {lineno}: expected {len(columns)} fields, got {len(fields)}")
        try:
            offset, n_frames = int(fields[3]), int(fields[4])
        except ValueError:
            raise DataError(f"manifest line {lineno}: non-integer offset or frame count") from None
        prov = Provenance.decode(fields[5]) if len(columns) == 6 else Provenance()
        rows.append((fields[0], fields[1], fields[2], offset, n_frames, prov))
    return rows, meta


def ingest(manifest_path, feature_store_path, factors_path=None) -> Corpus:
    rows, meta = _parse_manifest(Path(manifest_path).read_text(encoding="utf-8"))
    _, records = decode_store(Path(feature_store_path).read_bytes())
    utts = []
    for uid, speaker, accent, offset, n_frames, prov in rows:
        if uid not in records:
            raise DanglingReferenceError(f"manifest references missing record {uid!r}")
        rec_offset, frames = records[uid]
        if rec_offset != offset:
            raise DataError(f"record {uid!r} is at byte {rec_offset}, manifest says {offset}")
        if frames.shape[0] != n_frames:
            raise DimensionMismatchError(
                f"record {uid!r} has {frames.shape[0]} frames, manifest says {n_frames}")
        utts.append(Utterance(uid, speaker, accent, frames=frames, provenance=prov))
    factors = None
    if factors_path is not None and Path(factors_path).exists():
        factors = FactorTable.from_json(json.loads(Path(factors_path).read_text(encoding="utf-8")))
    pool = [s for s in meta.get("target_pool", "").split(",") if s]
    return Corpus.build(utts, factors, pool)


def read_corpus(corpus_dir) -> Corpus:
    d = Path(corpus_dir)
    return ingest(d / MANIFEST_NAME, d / STORE_NAME, d / FACTORS_NAME)


# ---------------------------------------------------------------------------
# speaker-disjoint splits


@dataclass(frozen=True)
class SplitSpec:
    train: frozenset[str]
    val: frozenset[str]
    test: frozenset[str]
    seen_speakers: frozenset[str]
    unseen_speakers: frozenset[str]
    val_speakers: frozenset[str] = field(default_factory=frozenset)

    def to_json(self) -> dict:
        return {k: sorted(getattr(self, k)) for k in
                ("train", "val", "test", "seen_speakers", "unseen_speakers", "val_speakers")}

    @classmethod
    def from_json(cls, obj: dict) -> "SplitSpec":
        return cls(**{k: frozenset(v) for k, v in obj.items()})

    def save(self, path) -> None:
        _atomic_write(Path(path), json.dumps(self.to_json(), indent=1).encode("utf-8"))

    @classmethod
    def load(cls, path) -> "SplitSpec":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def with_augmented(self, corpus: Corpus) -> "SplitSpec":
        """Add every converted utterance whose source is in train to train."""
        extra = {u.id for u in corpus.utterances
                 if u.provenance.is_converted and u.provenance.source_id in self.train}
        speakers = {corpus[i].speaker for i in extra}
        return SplitSpec(self.train | extra, self.val, self.test,
                         self.seen_speakers | speakers, self.unseen_speakers, self.val_speakers)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_speaker_disjoint(corpus: Corpus, train_fraction: float, val_fraction: float,
                           seed: int) -> SplitSpec:
    if not (0 < train_fraction < 1 and 0 < val_fraction < 1 and train_fraction + val_fraction < 1):
        raise ConfigError("split fractions must lie in (0, 1) and sum to less than 1")
    pool = set(corpus.target_pool)
    by_accent: dict[str, set[str]] = {}
    for u in corpus.utterances:
        if u.provenance.is_converted or u.speaker in pool:
            continue
        by_accent.setdefault(u.accent, set()).add(u.speaker)
    groups = {"train": set(), "val": set(), "test": set()}
    for accent in sorted(by_accent):
        speakers = sorted(by_accent[accent])
        n = len(speakers)
        if n < 3:
            raise DataError(f"accent {accent!r} has {n} speakers; speaker-disjoint splitting needs >= 3")
        order = rng_for(seed, "split", accent).permutation(n)
        shuffled = [speakers[i] for i in order]
        n_train = max(1, min(n - 2, _round_half_up(n * train_fraction)))
        n_val = max(1, min(n - n_train - 1, _round_half_up(n * val_fraction)))
        groups["train"].update(shuffled[:n_train])
        groups["val"].update(shuffled[n_train:n_train + n_val])
        groups["test"].update(shuffled[n_train + n_val:])
    ids = {k: set() for k in groups}
    for u in corpus.utterances:
        if u.provenance.is_converted:
            continue
        for k, spk in groups.items():
            if u.speaker in spk:
                ids[k].add(u.id)
    split = SplitSpec(frozenset(ids["train"]), frozenset(ids["val"]), frozenset(ids["test"]),
                      frozenset(groups["train"]), frozenset(groups["test"]), frozenset(groups["val"]))
    validate_split(corpus, split)
    return split


def validate_split(corpus: Corpus, split: SplitSpec) -> None:
    if split.train & split.val or split.train & split.test or split.val & split.test:
        raise DataError("split id sets overlap")
    train_spk = {corpus[i].speaker for i in split.train}
    test_spk = {corpus[i].speaker for i in split.test}
    val_spk = {corpus[i].speaker for i in split.val}
    leaked = train_spk & (test_spk | val_spk)
    if leaked:
        raise DataError(f"speakers in both train and held-out splits: {sorted(leaked)[:5]}")
    missing = {corpus[i].accent for i in split.test} - {corpus[i].accent for i in split.train}
    if missing:
        raise DataError(f"test accents absent from train: {sorted(missing)}")


def class_counts(corpus: Corpus, split: SplitSpec) -> dict[str, dict[str, Counter]]:
    """Per-split utterance counts by accent and by speaker."""
    out = {}
    for name in ("train", "val", "test"):
        ids = getattr(split, name)
        out[name] = {
            "accent": Counter(corpus[i].accent for i in ids),
            "speaker": Counter(corpus[i].speaker for i in ids),
        }
    return out
