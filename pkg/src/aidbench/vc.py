"""Speaker augmentation by feature-space voice conversion.

Engines:

* ``knn``: each source frame is replaced by the mean of its k nearest rows
  in the target speaker's matching set.
* ``oracle``: synthetic corpora only; swaps the speaker latent in the
  generator equation and keeps the accent latent and the noise realisation.
* ``identity``: no-op control used by the analysis protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import ConfigError, DataError, Provenance, Utterance, as_frames, rng_for
from .corpus import Corpus, SplitSpec, _to_f32
from .metrics import MeanStd, aecs, random_pair_aecs, speaker_similarity_stats

ENGINES = ("knn", "oracle", "identity")


@dataclass(frozen=True)
class VcConfig:
    k: int = 4
    distance: str = "cosine"
    versions_per_utterance: int = 2
    targets_per_source_analysis: int = 4
    target_pool: tuple[str, ...] = ()
    distinct_targets: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.distance not in ("cosine", "euclidean"):
            raise ConfigError(f"unknown distance {self.distance!r}")
        if self.versions_per_utterance < 0 or self.targets_per_source_analysis < 1:
            raise ConfigError("versions_per_utterance must be >= 0, targets_per_source_analysis >= 1")


@dataclass(frozen=True, eq=False)
class MatchingSet:
    speaker: str
    pool: np.ndarray
    # row norms, precomputed for cosine matching
    norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pool = as_frames(self.pool)
        pool.flags.writeable = False
        object.__setattr__(self, "pool", pool)
        object.__setattr__(self, "norms", np.linalg.norm(pool, axis=1))

    def __len__(self) -> int:
        return self.pool.shape[0]


def build_matching_set(corpus: Corpus, speaker: str) -> MatchingSet:
    utts = [u for u in corpus.utterances if u.speaker == speaker and not u.provenance.is_converted]
    if not utts:
        raise DataError(f"unknown speaker {speaker!r} (no original utterances)")
    missing = [u.id for u in utts if u.frames is None]
    if missing:
        raise DataError(f"speaker {speaker!r} has embedding-only utterances, e.g. {missing[0]!r}")
    return MatchingSet(speaker, np.concatenate([u.frames for u in utts], axis=0))


def frame_distances(frames: np.ndarray, ms: MatchingSet, distance: str) -> np.ndarray:
    """T x N distance matrix between source frames and matching-set rows."""
    if distance == "euclidean":
        diff = frames[:, None, :] - ms.pool[None, :, :]
        return np.sqrt((diff * diff).sum(axis=2))
    fnorm = np.linalg.norm(frames, axis=1)
    if np.any(fnorm == 0) or np.any(ms.norms == 0):
        raise DataError("cosine matching is undefined for zero-norm frames")
    return 1.0 - (frames @ ms.pool.T) / (fnorm[:, None] * ms.norms[None, :])


def knn_convert(source, target: MatchingSet, cfg: VcConfig) -> np.ndarray:
    """Mean of the k nearest matching-set rows for each source frame.

    Ties in distance go to the lower pool row index; the selected rows are
    summed in pool-index order.
    """
    frames = as_frames(source)
    if frames.shape[1] != target.pool.shape[1]:
        raise DataError(f"source dim {frames.shape[1]} != matching set dim {target.pool.shape[1]}")
    k = cfg.k
    if len(target) < k:
        raise DataError(f"matching set of {target.speaker!r} has {len(target)} rows < k={k}")
    d = frame_distances(frames, target, cfg.distance)
    nearest = np.sort(np.argsort(d, axis=1, kind="stable")[:, :k], axis=1)
    return target.pool[nearest].sum(axis=1) / k


def oracle_convert(source: Utterance, target_speaker: str, corpus: Corpus,
                   new_id: Optional[str] = None) -> Utterance:
    """Replace the source speaker's latent by the target's, keeping accent and noise."""
    factors = corpus.factor_table
    if factors is None:
        raise DataError("oracle conversion needs a synthetic corpus with a factor table")
    if target_speaker not in factors.speakers:
        raise DataError(f"no latent for target speaker {target_speaker!r}")
    old = factors.clean_frame(source.accent, source.speaker)
    new = factors.clean_frame(source.accent, target_speaker)
    frames = emb = None
    if source.frames is not None:
        frames = _to_f32(new + (source.frames - old))
    if source.embedding is not None:
        emb = _to_f32(new + (source.embedding - old))
    return Utterance(new_id or f"{source.id}~{target_speaker}", target_speaker, source.accent,
                     frames=frames, embedding=emb,
                     provenance=Provenance.converted(source.id, target_speaker))


class Converter:
    """Applies one engine to utterances, caching matching sets per target."""

    def __init__(self, corpus: Corpus, engine: str, cfg: VcConfig,
                 matching_corpus: Optional[Corpus] = None):
        if engine not in ENGINES:
            raise ConfigError(f"unknown engine {engine!r}")
        if engine == "oracle" and corpus.factor_table is None:
            raise DataError("oracle engine is unavailable for corpora without a factor table")
        self.corpus = corpus
        self.matching_corpus = matching_corpus or corpus
        self.engine = engine
        self.cfg = cfg
        self._sets: dict[str, MatchingSet] = {}

    def matching_set(self, speaker: str) -> MatchingSet:
        if speaker not in self._sets:
            self._sets[speaker] = build_matching_set(self.matching_corpus, speaker)
        return self._sets[speaker]

    def __call__(self, source: Utterance, target: str, new_id: str) -> Utterance:
        prov = Provenance.converted(source.id, target)
        if self.engine == "oracle":
            return oracle_convert(source, target, self.corpus, new_id)
        if self.engine == "identity":
            return Utterance(new_id, target, source.accent, frames=source.frames,
                             embedding=source.embedding, provenance=prov)
        if source.frames is None:
            raise DataError(f"knn conversion needs frames; {source.id!r} is embedding-only")
        frames = knn_convert(source.frames, self.matching_set(target), self.cfg)
        return Utterance(new_id, target, source.accent, frames=frames, provenance=prov)


def _resolve_pool(corpus: Corpus, cfg: VcConfig) -> tuple[str, ...]:
    pool = tuple(sorted(cfg.target_pool)) if cfg.target_pool else corpus.target_pool
    if not pool:
        raise ConfigError("no target speakers: set target_pool or generate pool speakers")
    return pool


def draw_targets(pool: Sequence[str], n: int, rng: np.random.Generator, exclude: str,
                 distinct: bool = True) -> list[str]:
    candidates = [s for s in pool if s != exclude]
    if not candidates:
        raise DataError(f"target pool has no speaker other than {exclude!r}")
    if distinct and n <= len(candidates):
        return [candidates[i] for i in rng.choice(len(candidates), size=n, replace=False)]
    return [candidates[i] for i in rng.integers(0, len(candidates), size=n)]


def augment_corpus(corpus: Corpus, split: SplitSpec, cfg: VcConfig, engine: str) -> Corpus:
    """Add ``versions_per_utterance`` converted copies of every train utterance.

    Targets are drawn per source from a stream keyed by (seed, utterance id),
    and recorded in each copy's provenance.
    """
    cfg.validate()
    if engine not in ("knn", "oracle"):
        raise ConfigError(f"augmentation engine must be knn or oracle, got {engine!r}")
    if cfg.versions_per_utterance == 0:
        return corpus
    pool = _resolve_pool(corpus, cfg)
    held_out = {corpus[i].speaker for i in split.test | split.val}
    overlap = held_out.intersection(pool)
    if overlap:
        raise DataError(f"target pool overlaps held-out speakers {sorted(overlap)}; "
                        "this would breach speaker disjointness")
    convert = Converter(corpus, engine, cfg)
    converted = []
    for uid in sorted(split.train):
        src = corpus[uid]
        if src.provenance.is_converted:
            continue
        rng = rng_for(cfg.seed, "augment", uid)
        targets = draw_targets(pool, cfg.versions_per_utterance, rng, src.speaker, cfg.distinct_targets)
        for j, tgt in enumerate(targets):
            converted.append(convert(src, tgt, f"{uid}~{engine}{j}~{tgt}"))
    return Corpus.build(corpus.utterances + tuple(converted), corpus.factor_table, corpus.target_pool)


# ---------------------------------------------------------------------------
# timbre / accent analysis


@dataclass(frozen=True)
class ConversionRecord:
    source_id: str
    source_speaker: str
    target_speaker: str
    accent: str
    sim_source: float
    sim_target: float
    accent_correct: bool
    aecs: float


@dataclass(frozen=True)
class VcAnalysisReport:
    engine: str
    sim_source: MeanStd
    sim_target: MeanStd
    accent_accuracy: float
    aecs: MeanStd
    random_pair_aecs: float
    per_accent: dict
    records: tuple[ConversionRecord, ...] = ()

    @property
    def n_conversions(self) -> int:
        return len(self.records)

    def row(self) -> list[str]:
        return [self.engine, str(self.sim_source), str(self.sim_target),
                f"{100 * self.accent_accuracy:.2f}", f"{self.aecs.mean:.2f}"]

    def to_json(self) -> dict:
        ms = lambda m: {"mean": m.mean, "std": m.std, "n": m.n}
        return {
            "engine": self.engine,
            "n_conversions": self.n_conversions,
            "sim_source": ms(self.sim_source),
            "sim_target": ms(self.sim_target),
            "accent_accuracy": self.accent_accuracy,
            "aecs": ms(self.aecs),
            "random_pair_aecs": self.random_pair_aecs,
            "per_accent": self.per_accent,
        }


ANALYSIS_HEADER = ["VC system", "Spk sim source", "Spk sim target", "Accent acc (%)", "AECS"]


def analyze_vc(corpus: Corpus, engine: str, cfg: VcConfig, aid_model,
               speaker_centroids: Mapping[str, np.ndarray],
               source_ids: Optional[Iterable[str]] = None,
               n_random_pairs: int = 1000) -> VcAnalysisReport:
    """Convert each source to several random targets and score the results.

    Speaker similarity compares pooled converted vectors to speaker centroids;
    accent preservation uses the model's accent predictions and AECS between
    source and converted accent embeddings.
    """
    from .classifier import forward

    cfg.validate()
    if not getattr(aid_model, "trained", False) or aid_model.mode != "eval":
        raise DataError("analyze_vc needs a trained model in eval mode")
    pool = _resolve_pool(corpus, cfg)
    ids = sorted(source_ids) if source_ids is not None else [
        u.id for u in corpus.utterances if not u.provenance.is_converted]
    if not ids:
        raise DataError("no source utterances to analyze")
    convert = Converter(corpus, engine, cfg)
    sources, conversions = [], []
    for uid in ids:
        src = corpus[uid]
        rng = rng_for(cfg.seed, "analysis", uid)
        for j, tgt in enumerate(draw_targets(pool, cfg.targets_per_source_analysis, rng, src.speaker)):
            sources.append(src)
            conversions.append(convert(src, tgt, f"{uid}~a{j}~{tgt}"))

    sim = speaker_similarity_stats(
        ((c.vector(), s.speaker, c.speaker) for s, c in zip(sources, conversions)), speaker_centroids)
    src_emb = forward(aid_model, np.stack([u.vector() for u in sources])).embedding
    conv_out = forward(aid_model, np.stack([c.vector() for c in conversions]))
    predicted = np.argmax(conv_out.accent_logits, axis=1)
    records = []
    for i, (s, c) in enumerate(zip(sources, conversions)):
        records.append(ConversionRecord(
            s.id, s.speaker, c.speaker, s.accent, sim.per_conversion[i][0], sim.per_conversion[i][1],
            bool(aid_model.labels.accents[predicted[i]] == s.accent),
            aecs(src_emb[i], conv_out.embedding[i])))

    unique_src = forward(aid_model, np.stack([corpus[i].vector() for i in ids])).embedding
    baseline = random_pair_aecs(list(unique_src), n_random_pairs, cfg.seed)

    per_accent = {}
    for acc in sorted({r.accent for r in records}):
        rs = [r for r in records if r.accent == acc]
        per_accent[acc] = {
            "sim_source": float(np.mean([r.sim_source for r in rs])),
            "sim_target": float(np.mean([r.sim_target for r in rs])),
            "accent_accuracy": float(np.mean([r.accent_correct for r in rs])),
            "aecs": float(np.mean([r.aecs for r in rs])),
        }
    return VcAnalysisReport(
        engine=engine,
        sim_source=sim.source,
        sim_target=sim.target,
        accent_accuracy=float(np.mean([r.accent_correct for r in records])),
        aecs=MeanStd.of(r.aecs for r in records),
        random_pair_aecs=baseline,
        per_accent=per_accent,
        records=tuple(records),
    )
