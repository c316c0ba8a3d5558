"""Classification metrics, accent-embedding similarity and speaker similarity."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import DataError, cosine_similarity, mean_pool, rng_for

AVERAGING_NOTE = "macro (unweighted) over classes; zero-support classes count as 0"


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise DataError("confusion matrix must be square")
        if np.any(c < 0):
            raise DataError("confusion matrix has negative counts")
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]


@dataclass(frozen=True, eq=False)
class EvalReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    confusion: Optional[ConfusionMatrix] = None
    n_utterances: int = 0
    n_unseen_speakers: int = 0

    def summary(self) -> dict:
        return {
            "precision": self.macro_precision,
            "recall": self.macro_recall,
            "f1": self.macro_f1,
            "accuracy": self.accuracy,
            "n_utterances": self.n_utterances,
            "n_unseen_speakers": self.n_unseen_speakers,
        }

    def to_json(self) -> dict:
        d = self.summary()
        d["per_class"] = {
            "labels": list(self.confusion.labels) if self.confusion is not None else [],
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
        }
        if self.confusion is not None:
            d["confusion"] = self.confusion.counts.tolist()
        return d


def confusion(predictions, true_labels, n_classes: int, labels: Sequence[str] = ()) -> ConfusionMatrix:
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise DataError("predictions and labels are not aligned")
    if pred.size and (min(pred.min(), true.min()) < 0 or max(pred.max(), true.max()) >= n_classes):
        raise DataError(f"label id out of range [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts, tuple(labels))


def macro_metrics(cm: ConfusionMatrix, n_unseen_speakers: int = 0) -> EvalReport:
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total == 0:
        raise DataError("macro metrics of an empty confusion matrix")
    tp = np.diag(c)
    predicted = c.sum(axis=0)
    actual = c.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return EvalReport(
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        accuracy=float(tp.sum() / total),
        confusion=cm,
        n_utterances=int(total),
        n_unseen_speakers=n_unseen_speakers,
    )


def aecs(a, b) -> float:
    """Accent Embedding Cosine Similarity of two accent embeddings."""
    return cosine_similarity(a, b)


def random_pair_aecs(embeddings: Sequence[np.ndarray], n_pairs: int = 1000, seed: int = 0) -> float:
    """Chance baseline: mean AECS over seeded random pairs of distinct items."""
    n = len(embeddings)
    if n < 2:
        raise DataError("random-pair baseline needs at least two embeddings")
    rng = rng_for(seed, "aecs-pairs")
    i = rng.integers(0, n, size=n_pairs)
    j = (i + rng.integers(1, n, size=n_pairs)) % n
    return float(np.mean([aecs(embeddings[a], embeddings[b]) for a, b in zip(i, j)]))


def speaker_centroids(utterances: Iterable) -> dict[str, np.ndarray]:
    """Mean pooled vector per speaker over original (unconverted) utterances."""
    groups: dict[str, list[np.ndarray]] = {}
    for u in utterances:
        if u.provenance.is_converted:
            continue
        groups.setdefault(u.speaker, []).append(u.vector())
    return {s: np.mean(np.stack(v), axis=0) for s, v in sorted(groups.items())}


@dataclass(frozen=True)
class MeanStd:
    mean: float
    std: float
    n: int = 0

    def __str__(self) -> str:
        return f"{self.mean:.2f} ± {self.std:.2f}"

    @classmethod
    def of(cls, values) -> "MeanStd":
        v = np.asarray(list(values), dtype=np.float64)
        if v.size == 0:
            return cls(float("nan"), float("nan"), 0)
        return cls(float(v.mean()), float(v.std()), int(v.size))


@dataclass(frozen=True)
class SpeakerSimilarity:
    source: MeanStd
    target: MeanStd
    per_conversion: tuple[tuple[float, float], ...] = ()


def speaker_similarity_stats(conversions, centroids: Mapping[str, np.ndarray]) -> SpeakerSimilarity:
    """Cosine similarity of each converted vector to its source and target centroids.

    ``conversions`` yields ``(vector_or_frames, source_speaker, target_speaker)``.
    """
    pairs = []
    for vec, src, tgt in conversions:
        for spk in (src, tgt):
            if spk not in centroids:
                raise DataError(f"no centroid for speaker {spk!r}")
        v = np.asarray(vec, dtype=np.float64)
        if v.ndim == 2:
            v = mean_pool(v)
        pairs.append((cosine_similarity(v, centroids[src]), cosine_similarity(v, centroids[tgt])))
    return SpeakerSimilarity(
        MeanStd.of(p[0] for p in pairs), MeanStd.of(p[1] for p in pairs), tuple(pairs))


# ---------------------------------------------------------------------------
# report rendering


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def metadata_header(config: object, seed: int) -> list[str]:
    return [
        f"# config_hash: {config_hash(config)}",
        f"# seed: {seed}",
        f"# averaging: {AVERAGING_NOTE}",
    ]


def render_eval_tsv(report: EvalReport, config: object = None, seed: int = 0) -> str:
    lines = metadata_header(config, seed)
    lines.append("class\tprecision\trecall\tf1")
    labels = report.confusion.labels if report.confusion is not None and report.confusion.labels else \
        tuple(str(i) for i in range(len(report.f1)))
    for lab, p, r, f in zip(labels, report.precision, report.recall, report.f1):
        lines.append(f"{lab}\t{p:.6f}\t{r:.6f}\t{f:.6f}")
    lines.append(f"macro\t{report.macro_precision:.6f}\t{report.macro_recall:.6f}\t{report.macro_f1:.6f}")
    lines.append(f"accuracy\t{report.accuracy:.6f}")
    return "\n".join(lines) + "\n"


def render_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) for i, h in enumerate(header)]
    fmt = " | ".join("{:<%d}" % w for w in widths)
    sep = "-+-".join("-" * w for w in widths)
    out = [fmt.format(*header), sep]
    out.extend(fmt.format(*[str(c) for c in r]) for r in rows)
    return "\n".join(out) + "\n"
