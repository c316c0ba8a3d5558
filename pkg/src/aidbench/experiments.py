"""Config-driven experiment runs: corpus -> augment -> train -> evaluate.

All randomness in a run flows from ``ExperimentSpec.seed`` through named
substreams: corpus, split, augment, init, shuffle, analysis.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .classifier import (
    AidModel,
    TrainingConfig,
    model_for,
    predict,
    save_checkpoint,
    stack_inputs,
    train,
)
from .core import AidError, ConfigError, DataError, derive_seed
from .corpus import (
    Corpus,
    SplitSpec,
    SynthConfig,
    VARIANT_SHRINK,
    _atomic_write,
    encode_store,
    generate_synthetic,
    ingest,
    split_speaker_disjoint,
)
from .metrics import (
    AVERAGING_NOTE,
    EvalReport,
    confusion,
    macro_metrics,
    render_table,
    speaker_centroids,
)
from .vc import ANALYSIS_HEADER, VcAnalysisReport, VcConfig, analyze_vc, augment_corpus

AUGMENTATIONS = ("none", "knn", "oracle", "knn+oracle")


@dataclass(frozen=True)
class IngestPaths:
    manifest: str
    store: str
    factors: Optional[str] = None


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "experiment"
    synthetic: Optional[SynthConfig] = None
    ingest: Optional[IngestPaths] = None
    variant: str = "raw"
    augmentation: str = "none"
    vc: VcConfig = field(default_factory=VcConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    analysis_engines: tuple[str, ...] = ()
    out_dir: Optional[str] = None
    seed: int = 0

    def validate(self) -> None:
        if (self.synthetic is None) == (self.ingest is None):
            raise ConfigError("exactly one corpus source (synthetic or ingest) is required")
        if self.variant not in VARIANT_SHRINK:
            raise ConfigError(f"unknown embedding variant {self.variant!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation must be one of {AUGMENTATIONS}")
        if self.ingest is not None:
            for p in (self.ingest.manifest, self.ingest.store):
                if not Path(p).exists():
                    raise DataError(f"input path does not exist: {p}")
        self.training.validate()
        self.vc.validate()

    def to_json(self) -> dict:
        d = asdict(self)
        d["training"] = self.training.to_json()
        return d

    def spec_hash(self) -> str:
        d = self.to_json()
        d.pop("out_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# config files

_SECTION_TYPES = {"vc": VcConfig, "synthetic": SynthConfig}


def _build(cls, obj, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(obj) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = dict(obj)
    if "target_pool" in kwargs:
        kwargs["target_pool"] = tuple(kwargs["target_pool"])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def spec_from_dict(obj: dict) -> ExperimentSpec:
    if not isinstance(obj, dict):
        raise ConfigError("experiment config must be a mapping")
    obj = dict(obj)
    known = {"name", "seed", "corpus", "variant", "augmentation", "vc", "training", "split",
             "analysis", "out"}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
    kwargs: dict = {}
    for key in ("name", "variant", "augmentation"):
        if key in obj:
            kwargs[key] = str(obj[key])
    if "seed" in obj:
        kwargs["seed"] = int(obj["seed"])
    if "out" in obj:
        kwargs["out_dir"] = str(obj["out"])
    corpus = obj.get("corpus") or {}
    if set(corpus) - {"synthetic", "ingest"}:
        raise ConfigError(f"unknown corpus keys: {sorted(set(corpus) - {'synthetic', 'ingest'})}")
    if "synthetic" in corpus:
        kwargs["synthetic"] = _build(SynthConfig, corpus["synthetic"] or {}, "corpus.synthetic")
    if "ingest" in corpus:
        kwargs["ingest"] = _build(IngestPaths, corpus["ingest"], "corpus.ingest")
    if "vc" in obj:
        kwargs["vc"] = _build(VcConfig, obj["vc"] or {}, "vc")
    if "training" in obj:
        try:
            kwargs["training"] = TrainingConfig.from_json(obj["training"] or {})
        except TypeError as exc:
            raise ConfigError(f"training: {exc}") from None
    split = obj.get("split") or {}
    if set(split) - {"train_fraction", "val_fraction"}:
        raise ConfigError(f"unknown split keys: {sorted(split)}")
    kwargs.update({k: float(v) for k, v in split.items()})
    analysis = obj.get("analysis") or {}
    if set(analysis) - {"engines"}:
        raise ConfigError(f"unknown analysis keys: {sorted(analysis)}")
    if "engines" in analysis:
        kwargs["analysis_engines"] = tuple(analysis["engines"])
    return ExperimentSpec(**kwargs)


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_yaml(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return obj or {}


def load_spec(path) -> ExperimentSpec:
    return spec_from_dict(load_yaml(path))


def load_matrix(path) -> list[ExperimentSpec]:
    """Matrix file: ``experiments`` list, each merged over optional ``defaults``."""
    obj = load_yaml(path)
    if set(obj) - {"defaults", "experiments"}:
        raise ConfigError(f"unknown matrix keys: {sorted(set(obj) - {'defaults', 'experiments'})}")
    defaults = obj.get("defaults") or {}
    entries = obj.get("experiments") or []
    if not entries:
        raise ConfigError("matrix config lists no experiments")
    return [spec_from_dict(_deep_merge(defaults, e)) for e in entries]


# ---------------------------------------------------------------------------
# running


@dataclass
class RunRecord:
    name: str
    spec_hash: str
    input_hash: str
    log: list[dict]
    val: EvalReport
    test: EvalReport
    vc_analysis: list[VcAnalysisReport] = field(default_factory=list)
    duration_s: float = 0.0
    augmentation: str = "none"
    variant: str = "raw"

    def metrics(self) -> dict:
        """Every reported number except wall-clock time."""
        return {
            "val": self.val.to_json(),
            "test": self.test.to_json(),
            "log": self.log,
            "vc_analysis": [r.to_json() for r in self.vc_analysis],
        }

    def to_json(self) -> dict:
        d = {
            "name": self.name,
            "spec_hash": self.spec_hash,
            "input_hash": self.input_hash,
            "augmentation": self.augmentation,
            "variant": self.variant,
            "averaging": AVERAGING_NOTE,
            "duration_s": self.duration_s,
        }
        d.update(self.metrics())
        return d


class _Stage:
    """Re-raises errors with the failing stage's name attached."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or getattr(exc, "_stage", None):
            return False
        if isinstance(exc, AidError):
            new = type(exc)(f"[{self.name}] {exc}")
        elif isinstance(exc, (ValueError, KeyError, OSError)):
            new = DataError(f"[{self.name}] {exc}")
        else:
            return False
        new._stage = self.name
        raise new from exc


def corpus_hash(corpus: Corpus) -> str:
    h = hashlib.sha256()
    store, _ = encode_store(
        [(u.id, u.frames if u.frames is not None else u.embedding[None, :]) for u in corpus.utterances],
        corpus.dim)
    h.update(store)
    for u in corpus.utterances:
        h.update(f"{u.id}\t{u.speaker}\t{u.accent}\t{u.provenance.encode()}\n".encode("utf-8"))
    return h.hexdigest()[:16]


def resolve_corpus(spec: ExperimentSpec) -> Corpus:
    if spec.synthetic is not None:
        cfg = replace(spec.synthetic, seed=derive_seed(spec.seed, "corpus"), variant=spec.variant)
        return generate_synthetic(cfg)
    return ingest(spec.ingest.manifest, spec.ingest.store, spec.ingest.factors)


def prepare(spec: ExperimentSpec) -> tuple[Corpus, SplitSpec, Corpus, SplitSpec]:
    """Original corpus/split plus the (possibly) augmented training view."""
    with _Stage("corpus"):
        corpus = resolve_corpus(spec)
    with _Stage("split"):
        split = split_speaker_disjoint(corpus, spec.train_fraction, spec.val_fraction,
                                       derive_seed(spec.seed, "split"))
    with _Stage("augment"):
        aug_corpus, aug_split = corpus, split
        if spec.augmentation != "none":
            vc_cfg = replace(spec.vc, seed=derive_seed(spec.seed, "augment"))
            # stacked engines: each converts the originals; results are concatenated
            for engine in spec.augmentation.split("+"):
                converted = augment_corpus(corpus, split, vc_cfg, engine)
                merged = aug_corpus.utterances + tuple(
                    u for u in converted.utterances if u.provenance.is_converted)
                aug_corpus = Corpus.build(merged, corpus.factor_table, corpus.target_pool)
            aug_split = split.with_augmented(aug_corpus)
    return corpus, split, aug_corpus, aug_split


def evaluate(model: AidModel, corpus: Corpus, ids, n_unseen_speakers: int = 0) -> EvalReport:
    utts = corpus.subset(ids)
    if not utts:
        raise DataError("nothing to evaluate")
    pred = predict(model, stack_inputs(utts))
    true = [model.labels.accent_id(u.accent) for u in utts]
    cm = confusion(pred, true, model.n_accents, model.labels.accents)
    return macro_metrics(cm, n_unseen_speakers)


def fit(spec: ExperimentSpec, corpus: Corpus, split: SplitSpec) -> tuple[AidModel, list[dict]]:
    cfg = replace(spec.training, seed=derive_seed(spec.seed, "train"))
    model = model_for(corpus, split, cfg)
    return train(model, corpus, split, cfg)


def run_experiment(spec: ExperimentSpec, persist: bool = True) -> RunRecord:
    start = time.perf_counter()
    with _Stage("config"):
        spec.validate()
    corpus, split, aug_corpus, aug_split = prepare(spec)
    with _Stage("train"):
        model, log = fit(spec, aug_corpus, aug_split)
    with _Stage("evaluate"):
        val = evaluate(model, corpus, split.val, len(split.val_speakers))
        test = evaluate(model, corpus, split.test, len(split.unseen_speakers))
    analyses = []
    if spec.analysis_engines:
        with _Stage("analyze-vc"):
            analyses = _analyses(spec, corpus, split, model)
    record = RunRecord(spec.name, spec.spec_hash(), corpus_hash(aug_corpus), log, val, test,
                       analyses, 0.0, spec.augmentation, spec.variant)
    record.duration_s = time.perf_counter() - start
    if persist and spec.out_dir:
        with _Stage("persist"):
            out = Path(spec.out_dir)
            save_checkpoint(model, spec.training, out / "model.ckpt")
            text = json.dumps({"spec": spec.to_json(), "record": record.to_json()}, indent=1,
                              default=float)
            _atomic_write(out / "run.json", text.encode("utf-8"))
    return record


def _analyses(spec, corpus, split, model) -> list[VcAnalysisReport]:
    centroids = speaker_centroids(corpus.utterances)
    vc_cfg = replace(spec.vc, seed=derive_seed(spec.seed, "analysis"))
    return [analyze_vc(corpus, engine, vc_cfg, model, centroids, split.test)
            for engine in spec.analysis_engines]


def run_vc_analysis(spec: ExperimentSpec, model: Optional[AidModel] = None) -> list[VcAnalysisReport]:
    """Analysis protocol over the unseen test split; trains a model if none given."""
    with _Stage("config"):
        spec.validate()
    with _Stage("corpus"):
        corpus = resolve_corpus(spec)
    with _Stage("split"):
        split = split_speaker_disjoint(corpus, spec.train_fraction, spec.val_fraction,
                                       derive_seed(spec.seed, "split"))
    if model is None:
        with _Stage("train"):
            model, _ = fit(spec, corpus, split)
    engines = spec.analysis_engines or (("knn", "oracle") if corpus.factor_table is not None else ("knn",))
    with _Stage("analyze-vc"):
        return _analyses(replace(spec, analysis_engines=tuple(engines)), corpus, split, model)


def render_vc_table(reports: Sequence[VcAnalysisReport]) -> str:
    rows = [r.row() for r in reports]
    text = render_table(ANALYSIS_HEADER, rows)
    baselines = ", ".join(f"{r.engine}: {r.random_pair_aecs:.2f}" for r in reports)
    return text + f"random-pair AECS baseline ({baselines})\n"


# ---------------------------------------------------------------------------
# experiment matrix

MATRIX_COLUMNS = ("precision", "recall", "f1", "accuracy")


@dataclass
class MatrixResult:
    records: list[RunRecord]

    def rows(self) -> list[dict]:
        out = []
        for r in self.records:
            s = r.test.summary()
            out.append({"system": r.name, "augmentation": r.augmentation, "variant": r.variant,
                        **{c: s[c] for c in MATRIX_COLUMNS}})
        return out

    def render(self) -> str:
        rows = self.rows()
        best = {c: max(r[c] for r in rows) for c in MATRIX_COLUMNS}
        cells = []
        for i, r in enumerate(rows, start=1):
            vals = [f"**{r[c]:.2f}**" if r[c] == best[c] else f"{r[c]:.2f}" for c in MATRIX_COLUMNS]
            cells.append([f"#{i} {r['system']}", r["augmentation"], r["variant"], *vals])
        header = ["system", "VC aug", "embedding", "prec", "rec", "f1", "acc"]
        return render_table(header, cells)

    def to_tsv(self) -> str:
        lines = ["# unseen-speaker test metrics; " + AVERAGING_NOTE,
                 "system\taugmentation\tvariant\t" + "\t".join(MATRIX_COLUMNS)]
        for r in self.rows():
            lines.append("\t".join([r["system"], r["augmentation"], r["variant"]]
                                   + [repr(r[c]) for c in MATRIX_COLUMNS]))
        return "\n".join(lines) + "\n"


def run_matrix(specs: Sequence[ExperimentSpec], out_dir=None, persist: bool = True) -> MatrixResult:
    if not specs:
        raise ConfigError("run_matrix needs at least one spec")
    records = []
    for i, spec in enumerate(specs):
        if out_dir is not None and spec.out_dir is None:
            spec = replace(spec, out_dir=str(Path(out_dir) / f"{i:02d}_{spec.name}"))
        records.append(run_experiment(spec, persist=persist))
    result = MatrixResult(records)
    if persist and out_dir is not None:
        _atomic_write(Path(out_dir) / "matrix.tsv", result.to_tsv().encode("utf-8"))
        _atomic_write(Path(out_dir) / "matrix.txt", result.render().encode("utf-8"))
    return result


def mean_test_accuracy(spec: ExperimentSpec, seeds: Sequence[int]) -> tuple[float, list[float]]:
    accs = [run_experiment(replace(spec, seed=s), persist=False).test.accuracy for s in seeds]
    return float(np.mean(accs)), accs
