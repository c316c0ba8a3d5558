"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .classifier import TrainingConfig, load_checkpoint, model_for, save_checkpoint, train
from .core import AidError, ConfigError, DataError
from .corpus import (
    SplitSpec,
    SynthConfig,
    _atomic_write,
    class_counts,
    generate_synthetic,
    ingest,
    read_corpus,
    split_speaker_disjoint,
    write_corpus,
)
from .experiments import (
    evaluate,
    load_matrix,
    load_spec,
    load_yaml,
    render_vc_table,
    run_experiment,
    run_matrix,
    run_vc_analysis,
    _build,
)
from .metrics import render_eval_tsv
from .vc import VcConfig, augment_corpus

log = logging.getLogger("aidbench")


def _require(value, flag):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


def _synth_config(args) -> SynthConfig:
    obj = load_yaml(args.config) if args.config else {}
    # accept either a bare synthetic section or a full experiment file
    obj = (obj.get("corpus") or {}).get("synthetic", obj) if "corpus" in obj else obj
    cfg = _build(SynthConfig, obj, "synthetic config")
    return replace(cfg, seed=args.seed) if args.seed is not None else cfg


def cmd_gen_corpus(args):
    corpus = generate_synthetic(_synth_config(args))
    write_corpus(corpus, _require(args.out, "--out"))
    print(f"wrote {len(corpus)} utterances, {len(corpus.speakers())} speakers to {args.out}")


def cmd_ingest(args):
    corpus = ingest(args.manifest, args.store, args.factors)
    print(f"ingested {len(corpus)} utterances: {len(corpus.label_index.accents)} accents, "
          f"{len(corpus.label_index.speakers)} speakers, dim {corpus.dim}")
    if args.out:
        write_corpus(corpus, args.out)


def cmd_split(args):
    corpus = read_corpus(args.corpus)
    split = split_speaker_disjoint(corpus, args.train_fraction, args.val_fraction, args.seed or 0)
    split.save(_require(args.out, "--out"))
    counts = class_counts(corpus, split)
    for name, c in counts.items():
        print(f"{name}: {sum(c['accent'].values())} utterances, {len(c['speaker'])} speakers")


def cmd_augment(args):
    corpus = read_corpus(args.corpus)
    split = SplitSpec.load(args.split)
    cfg = VcConfig(k=args.k, distance=args.distance, versions_per_utterance=args.versions,
                   target_pool=tuple(args.target_pool or ()), seed=args.seed or 0)
    augmented = augment_corpus(corpus, split, cfg, args.engine)
    out = Path(_require(args.out, "--out"))
    write_corpus(augmented, out)
    split.with_augmented(augmented).save(out / "split.json")
    print(f"augmented train split: {len(split.train)} -> {len(split.with_augmented(augmented).train)}")


def cmd_train(args):
    corpus = read_corpus(args.corpus)
    split = SplitSpec.load(args.split)
    obj = load_yaml(args.config) if args.config else {}
    cfg = TrainingConfig.from_json(obj.get("training", obj))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    model, epochs = train(model_for(corpus, split, cfg), corpus, split, cfg)
    out = Path(_require(args.out, "--out"))
    save_checkpoint(model, cfg, out / "model.ckpt")
    _atomic_write(out / "train_log.json", json.dumps(epochs, indent=1).encode("utf-8"))
    if epochs:
        print(json.dumps(epochs[-1]))


def cmd_eval(args):
    model, cfg = load_checkpoint(args.model)
    model.eval_mode()
    corpus = read_corpus(args.corpus)
    split = SplitSpec.load(args.split)
    ids = getattr(split, args.subset)
    n_spk = len(split.unseen_speakers if args.subset == "test" else split.val_speakers)
    report = evaluate(model, corpus, ids, n_spk)
    text = render_eval_tsv(report, cfg.to_json() if cfg else None, cfg.seed if cfg else 0)
    print(text, end="")
    if args.out:
        _atomic_write(Path(args.out), text.encode("utf-8"))


def _load_spec(args):
    spec = load_spec(_require(args.config, "--config"))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.out:
        spec = replace(spec, out_dir=args.out)
    return spec


def cmd_analyze_vc(args):
    spec = _load_spec(args)
    reports = run_vc_analysis(spec)
    text = render_vc_table(reports)
    print(text, end="")
    if spec.out_dir:
        out = Path(spec.out_dir)
        _atomic_write(out / "vc_analysis.txt", text.encode("utf-8"))
        _atomic_write(out / "vc_analysis.json",
                      json.dumps([r.to_json() for r in reports], indent=1).encode("utf-8"))


def cmd_run(args):
    record = run_experiment(_load_spec(args))
    s = record.test.summary()
    print("\t".join(f"{k}={s[k]:.4f}" for k in ("precision", "recall", "f1", "accuracy")))


def cmd_run_matrix(args):
    specs = load_matrix(_require(args.config, "--config"))
    if args.seed is not None:
        specs = [replace(s, seed=args.seed) for s in specs]
    result = run_matrix(specs, args.out)
    print(result.render(), end="")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None)
    common.add_argument("--config", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="aidbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="generate a synthetic corpus")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("ingest", parents=[common], help="validate a manifest + feature store")
    p.add_argument("--manifest", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--factors", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", parents=[common], help="speaker-disjoint train/val/test split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--train-fraction", type=float, default=0.6)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("augment", parents=[common], help="add voice-converted training copies")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--engine", choices=["knn", "oracle"], default="knn")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--distance", choices=["cosine", "euclidean"], default="cosine")
    p.add_argument("--versions", type=int, default=2)
    p.add_argument("--target-pool", nargs="*", default=None)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", parents=[common], help="train the accent classifier")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--subset", choices=["train", "val", "test"], default="test")
    p.set_defaults(func=cmd_eval)

    for name, func, help_ in (("analyze-vc", cmd_analyze_vc, "timbre/accent analysis of VC engines"),
                              ("run", cmd_run, "run one experiment spec"),
                              ("run-matrix", cmd_run_matrix, "run an experiment matrix")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except AidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
