import json

import pytest

from aidbench.cli import main
from aidbench.corpus import read_corpus

SYNTH = ("n_accents: 3\nspeakers_per_accent: 4\nutterances_per_speaker: 3\nframe_dim: 6\n"
         "t_min: 3\nt_max: 5\naccent_scale: 3.0\nspeaker_scale: 0.5\nnoise_scale: 0.1\npool_speakers: 4\n")
TRAIN = "training:\n  epochs: 3\n  optimizer: adam\n  lr_accent: 0.01\n  lr_speaker: 0.001\n" \
        "  batch_size: 8\n  hidden_sizes: [8, 8, 4]\n"


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "synth.yaml").write_text(SYNTH)
    (tmp_path / "train.yaml").write_text(TRAIN)
    indented = "".join("      " + line + "\n" for line in SYNTH.splitlines())
    (tmp_path / "exp.yaml").write_text("name: cli\ncorpus:\n  synthetic:\n" + indented + TRAIN
                                       + "analysis:\n  engines: [oracle]\n")
    return tmp_path


def test_step_by_step_pipeline(workdir, capsys):
    d = workdir
    assert main(["gen-corpus", "--config", str(d / "synth.yaml"), "--seed", "3", "--out", str(d / "c")]) == 0
    assert main(["ingest", "--manifest", str(d / "c" / "manifest.tsv"), "--store", str(d / "c" / "features.aidf"),
                 "--factors", str(d / "c" / "factors.json")]) == 0
    assert main(["split", "--corpus", str(d / "c"), "--seed", "1", "--out", str(d / "split.json"),
                 "--train-fraction", "0.5", "--val-fraction", "0.25"]) == 0
    assert main(["augment", "--corpus", str(d / "c"), "--split", str(d / "split.json"), "--engine", "oracle",
                 "--out", str(d / "aug")]) == 0
    assert any(u.provenance.is_converted for u in read_corpus(d / "aug").utterances)
    assert main(["train", "--corpus", str(d / "aug"), "--split", str(d / "aug" / "split.json"),
                 "--config", str(d / "train.yaml"), "--out", str(d / "m")]) == 0
    assert len(json.loads((d / "m" / "train_log.json").read_text())) == 3
    capsys.readouterr()
    assert main(["eval", "--model", str(d / "m" / "model.ckpt"), "--corpus", str(d / "c"),
                 "--split", str(d / "split.json"), "--out", str(d / "eval.tsv")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# config_hash:") and "macro\t" in out
    assert (d / "eval.tsv").read_text() == out


def test_run_and_analyze(workdir, capsys):
    d = workdir
    assert main(["run", "--config", str(d / "exp.yaml"), "--out", str(d / "run")]) == 0
    assert "f1=" in capsys.readouterr().out
    assert (d / "run" / "run.json").exists()
    assert main(["analyze-vc", "--config", str(d / "exp.yaml"), "--out", str(d / "vc")]) == 0
    assert "oracle" in (d / "vc" / "vc_analysis.txt").read_text()


def test_run_matrix(workdir, capsys):
    d = workdir
    indented = "".join("      " + line + "\n" for line in SYNTH.splitlines())
    (d / "matrix.yaml").write_text(
        "defaults:\n  corpus:\n    synthetic:\n" + indented
        + "".join("  " + line + "\n" for line in TRAIN.splitlines())
        + "experiments:\n  - name: base\n  - name: aug\n    augmentation: oracle\n")
    assert main(["run-matrix", "--config", str(d / "matrix.yaml"), "--out", str(d / "mx")]) == 0
    assert "#2 aug" in capsys.readouterr().out
    assert (d / "mx" / "matrix.tsv").exists()


def test_exit_codes(workdir, capsys):
    d = workdir
    (d / "bad.yaml").write_text("n_acents: 3\n")
    assert main(["gen-corpus", "--config", str(d / "bad.yaml"), "--out", str(d / "x")]) == 2
    assert main(["run"]) == 2
    assert main(["ingest", "--manifest", str(d / "nope.tsv"), "--store", str(d / "nope.bin")]) == 3
    (d / "m.tsv").write_text("not a header\n")
    (d / "s.bin").write_bytes(b"")
    assert main(["ingest", "--manifest", str(d / "m.tsv"), "--store", str(d / "s.bin")]) == 3
    assert "error:" in capsys.readouterr().err
