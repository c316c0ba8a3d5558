import json
from dataclasses import replace

import pytest

from aidbench.classifier import TrainingConfig, load_checkpoint
from aidbench.core import ConfigError, DataError
from aidbench.corpus import SynthConfig
from aidbench.experiments import (
    ExperimentSpec,
    load_matrix,
    load_spec,
    prepare,
    run_experiment,
    run_matrix,
    run_vc_analysis,
    render_vc_table,
    spec_from_dict,
)

SEPARABLE = SynthConfig(n_accents=3, speakers_per_accent=5, utterances_per_speaker=4, frame_dim=8,
                        t_min=4, t_max=8, accent_scale=3.0, speaker_scale=0.5, noise_scale=0.1,
                        pool_speakers=6)
QUICK = TrainingConfig(epochs=12, lr_accent=1e-2, lr_speaker=1e-3, optimizer="adam", batch_size=8,
                       hidden_sizes=(16, 8, 8))
SPEC = ExperimentSpec(name="sep", synthetic=SEPARABLE, training=QUICK, seed=1)


class TestRunExperiment:
    def test_separable_reaches_high_accuracy(self):
        rec = run_experiment(SPEC, persist=False)
        assert rec.test.accuracy >= 0.9
        assert rec.test.n_unseen_speakers > 0
        assert len(rec.log) == QUICK.epochs

    def test_deterministic(self):
        a = run_experiment(SPEC, persist=False)
        b = run_experiment(SPEC, persist=False)
        assert a.metrics() == b.metrics()
        assert a.input_hash == b.input_hash and a.spec_hash == b.spec_hash

    def test_seed_changes_run(self):
        a = run_experiment(SPEC, persist=False)
        b = run_experiment(replace(SPEC, seed=2), persist=False)
        assert a.input_hash != b.input_hash

    def test_persist(self, tmp_path):
        rec = run_experiment(replace(SPEC, out_dir=str(tmp_path)))
        saved = json.loads((tmp_path / "run.json").read_text())
        assert saved["record"]["test"]["accuracy"] == rec.test.accuracy
        model, cfg = load_checkpoint(tmp_path / "model.ckpt")
        assert cfg == QUICK and model.trained

    def test_augmentation_adds_only_train_copies(self):
        spec = replace(SPEC, augmentation="knn+oracle")
        corpus, split, aug, aug_split = prepare(spec)
        added = set(aug_split.train) - set(split.train)
        assert len(added) == 2 * 2 * len(split.train)
        assert aug_split.test == split.test and aug_split.val == split.val
        engines = {aug[i].id.split("~")[1].rstrip("0123456789") for i in added}
        assert engines == {"knn", "oracle"}

    def test_stage_tagged_errors(self):
        bad = replace(SPEC, synthetic=replace(SEPARABLE, speakers_per_accent=2))
        with pytest.raises(DataError, match=r"^\[split\]"):
            run_experiment(bad, persist=False)
        with pytest.raises(ConfigError, match=r"^\[config\]"):
            run_experiment(replace(SPEC, augmentation="rvc"), persist=False)


class TestMatrix:
    def test_six_systems(self, tmp_path):
        specs = [replace(SPEC, name=f"{aug}-l{lam}", augmentation=aug, training=replace(QUICK, lam=lam))
                 for aug in ("none", "knn", "oracle") for lam in (0.0, 0.1)]
        result = run_matrix(specs, tmp_path)
        assert [r["system"] for r in result.rows()] == [s.name for s in specs]
        for rec, spec in zip(result.records, specs):
            assert rec.test.accuracy == run_experiment(spec, persist=False).test.accuracy
        table = result.render()
        assert "**" in table and table.count("\n") == 8
        assert (tmp_path / "matrix.tsv").read_text() == result.to_tsv()
        assert (tmp_path / "03_knn-l0.1" / "run.json").exists()

    def test_empty(self):
        with pytest.raises(ConfigError):
            run_matrix([])


class TestVcAnalysis:
    def test_oracle_preserves_accent(self):
        knn, oracle = run_vc_analysis(replace(SPEC, analysis_engines=("knn", "oracle")))
        assert oracle.accent_accuracy >= knn.accent_accuracy
        assert oracle.aecs.mean > oracle.random_pair_aecs
        assert "random-pair AECS baseline" in render_vc_table([knn, oracle])

    def test_speaker_dominated_moves_toward_target(self):
        corpus = replace(SEPARABLE, accent_scale=1.0, speaker_scale=2.0)
        (oracle,) = run_vc_analysis(replace(SPEC, synthetic=corpus, analysis_engines=("oracle",)))
        assert oracle.sim_target.mean > oracle.sim_source.mean


class TestConfigFiles:
    def test_yaml_roundtrip(self, tmp_path):
        p = tmp_path / "e.yaml"
        p.write_text(
            "name: demo\nseed: 4\ncorpus:\n  synthetic:\n    n_accents: 3\n    frame_dim: 8\n"
            "augmentation: oracle\ntraining:\n  epochs: 2\n  lambda: 0.2\n  hidden_sizes: [8, 8, 4]\n"
            "split:\n  train_fraction: 0.5\nanalysis:\n  engines: [oracle]\n")
        spec = load_spec(p)
        assert spec.seed == 4 and spec.training.lam == 0.2 and spec.training.hidden_sizes == (8, 8, 4)
        assert spec.synthetic.n_accents == 3 and spec.train_fraction == 0.5
        assert spec.analysis_engines == ("oracle",)

    @pytest.mark.parametrize("obj", [
        {"nme": "x"},
        {"corpus": {"synthetic": {"n_acents": 3}}},
        {"training": {"epoch": 3}},
        {"split": {"test_fraction": 0.2}},
        {"corpus": {"audio": {}}},
    ])
    def test_unknown_keys(self, obj):
        with pytest.raises(ConfigError):
            spec_from_dict(obj)

    def test_matrix_defaults_merge(self, tmp_path):
        p = tmp_path / "m.yaml"
        p.write_text("defaults:\n  corpus:\n    synthetic:\n      frame_dim: 8\n  training:\n    epochs: 3\n"
                     "experiments:\n  - name: a\n  - name: b\n    training:\n      lambda: 0.0\n")
        a, b = load_matrix(p)
        assert a.training.epochs == b.training.epochs == 3
        assert a.training.lam == 0.1 and b.training.lam == 0.0
        assert b.synthetic.frame_dim == 8

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_spec(tmp_path / "absent.yaml")
