import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aidbench.classifier import (
    AidModel,
    LossBreakdown,
    Optimizer,
    TrainingConfig,
    accent_embedding,
    backward,
    forward,
    kl_to_uniform,
    load_checkpoint,
    loss,
    model_for,
    predict,
    save_checkpoint,
    stack_inputs,
    train,
)
from aidbench.core import ConfigError, DataError, LabelIndex, NumericError, softmax
from aidbench.corpus import SynthConfig, generate_synthetic, split_speaker_disjoint
from oracles import finite_difference_grads, max_relative_error, mp_loss

SMALL = (7, 6, 5)


def toy(seed, D=6, C_a=3, C_s=3, hidden=SMALL, B=4):
    labels = LabelIndex(tuple(f"a{i}" for i in range(C_a)), tuple(f"s{i}" for i in range(C_s)))
    model = AidModel(D, labels, hidden, weight_init_scale=1.5, seed=seed)
    rng = np.random.default_rng(seed)
    # non-trivial affine and batch-norm parameters so no gradient path is degenerate
    for name, p in model.params.items():
        if name.endswith(("bias", "bn_shift")):
            model.params[name] = 0.3 * rng.standard_normal(p.shape)
        elif name.endswith("bn_scale"):
            model.params[name] = 1.0 + 0.3 * rng.standard_normal(p.shape)
    x = rng.standard_normal((B, D))
    ya = rng.integers(0, C_a, B)
    ys = rng.integers(0, C_s, B)
    return model, x, ya, ys


class TestForward:
    def test_zero_input_eval_gives_head_bias(self):
        labels = LabelIndex(("a", "b", "c"), ("s", "t"))
        m = AidModel(4, labels, SMALL, seed=1).eval_mode()
        m.params["accent.bias"] = np.array([0.5, -1.0, 2.0])
        out = forward(m, np.zeros((3, 4)))
        np.testing.assert_array_equal(out.accent_logits, np.tile([0.5, -1.0, 2.0], (3, 1)))

    def test_eval_deterministic_and_batch_independent(self):
        m, x, _, _ = toy(0)
        m.eval_mode()
        a = forward(m, x)
        b = forward(m, x)
        np.testing.assert_array_equal(a.accent_logits, b.accent_logits)
        single = forward(m, x[2:3])
        np.testing.assert_allclose(single.embedding[0], a.embedding[2], atol=1e-14)

    def test_train_batchnorm_statistics(self):
        m, x, _, _ = toy(1, B=16)
        forward(m, x)
        _, layers, _ = m._cache
        for _, xhat, _, _ in layers:
            np.testing.assert_allclose(xhat.mean(axis=0), 0, atol=1e-12)
            # (z - mu)^2 / (var + eps) averages to var / (var + eps)
            assert np.all(xhat.var(axis=0) <= 1 + 1e-12) and np.all(xhat.var(axis=0) > 0.99)

    def test_running_stats_update(self):
        m, x, _, _ = toy(2, B=8)
        before = m.buffers["trunk.0.running_mean"].copy()
        forward(m, x)
        z = x @ m.params["trunk.0.weight"] + m.params["trunk.0.bias"]
        np.testing.assert_allclose(m.buffers["trunk.0.running_mean"], 0.9 * before + 0.1 * z.mean(axis=0))
        np.testing.assert_allclose(m.buffers["trunk.0.running_var"], 0.9 + 0.1 * z.var(axis=0, ddof=1))

    def test_errors(self):
        m, x, _, _ = toy(3)
        with pytest.raises(DataError, match="batch of 1"):
            forward(m, x[:1])
        with pytest.raises(DataError, match="expects"):
            forward(m, np.ones((4, 2)))

    def test_default_widths(self):
        m = AidModel(16, LabelIndex(("a", "b"), ("s", "t")))
        assert [m.params[f"trunk.{i}.weight"].shape[1] for i in range(3)] == [256, 128, 64]
        assert m.embedding_dim == 64


class TestKL:
    def test_uniform_zero(self):
        for C in (1, 2, 13, 100):
            assert kl_to_uniform(np.full(C, 1 / C)) == pytest.approx(0, abs=1e-12)

    def test_one_hot(self):
        assert kl_to_uniform([1.0, 0.0]) == pytest.approx(0.693147, abs=1e-6)
        assert kl_to_uniform(np.eye(13)[4]) == pytest.approx(2.564949, abs=1e-6)
        assert kl_to_uniform(np.eye(13)[4]) == pytest.approx(math.log(13), abs=1e-12)

    def test_entropy_identity(self):
        p = softmax(np.random.default_rng(0).standard_normal(7))
        assert kl_to_uniform(p) == pytest.approx(math.log(7) + float(np.sum(p * np.log(p))), abs=1e-12)

    def test_rejects_unnormalised(self):
        with pytest.raises(DataError):
            kl_to_uniform([0.5, 0.6])
        with pytest.raises(DataError):
            kl_to_uniform([1.5, -0.5])

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20).filter(lambda v: sum(v) > 1e-3))
    def test_bounds(self, raw):
        p = np.array(raw) / sum(raw)
        kl = kl_to_uniform(p)
        assert -1e-12 <= kl <= math.log(len(p)) + 1e-12


class TestLoss:
    def test_vanishing_terms(self):
        acc = np.array([[50.0, 0.0, 0.0], [0.0, 50.0, 0.0]])
        spk = np.zeros((2, 4))
        from aidbench.classifier import ForwardOutput
        lb = loss(ForwardOutput(None, acc, spk), [0, 1], TrainingConfig())
        assert lb.total == pytest.approx(0, abs=1e-20)
        assert lb.kl_term == 0.0

    def test_lambda_zero(self):
        m, x, ya, ys = toy(4)
        out = forward(m, x)
        lb = loss(out, ya, TrainingConfig(lam=0.0), ys)
        assert lb.total == lb.accent_ce

    def test_matches_high_precision(self):
        for seed in range(5):
            m, x, ya, ys = toy(seed)
            out = forward(m, x)
            lb = loss(out, ya, TrainingConfig(lam=0.1))
            total, ce, kl = mp_loss(out.accent_logits, out.speaker_logits, ya, 0.1)
            assert lb.total == pytest.approx(total, abs=1e-12)
            assert lb.accent_ce == pytest.approx(ce, abs=1e-12)
            assert lb.kl_term == pytest.approx(kl, abs=1e-12)
            assert abs(lb.total - (lb.accent_ce + 0.1 * lb.kl_term)) <= 1e-9

    def test_label_out_of_range(self):
        m, x, ya, _ = toy(5)
        with pytest.raises(DataError, match="out of range"):
            loss(forward(m, x), np.array([0, 1, 2, 3]), TrainingConfig())


class TestBackward:
    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        m, x, ya, ys = toy(seed)
        cfg = TrainingConfig(lam=0.7)
        forward(m, x)
        gm, gs = backward(m, x, ya, ys, cfg)
        assert set(gm) == set(m.main_param_names()) and set(gs) == set(m.speaker_param_names())
        assert max_relative_error(gm, finite_difference_grads(m, x, ya, ys, cfg, list(gm), "total")) <= 1e-4
        assert max_relative_error(gs, finite_difference_grads(m, x, ya, ys, cfg, list(gs), "speaker")) <= 1e-4

    def test_full_width_sampled_entries(self):
        m, x, ya, ys = toy(9, D=8, hidden=(256, 128, 64), B=6)
        cfg = TrainingConfig(lam=0.1)
        forward(m, x)
        gm, _ = backward(m, x, ya, ys, cfg)
        rng = np.random.default_rng(0)
        h = 1e-5
        from oracles import _objective
        for name in ("trunk.0.weight", "trunk.1.bn_scale", "trunk.2.weight", "accent.weight"):
            p = m.params[name]
            for _ in range(5):
                idx = tuple(int(rng.integers(0, s)) for s in p.shape)
                orig = p[idx]
                p[idx] = orig + h
                up = _objective(m, x, ya, ys, cfg, "total")
                p[idx] = orig - h
                down = _objective(m, x, ya, ys, cfg, "total")
                p[idx] = orig
                num = (up - down) / (2 * h)
                assert abs(num - gm[name][idx]) <= 1e-4 * max(abs(num), abs(gm[name][idx]), 1e-6)

    def test_lambda_zero_removes_speaker_path(self):
        m, x, ya, ys = toy(1)
        forward(m, x)
        g0, _ = backward(m, x, ya, ys, TrainingConfig(lam=0.0))
        m.params["speaker.weight"] = m.params["speaker.weight"] * 3.0 + 1.0
        forward(m, x)
        g1, _ = backward(m, x, ya, ys, TrainingConfig(lam=0.0))
        for k in g0:
            np.testing.assert_array_equal(g0[k], g1[k])

    def test_lambda_linearity(self):
        m, x, ya, ys = toy(2)
        forward(m, x)
        g = {lam: backward(m, x, ya, ys, TrainingConfig(lam=lam))[0] for lam in (0.0, 0.25, 0.5)}
        for k in g[0.0]:
            np.testing.assert_allclose(g[0.5][k] - g[0.0][k], 2 * (g[0.25][k] - g[0.0][k]), atol=1e-12)

    def test_stale_forward(self):
        m, x, ya, ys = toy(3)
        with pytest.raises(DataError, match="forward"):
            backward(m, x, ya, ys, TrainingConfig())
        forward(m, x)
        with pytest.raises(DataError, match="stale"):
            backward(m, x + 1, ya, ys, TrainingConfig())

    def test_speaker_head_isolation(self):
        m, x, ya, ys = toy(4)
        forward(m, x)
        _, gs = backward(m, x, ya, ys, TrainingConfig())
        # fresh copy so the train-mode running statistics do not differ
        fresh, *_ = toy(4)
        before = forward(fresh.copy().eval_mode(), x).accent_logits
        Optimizer("sgd", 0.5).step(fresh.params, gs)
        assert any(np.any(g != 0) for g in gs.values())
        np.testing.assert_array_equal(forward(fresh.eval_mode(), x).accent_logits, before)


@pytest.fixture(scope="module")
def separable():
    cfg = SynthConfig(n_accents=4, speakers_per_accent=5, utterances_per_speaker=6, frame_dim=12,
                      accent_scale=3.0, speaker_scale=0.5, noise_scale=0.1, seed=5)
    corpus = generate_synthetic(cfg)
    return corpus, split_speaker_disjoint(corpus, 0.6, 0.2, 5)


FAST = TrainingConfig(epochs=15, lr_accent=1e-2, lr_speaker=1e-3, optimizer="adam", batch_size=16,
                      hidden_sizes=(32, 16, 8), seed=3)


class TestTrain:
    def test_zero_epochs(self, separable):
        corpus, split = separable
        cfg = replace(FAST, epochs=0)
        m = model_for(corpus, split, cfg)
        before = {k: v.copy() for k, v in m.params.items()}
        m2, log = train(m, corpus, split, cfg)
        assert log == [] and m2.mode == "eval"
        for k in before:
            np.testing.assert_array_equal(before[k], m2.params[k])

    def test_deterministic_log(self, separable):
        corpus, split = separable
        logs = [train(model_for(corpus, split, FAST), corpus, split, FAST)[1] for _ in range(2)]
        assert logs[0] == logs[1]
        assert all(abs(e["total"] - (e["accent_ce"] + FAST.lam * e["kl_term"])) < 1e-9 for e in logs[0])

    def test_separable_unseen_accuracy(self, separable):
        corpus, split = separable
        m, _ = train(model_for(corpus, split, FAST), corpus, split, FAST)
        utts = corpus.subset(split.test)
        acc = np.mean(predict(m, stack_inputs(utts)) == [m.labels.accent_id(u.accent) for u in utts])
        assert acc >= 0.9

    def test_reference_defaults(self):
        cfg = TrainingConfig()
        assert (cfg.epochs, cfg.lr_accent, cfg.lr_speaker, cfg.lam) == (10, 1e-4, 1e-5, 0.1)
        assert cfg.hidden_sizes == (256, 128, 64)

    def test_config_validation(self):
        for bad in (dict(batch_size=1), dict(lam=-1.0), dict(lr_accent=0.0), dict(optimizer="lbfgs")):
            with pytest.raises(ConfigError):
                replace(TrainingConfig(), **bad).validate()
        with pytest.raises(ConfigError):
            TrainingConfig.from_json({"nope": 1})
        assert TrainingConfig.from_json({"lambda": 0.3}).lam == 0.3

    def test_nan_aborts_with_batch_id(self, separable):
        corpus, split = separable
        m = model_for(corpus, split, FAST)
        m.params["accent.weight"][0, 0] = np.inf
        with pytest.raises((NumericError,), match="batch 0"):
            train(m, corpus, split, FAST)

    def test_empty_train(self, separable):
        corpus, split = separable
        with pytest.raises(DataError):
            train(model_for(corpus, split, FAST), corpus, replace(split, train=frozenset()), FAST)


class TestEmbedding:
    def test_dimension_and_cross_path(self, separable):
        corpus, split = separable
        m = AidModel(corpus.dim, corpus.label_index).eval_mode()
        u = corpus.utterances[0]
        e = accent_embedding(m, u)
        assert e.shape == (64,)
        np.testing.assert_array_equal(e, forward(m, u.vector()[None, :]).embedding[0])
        np.testing.assert_array_equal(e, accent_embedding(m, u))

    def test_needs_eval_mode(self, separable):
        corpus, _ = separable
        with pytest.raises(DataError):
            accent_embedding(AidModel(corpus.dim, corpus.label_index), corpus.utterances[0])


class TestCheckpoint:
    def test_roundtrip_bytes(self, tmp_path, separable):
        corpus, split = separable
        m, _ = train(model_for(corpus, split, FAST), corpus, split, FAST)
        data = save_checkpoint(m, FAST, tmp_path / "m.ckpt")
        m2, cfg2 = load_checkpoint(tmp_path / "m.ckpt")
        assert cfg2 == FAST and m2.labels == m.labels and m2.mode == "eval" and m2.trained
        assert save_checkpoint(m2, cfg2, None) == data
        x = stack_inputs(corpus.subset(split.test))
        np.testing.assert_allclose(forward(m2, x).accent_logits, forward(m, x).accent_logits, rtol=1e-4, atol=1e-4)

    def test_rejects_garbage(self):
        with pytest.raises(DataError):
            load_checkpoint(b"nope" + bytes(20))


class TestOptimizer:
    def test_sgd_step(self):
        p = {"w": np.array([1.0, 2.0])}
        Optimizer("sgd", 0.1).step(p, {"w": np.array([1.0, -1.0])})
        np.testing.assert_allclose(p["w"], [0.9, 2.1])

    def test_adam_first_step_is_lr_sign(self):
        p = {"w": np.array([1.0, 2.0])}
        Optimizer("adam", 0.01).step(p, {"w": np.array([3.0, -0.5])})
        np.testing.assert_allclose(p["w"], [0.99, 2.01], atol=1e-8)
