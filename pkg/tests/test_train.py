from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import da3.train as train_mod
from da3.adaptor import attach_adaptors
from da3.data import TaskSpec, linearly_separable, make_domain, two_domain_task
from da3.errors import ConfigError, InvariantViolation, NumericError
from da3.layers import build_backbone, evaluate_logits, init_missing, init_params, set_strategy
from da3.profiler import profile
from da3.train import (PRESETS, SGD, Adam, Dataset, RunConfig, adapt_domain, cosine_lr, evaluate,
                       frozen_names, gradcheck, preset, step_decay_lr, train)


def tiny(num_classes=2, hw=8):
    return build_backbone("tiny-cnn", num_classes, input_shape=(3, hw, hw))


class TestSchedules:
    def test_cosine_anchors(self):
        assert cosine_lr(0, 100, 1e-3) == 1e-3
        assert cosine_lr(100, 100, 1e-3) == 0.0
        assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, abs=1e-18)

    def test_cosine_errors(self):
        with pytest.raises(ConfigError):
            cosine_lr(0, 0, 1e-3)
        with pytest.raises(ConfigError):
            cosine_lr(11, 10, 1e-3)

    @pytest.mark.parametrize("epoch,lr", [(10, 0.1), (85, 0.001), (120, 1e-4), (40, 0.01)])
    def test_step_anchors(self, epoch, lr):
        assert step_decay_lr(epoch) == pytest.approx(lr, rel=1e-12)

    def test_unsorted_milestones(self):
        with pytest.raises(ConfigError):
            step_decay_lr(5, milestones=[80, 40])

    @settings(max_examples=200, deadline=None)
    @given(total=st.integers(1, 10_000), frac=st.floats(0, 1), lr0=st.floats(1e-6, 1.0))
    def test_cosine_closed_form(self, total, frac, lr0):
        step = round(frac * total)
        want = 0.5 * lr0 * (1 + math.cos(math.pi * step / total))
        assert abs(cosine_lr(step, total, lr0) - want) <= 1e-12

    @settings(max_examples=200, deadline=None)
    @given(epoch=st.integers(0, 200))
    def test_step_closed_form(self, epoch):
        passed = sum(m <= epoch for m in (40, 80, 100))
        assert abs(step_decay_lr(epoch) - 0.1 * 0.1 ** passed) <= 1e-12


class TestOptimizers:
    def test_sgd_momentum(self):
        p = {"w": np.array([1.0])}
        opt = SGD(lr=0.1, momentum=0.9)
        opt.step(p, {"w": np.array([1.0])})
        opt.step(p, {"w": np.array([1.0])})
        np.testing.assert_allclose(p["w"], 1 - 0.1 - 0.1 * 1.9)

    def test_adam_first_step_is_signed_lr(self, rng):
        g = rng.normal(size=5)
        p = {"w": np.zeros(5)}
        Adam(lr=1e-3).step(p, {"w": g})
        np.testing.assert_allclose(p["w"], -1e-3 * np.sign(g), rtol=1e-6)

    def test_state_shapes(self, rng):
        opt = Adam()
        p = {"a": np.zeros((2, 3)), "b": np.zeros(4)}
        opt.step(p, {k: np.ones_like(v) for k, v in p.items()})
        assert all(opt.state[k][0].shape == p[k].shape for k in p)


class TestRunConfig:
    def test_round_trip(self, tmp_path):
        cfg = RunConfig(seed=3, strategy="da3", beta=2.5, milestones=[1, 2], data={"n": 4})
        cfg.save(tmp_path / "c.json")
        assert RunConfig.load(tmp_path / "c.json") == cfg

    @pytest.mark.parametrize("bad", [dict(strategy="lora"), dict(optimizer="rmsprop"),
                                     dict(lr=0), dict(batch_size=0), dict(milestones=[5, 1]),
                                     dict(dtype="f16"), dict(policy="loose")])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            RunConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"seed": 1, "momentun": 0.9})

    def test_presets(self):
        assert preset("adam-cosine-30-iterations").iterations == 30
        assert preset("adam-cosine-30-epochs").epochs == 30
        assert set(PRESETS) >= {"adam-cosine-30-epochs", "adam-cosine-30-iterations"}
        with pytest.raises(ConfigError):
            preset("nope")


class TestTrain:
    def test_bias_only_loss_strictly_decreases(self):
        data = linearly_separable(64, 2, 8, seed=0)
        g = set_strategy(tiny(), "bias-only")
        cfg = RunConfig(strategy="bias-only", epochs=20, batch_size=64, optimizer="sgd", lr=0.05,
                        momentum=0.0, schedule="constant")
        _, metrics = train(g, init_params(g, 0), data, cfg)
        losses = [m["loss"] for m in metrics if m["split"] == "train"]
        assert len(losses) == 20
        assert all(b < a for a, b in zip(losses, losses[1:]))

    @pytest.mark.slow
    def test_full_tiny_cnn_fits_two_classes(self):
        spec = TaskSpec(num_classes=2, image_size=16)
        x, y = make_domain("A", 128, spec, seed=0)
        data = Dataset(x, y, x[:0], y[:0])
        g = set_strategy(build_backbone("tiny-cnn", 2, input_shape=(3, 16, 16)), "full")
        cfg = RunConfig(epochs=50, batch_size=16, lr=3e-3, bn_mode="batch", audit=False)
        params, _ = train(g, init_params(g, 0), data, cfg)
        _, acc = evaluate(g, params, x, y)
        assert acc >= 0.95

    def test_audit_matches_profiler(self):
        data = linearly_separable(20, 2, 8)
        g = set_strategy(attach_adaptors(tiny()), "da3")
        cfg = RunConfig(strategy="da3", epochs=2, batch_size=8)
        _, metrics = train(g, init_missing(g, init_params(g)), data, cfg)
        want = profile(g, n=8, resolution=(8, 8)).total_act
        assert [m["saved_activation_bytes"] for m in metrics if m["split"] == "train"] == \
            [want, want]

    def test_audit_mismatch_raises(self, monkeypatch):
        class Wrong:
            total_act = 1

        monkeypatch.setattr(train_mod, "profile", lambda *a, **k: Wrong())
        g = set_strategy(tiny(), "full")
        with pytest.raises(InvariantViolation):
            train(g, init_params(g), linearly_separable(8, 2, 8), RunConfig(epochs=1))

    def test_nan_aborts_with_diagnostic(self):
        g = set_strategy(tiny(), "full")
        params = init_params(g)
        params["block1.conv1.weight"][0, 0, 0, 0] = np.nan
        with pytest.raises(NumericError, match=r"step 0.*lr=.*block1\.conv1"):
            train(g, params, linearly_separable(8, 2, 8), RunConfig(epochs=1))

    def test_iterations_budget(self):
        g = set_strategy(tiny(), "bias-only")
        cfg = RunConfig(strategy="bias-only", iterations=3, batch_size=8)
        _, metrics = train(g, init_params(g), linearly_separable(16, 2, 8), cfg)
        assert [m["epoch"] for m in metrics if m["split"] == "train"] == [0, 1]

    def test_reproducible(self, tmp_path):
        src, tgt = two_domain_task(32, 16, TaskSpec(image_size=8), seed=1)
        g = tiny(4)
        pre = init_params(g, 1)
        cfg = RunConfig(seed=7, strategy="da3", epochs=2, batch_size=8)
        runs = []
        for i in range(2):
            _, p, m = adapt_domain(g, pre, tgt, cfg, metrics_path=tmp_path / f"m{i}.csv")
            runs.append((p, m))
        (p1, m1), (p2, m2) = runs
        assert m1 == m2
        assert all(p1[k].tobytes() == p2[k].tobytes() for k in p1)
        assert (tmp_path / "m0.csv").read_bytes() == (tmp_path / "m1.csv").read_bytes()


class TestAdapt:
    @pytest.fixture(scope="class")
    @staticmethod
    def setup():
        src, tgt = two_domain_task(32, 16, TaskSpec(image_size=8), seed=0)
        g = set_strategy(tiny(4), "full")
        pre, _ = train(g, init_params(g, 0), src, RunConfig(epochs=1, bn_mode="batch"))
        return g, pre, tgt

    @pytest.mark.parametrize("strategy", ["full", "bn-only", "bias-only", "mask", "da3",
                                          "adaptor-only"])
    def test_frozen_bitwise(self, setup, strategy):
        g, pre, tgt = setup
        epochs = 10 if strategy == "da3" else 2
        graph, params, _ = adapt_domain(g, pre, tgt, RunConfig(strategy=strategy, epochs=epochs))
        frozen = [k for k in frozen_names(graph, params) if k in pre]
        assert all(params[k].tobytes() == pre[k].tobytes() for k in frozen)
        if strategy == "da3":
            assert {"block1.conv1.weight", "stem.conv1.weight"} <= set(frozen)
        changed = [k for k in graph.trainable_params() if k in pre and
                   params[k].tobytes() != pre[k].tobytes()]
        assert changed

    def test_drift_detected(self, setup, monkeypatch):
        g, pre, tgt = setup
        real = train_mod.train

        def leaky(graph, params, *a, **k):
            out, m = real(graph, params, *a, **k)
            out["stem.conv1.weight"] = out["stem.conv1.weight"] + 1
            return out, m

        monkeypatch.setattr(train_mod, "train", leaky)
        with pytest.raises(InvariantViolation):
            adapt_domain(g, pre, tgt, RunConfig(strategy="bias-only", epochs=1))

    @pytest.mark.parametrize("strategy", ["full", "bias-only", "bn-only"])
    def test_zero_epochs(self, setup, strategy):
        g, pre, tgt = setup
        _, params, metrics = adapt_domain(g, pre, tgt, RunConfig(strategy=strategy, epochs=0))
        _, acc = evaluate(g, pre, tgt.x_test, tgt.y_test)
        assert metrics[-1]["accuracy"] == acc
        assert all(params[k].tobytes() == pre[k].tobytes() for k in pre)

    def test_open_zeroed_adaptor_reproduces_pretrained_logits(self, setup):
        g, pre, tgt = setup
        graph, params = train_mod.prepare_adaptation(g, pre, RunConfig(strategy="da3"))
        for a in graph.adaptors():
            for k in a.param_shapes():
                params[k] = np.zeros_like(params[k])
            params[f"{a.name}.spatial.bias"][:] = 10.0
        want = evaluate_logits(g, pre, tgt.x_test)
        got = evaluate_logits(graph, params, tgt.x_test)
        assert got.tobytes() == want.tobytes()


class TestGradcheck:
    @pytest.fixture
    def batch(self, rng):
        return rng.normal(size=(3, 3, 8, 8)), np.array([0, 1, 1])

    @pytest.mark.parametrize("strategy", ["full", "bias-only", "bn-only", "mask", "da3",
                                          "adaptor-only"])
    def test_passes(self, batch, strategy):
        g = tiny()
        if strategy in ("da3", "adaptor-only"):
            g = attach_adaptors(g, beta=1.0)
        g = set_strategy(g, strategy)
        params = init_missing(g, init_params(g, 1))
        report = gradcheck(g, params, *batch, n_probes=20, seed=2)
        assert report.passed, report.to_dict()
        if strategy == "da3":
            assert any(".adaptor." in p.param for p in report.probes) or \
                gradcheck(g, params, *batch, n_probes=40, seed=5).passed

    def test_no_trainables_reports_fail(self, batch):
        g = tiny()
        report = gradcheck(g, init_params(g), *batch)
        assert not report.passed and report.probes == []
