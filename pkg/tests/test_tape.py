from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from da3.adaptor import attach_adaptors
from da3.errors import InvariantViolation
from da3.layers import LayerSpec, build_backbone, forward_record, init_missing, init_params, set_strategy
from da3.tape import FROZEN, SavedEntry, Tape, Trainability, backward, detach, required_saves, unique_bytes

from conftest import central_diff


def lin(c_in=16, c_out=8, mask=False, t=FROZEN):
    return LayerSpec("fc", "linear", c_in=c_in, c_out=c_out, bias=True, mask_enabled=mask,
                     trainability=t)


class TestRequiredSaves:
    def test_weight_trainable_saves_input(self):
        saves = required_saves(lin(), Trainability(weight=True), in_shape=(4, 16, 8, 8))
        assert [(s.tensor, s.reason) for s in saves] == [("input", "weight-grad")]
        assert saves[0].nbytes == 4 * 16 * 8 * 8 * 4

    def test_bias_only_saves_nothing(self):
        assert required_saves(lin(), Trainability(bias=True), in_shape=(4, 16)) == []

    def test_mask_saves_input_and_weight(self):
        saves = required_saves(lin(mask=True), Trainability(mask=True), in_shape=(4, 16))
        assert {(s.tensor, s.reason) for s in saves} == {("input", "mask-grad"),
                                                         ("weight", "mask-grad")}
        assert sum(s.nbytes for s in saves) == (4 * 16 + 16 * 8) * 4

    def test_bn(self):
        bn = LayerSpec("bn", "batchnorm2d", c_in=3, c_out=3)
        assert required_saves(bn, Trainability(bn_shift=True), in_shape=(2, 3, 4, 4)) == []
        (s,) = required_saves(bn, Trainability(bn_scale=True), in_shape=(2, 3, 4, 4))
        assert s.reason == "bn-scale-grad" and s.nbytes == 2 * 3 * 16 * 4

    def test_passthrough_policies(self):
        relu, sig = LayerSpec("r", "relu"), LayerSpec("s", "sigmoid")
        assert required_saves(relu, FROZEN, "paper", in_shape=(2, 3, 4, 4)) == []
        (s,) = required_saves(relu, FROZEN, "strict", in_shape=(2, 3, 4, 5))
        assert s.nbytes == 15 and s.reason == "nonlinearity-jacobian"  # 120 bits
        (s,) = required_saves(sig, FROZEN, "strict", in_shape=(2, 3), dtype=np.float64)
        assert s.nbytes == 48
        assert required_saves(relu, FROZEN, "strict", in_shape=(2, 3),
                              input_requires_grad=False) == []


class TestSavedSet:
    def test_reason_enumerated(self):
        with pytest.raises(InvariantViolation):
            SavedEntry(0, 4, "curiosity")

    def test_unique_bytes(self):
        assert unique_bytes([SavedEntry(1, 10, "weight-grad"), SavedEntry(1, 10, "mask-grad"),
                             SavedEntry(2, 3, "weight-grad")]) == 13

    def test_entry_bytes_are_numel_times_width(self, rng):
        tape = Tape()
        x = tape.constant(rng.normal(size=(3, 5)).astype(np.float32))
        tape.linear(x, tape.param("w", np.ones((5, 2), np.float32), True))
        (e,) = tape.saved_entries()
        assert e.nbytes == 3 * 5 * 4


class TestForwardRecord:
    def graph(self):
        return build_backbone("tiny-cnn", 10)

    def test_all_frozen_retains_nothing(self, rng):
        g = self.graph()
        x = rng.normal(size=(1, 3, 32, 32)).astype(np.float32)
        logits, tape = forward_record(g, init_params(g), x)
        assert logits.shape == (1, 10)
        assert tape.saved_entries() == [] and tape.nodes == []

    def test_single_trainable_conv(self, rng):
        import dataclasses

        g = self.graph()
        stem = g.blocks[1]
        conv2 = dataclasses.replace(stem.main[3], trainability=Trainability(weight=True))
        block = dataclasses.replace(stem, main=stem.main[:3] + (conv2,) + stem.main[4:])
        g = dataclasses.replace(g, blocks=(g.blocks[0], block, g.blocks[2]))
        x = rng.normal(size=(2, 3, 32, 32)).astype(np.float32)
        _, tape = forward_record(g, init_params(g), x)
        (node,) = [n for n in tape.nodes if n.saved]
        assert node.label == "block1.conv2"
        (e,) = node.saved
        assert e.reason == "weight-grad" and e.nbytes == 2 * 32 * 16 * 16 * 4
        want = required_saves(conv2, conv2.trainability, in_shape=(2, 32, 16, 16))
        assert tape.saved_bytes() == sum(s.nbytes for s in want)

    def test_forward_matches_untaped(self, rng):
        g = set_strategy(self.graph(), "full")
        p = init_params(g, 3)
        x = rng.normal(size=(2, 3, 32, 32)).astype(np.float32)
        a, _ = forward_record(g, p, x)
        b, _ = forward_record(g, p, x, grad_enabled=False)
        assert a.tobytes() == b.tobytes()

    def test_da3_block_never_retains_full_resolution(self, rng):
        g = set_strategy(attach_adaptors(self.graph()), "da3")
        p = init_missing(g, init_params(g))
        n = 2
        x = rng.normal(size=(n, 3, 32, 32)).astype(np.float32)
        _, tape = forward_record(g, p, x)
        full_res = n * 32 * 16 * 16 * 4
        sizes = {e.nbytes for e in tape.saved_entries()}
        assert full_res not in sizes
        d, plane, fc_in = n * 32 * 8 * 8 * 4, n * 8 * 8 * 4, n * 32 * 4
        assert sizes <= {d, plane, fc_in}
        assert tape.saved_bytes() == 2 * d + plane + fc_in  # d, H_a, soft, classifier input


class TestBackward:
    def test_bias_gradient_of_sum(self, rng):
        tape = Tape()
        x = tape.constant(rng.normal(size=(4, 3)))
        w = tape.param("w", rng.normal(size=(3, 5)), False)
        b = tape.param("b", np.zeros(5), True)
        y = tape.linear(x, w, b)
        grads = backward(tape, np.ones_like(y.data))
        assert set(grads) == {"b"}
        np.testing.assert_array_equal(grads["b"], np.full(5, 4.0))
        assert tape.saved_entries() == []

    def test_mask_gradient_closed_form(self, rng):
        tape = Tape()
        a = rng.normal(size=(4, 3))
        wv, mv = rng.normal(size=(3, 2)), rng.uniform(0.5, 1.5, size=(3, 2))
        y = tape.linear(tape.constant(a), tape.param("w", wv, False), None,
                        tape.param("m", mv, True))
        g = rng.normal(size=y.shape)
        grads = tape.backward(g)
        np.testing.assert_allclose(grads["m"], (a.T @ g) * wv, atol=1e-12)

    def test_single_use(self, rng):
        tape = Tape()
        y = tape.linear(tape.constant(np.ones((1, 2))), tape.param("w", np.ones((2, 1)), True))
        tape.backward(np.ones((1, 1)))
        with pytest.raises(InvariantViolation):
            tape.backward(np.ones((1, 1)), y)

    def test_reading_unsaved_tensor_is_an_invariant_violation(self):
        tape = Tape()
        y = tape.linear(tape.constant(np.ones((1, 2))), tape.param("w", np.ones((2, 1)), True))
        tape.nodes[0].tensors.clear()
        with pytest.raises(InvariantViolation):
            tape.backward(np.ones((1, 1)), y)

    def test_fan_out_accumulates(self, rng):
        tape = Tape()
        w = tape.param("w", rng.normal(size=(2, 2)), True)
        x = tape.constant(rng.normal(size=(3, 2)))
        h = tape.linear(x, w)
        y = tape.add(h, h)
        grads = tape.backward(np.ones_like(y.data))
        np.testing.assert_allclose(grads["w"], 2 * x.data.T @ np.ones((3, 2)))


def _net_loss(params, x, policy="paper", training=False, order=None):
    """A small graph touching every op; returns (loss, grads)."""
    tape = Tape(policy)
    p = {k: tape.param(k, v, True) for k, v in params.items()}
    h = tape.conv2d(tape.constant(x), p["c1.w"], p["c1.b"], 1, 1, mask=p["c1.m"])
    h, _ = tape.batchnorm(h, p["bn.g"], p["bn.b"], np.zeros(3) + 0.1, np.ones(3) * 1.3,
                          training=training)
    h = tape.relu(h)
    s = tape.sigmoid(tape.conv2d(h, p["c2.w"], None, 2, 1))
    s = tape.upsample(s)
    h = tape.mul(h, s)
    h = tape.scale(tape.avgpool(h, 2), 1.5)
    h = tape.flatten(tape.avgpool(h, None))
    out = tape.linear(h, p["fc.w"], p["fc.b"])
    weights = np.arange(out.data.size).reshape(out.shape) / out.data.size
    loss = float(np.sum(out.data * weights))
    return loss, tape.backward(weights)


def _net_params(rng):
    return {"c1.w": rng.normal(size=(3, 2, 3, 3)), "c1.b": rng.normal(size=3),
            "c1.m": rng.uniform(0.5, 1.5, size=(3, 2, 3, 3)),
            "bn.g": rng.uniform(0.5, 1.5, size=3), "bn.b": rng.normal(size=3),
            "c2.w": rng.normal(size=(1, 3, 3, 3)) * 0.3,
            "fc.w": rng.normal(size=(3, 4)), "fc.b": rng.normal(size=4)}


class TestFiniteDifferences:
    @pytest.mark.parametrize("training", [False, True])
    @pytest.mark.parametrize("policy", ["paper", "strict"])
    def test_every_op(self, rng, training, policy):
        params = _net_params(rng)
        x = rng.normal(size=(2, 2, 6, 6))
        _, grads = _net_loss(params, x, policy, training)
        for name, value in params.items():
            def f(v):
                return _net_loss({**params, name: v}, x, policy, training)[0]

            num = central_diff(f, value, eps=1e-5)
            np.testing.assert_allclose(grads[name], num, rtol=1e-4, atol=1e-7, err_msg=name)


class TestDetach:
    def test_product_rule_with_constant_factor(self, rng):
        tape = Tape()
        xv = rng.normal(size=(2, 3))
        x = tape.param("x", xv, True)
        y = tape.mul(x, tape.detach(x))
        grads = tape.backward(np.ones_like(xv))
        np.testing.assert_array_equal(grads["x"], xv)
        assert tape.saved_entries() == []

    def test_path_only_through_detach_is_cut(self, rng):
        tape = Tape()
        w = tape.param("w", rng.normal(size=(3, 3)), True)
        h = tape.linear(tape.constant(rng.normal(size=(2, 3))), w)
        y = tape.scale(detach(tape, h), 2.0)
        out = tape.add(y, tape.constant(np.zeros_like(y.data)))
        assert not out.requires_grad
        assert tape.backward(np.ones_like(out.data), out) == {}


@settings(max_examples=40, deadline=None)
@given(weight=st.booleans(), bias=st.booleans(), mask=st.booleans(),
       policy=st.sampled_from(["paper", "strict"]), kind=st.sampled_from(["conv2d", "linear"]))
def test_save_exactness_single_layer(weight, bias, mask, policy, kind):
    t = Trainability(weight=weight, bias=bias, mask=mask)
    r = np.random.default_rng(0)
    tape = Tape(policy)
    if kind == "conv2d":
        spec = LayerSpec("c", "conv2d", c_in=2, c_out=3, kh=3, kw=3, stride=1, padding=1,
                         bias=True, mask_enabled=True, trainability=t)
        x = tape.constant(r.normal(size=(2, 2, 4, 4)).astype(np.float32))
        tape.conv2d(x, tape.param("w", r.normal(size=(3, 2, 3, 3)).astype(np.float32), weight),
                    tape.param("b", np.zeros(3, np.float32), bias), 1, 1,
                    tape.param("m", np.ones((3, 2, 3, 3), np.float32), mask))
    else:
        spec = lin(4, 3, mask=True, t=t)
        x = tape.constant(r.normal(size=(2, 4)).astype(np.float32))
        tape.linear(x, tape.param("w", r.normal(size=(4, 3)).astype(np.float32), weight),
                    tape.param("b", np.zeros(3, np.float32), bias),
                    tape.param("m", np.ones((4, 3), np.float32), mask))
    want = required_saves(spec, t, policy, in_shape=x.shape)
    assert tape.saved_bytes() == sum(s.nbytes for s in want)
    assert sorted(e.reason for e in tape.saved_entries()) == sorted(s.reason for s in want)


def test_square_through_mul(rng):
    tape = Tape()
    xv = rng.normal(size=(2, 3))
    x = tape.param("x", xv, True)
    tape.mul(x, x)
    np.testing.assert_allclose(tape.backward(np.ones_like(xv))["x"], 2 * xv)
