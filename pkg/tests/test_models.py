import math

import numpy as np
import pytest

import metaxt as mxt
from metaxt.models import EncoderSpec, LtnSpec, TaskHeadSpec, TransferNetwork
from tests.mxtutil import set_tensor, tiny_model


def two_by_two_model():
    return TransferNetwork.build(2, 2, 2, hidden_dims=(2,), h_dim=2, z_dim=2, ltn_hidden=2)


class TestSpecs:
    def test_encoder_defaults(self):
        spec = EncoderSpec(10)
        assert spec.widths == (64, 32, 32)
        assert spec.num_layers == 3
        assert not spec.has_rtn

    def test_default_rtn_layer(self):
        assert EncoderSpec(10).with_rtn().rtn_insert_layer == 2
        assert EncoderSpec(10, hidden_dims=(8, 8, 8)).with_rtn().rtn_insert_layer == 2
        assert EncoderSpec(10, hidden_dims=(8, 8, 8, 8)).with_rtn().rtn_insert_layer == 3

    @pytest.mark.parametrize("layer", [0, 3])
    def test_bad_rtn_layer(self, layer):
        with pytest.raises(ValueError, match="rtn_insert_layer"):
            EncoderSpec(10, rtn_insert_layer=layer)

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            EncoderSpec(10, h_dim=0)
        with pytest.raises(ValueError):
            EncoderSpec(0)

    def test_bad_activation(self):
        with pytest.raises(ValueError):
            EncoderSpec(10, activation="sigmoid")

    def test_head_needs_two_classes(self):
        with pytest.raises(ValueError, match="at least 2"):
            TaskHeadSpec(4, 1)

    def test_ltn_input_width(self):
        spec = LtnSpec(32, 5, 2)
        assert spec.input_dim == 40
        assert spec.hidden == 32

    def test_mismatched_widths(self):
        enc = EncoderSpec(3, (4,), 3)
        with pytest.raises(ValueError, match="h_dim"):
            TransferNetwork(enc, TaskHeadSpec(3, 2, group="v"), TaskHeadSpec(4, 3), LtnSpec(3, 3, 2))
        with pytest.raises(ValueError, match="target classes"):
            TransferNetwork(enc, TaskHeadSpec(3, 2, group="v"), TaskHeadSpec(3, 3), LtnSpec(3, 4, 2))


class TestParameterCounts:
    def test_tiny(self):
        counts = tiny_model().parameter_counts()
        assert counts == {"theta": 31, "v": 8, "w": 12, "alpha": 46}
        assert tiny_model().num_params == 97

    def test_default_dims(self):
        model = TransferNetwork.build(16, 2, 5)
        counts = model.parameter_counts()
        assert counts["theta"] == 16 * 64 + 64 + 64 * 32 + 32 + 32 * 32 + 32
        assert counts["v"] == 32 * 2 + 2
        assert counts["w"] == 32 * 5 + 5
        assert counts["alpha"] == 2 * 8 + 40 * 32 + 32 + 32 * 32 + 32 + 32 * 5 + 5
        assert "phi" not in counts
        assert model.num_params == sum(counts.values())

    def test_rtn(self):
        model = TransferNetwork.build(16, 2, 5, use_rtn=True)
        assert model.encoder.rtn_insert_layer == 2
        assert model.parameter_counts()["phi"] == 3 * (32 * 32 + 32)


class TestInit:
    def test_bounds(self):
        model = TransferNetwork.build(16, 2, 5)
        params = model.init_params(np.random.default_rng(0))
        W0 = params.tensors("theta")["enc_W0"]
        assert np.all(np.abs(W0) <= 1 / math.sqrt(16))
        assert not np.any(params.tensors("theta")["enc_b0"])
        W3 = params.tensors("alpha")["W3"]
        assert np.all(np.abs(W3) <= 0.1 / math.sqrt(32))
        embed = params.tensors("alpha")["embed"]
        assert np.all(np.abs(embed) <= 1 / math.sqrt(2))

    def test_seeded(self):
        model = tiny_model()
        a = model.init_params(np.random.default_rng(4))
        b = model.init_params(np.random.default_rng(4))
        assert a.identical(b)


class TestEncode:
    def test_zero_weights(self, tiny):
        h = tiny.encode(tiny.zero_params(), np.array([0.3, -2.0, 1.0]))
        np.testing.assert_array_equal(h, np.zeros(3))

    def test_hand_computed(self):
        model = two_by_two_model()
        params = model.zero_params()
        params = set_tensor(params, "theta", "enc_W0", [[1.0, 0.5], [-1.0, 2.0]])
        params = set_tensor(params, "theta", "enc_b0", [0.1, 0.0])
        params = set_tensor(params, "theta", "enc_W1", [[1.0, 0.0], [0.0, -1.0]])
        h = model.encode(params, np.array([1.0, -1.0]))
        # layer 1: (1 + 1 + 0.1, 0.5 - 2) = (2.1, -1.5)
        h1 = np.tanh([2.1, -1.5])
        expected = np.tanh([h1[0], -h1[1]])
        np.testing.assert_allclose(h, expected, rtol=1e-15)

    def test_tagging_one_row_per_token(self, tiny):
        params = tiny.init_params(np.random.default_rng(0))
        X = np.random.default_rng(1).normal(size=(7, 3))
        assert tiny.encode(params, X).shape == (7, 3)
        ex = mxt.Example(X, np.zeros(7, dtype=np.int64))
        assert tiny.encode(params, ex).shape == (7, 3)

    def test_dimension_mismatch(self, tiny):
        with pytest.raises(ValueError, match="width 3"):
            tiny.encode(tiny.zero_params(), np.ones(4))

    def test_rtn_flag_without_rtn(self, tiny):
        params = tiny.init_params(np.random.default_rng(0))
        x = np.array([0.2, 0.4, -1.0])
        np.testing.assert_array_equal(tiny.encode(params, x, apply_rtn=True), tiny.encode(params, x))

    def test_rtn_inert_off_path(self, tiny, tiny_rtn):
        params_rtn = tiny_rtn.init_params(np.random.default_rng(0))
        params = tiny.zero_params().replace(theta=params_rtn["theta"], w=params_rtn["w"])
        x = np.array([0.2, 0.4, -1.0])
        np.testing.assert_array_equal(tiny_rtn.encode(params_rtn, x), tiny.encode(params, x))
        assert not np.array_equal(tiny_rtn.encode(params_rtn, x, apply_rtn=True), tiny_rtn.encode(params_rtn, x))

    def test_rtn_counter(self, tiny_rtn):
        params = tiny_rtn.init_params(np.random.default_rng(0))
        before = tiny_rtn.calls["rtn"]
        tiny_rtn.encode(params, np.ones(3))
        assert tiny_rtn.calls["rtn"] == before
        tiny_rtn.encode(params, np.ones(3), apply_rtn=True)
        assert tiny_rtn.calls["rtn"] == before + 1


class TestHeadForward:
    def test_zero_weights_uniform(self, tiny):
        p = tiny.head_forward(tiny.zero_params(), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(p, [1 / 3] * 3, rtol=1e-15)

    def test_closed_form(self):
        model = two_by_two_model()
        params = set_tensor(model.zero_params(), "w", "b", [math.log(3), 0.0])
        p = model.head_forward(params, np.zeros(2))
        np.testing.assert_allclose(p, [0.75, 0.25], rtol=1e-14)

    def test_shift_invariance(self, tiny):
        params = tiny.init_params(np.random.default_rng(0))
        h = np.array([0.3, -0.1, 0.7])
        p = tiny.head_forward(params, h)
        shifted = set_tensor(params, "w", "b", params.tensors("w")["b"] + 12.5)
        np.testing.assert_allclose(tiny.head_forward(shifted, h), p, atol=1e-12)
        assert abs(p.sum() - 1) < 1e-12
        assert np.all((p > 0) & (p < 1))

    def test_source_head(self, tiny):
        p = tiny.head_forward(tiny.zero_params(), np.ones(3), tiny.source_head)
        np.testing.assert_allclose(p, [0.5, 0.5])

    def test_dimension_mismatch(self, tiny):
        with pytest.raises(ValueError, match="width"):
            tiny.head_forward(tiny.zero_params(), np.ones(4))


class TestLtnForward:
    def test_zero_alpha_uniform(self, tiny):
        params = tiny.init_params(np.random.default_rng(0))
        params = params.replace(alpha=np.zeros(tiny.layout.size("alpha")))
        label = tiny.ltn_forward(params, np.array([1.0, 0.0, -1.0]), 1)
        assert isinstance(label, mxt.SoftLabel)
        np.testing.assert_allclose(label.probs, [1 / 3] * 3, rtol=1e-12)

    def test_identical_inputs(self, tiny, tiny_params):
        x = np.array([0.5, 0.5, -0.2])
        assert tiny.ltn_forward(tiny_params, x, 0) == tiny.ltn_forward(tiny_params, x.copy(), 0)

    def test_hand_computed(self):
        # identity encoder weights and a nested atanh input give h = (0.5, 0)
        model = two_by_two_model()
        params = model.zero_params()
        params = set_tensor(params, "theta", "enc_W0", np.eye(2))
        params = set_tensor(params, "theta", "enc_W1", np.eye(2))
        x = np.array([np.arctanh(np.arctanh(0.5)), 0.0])
        h = model.encode(params, x)
        np.testing.assert_allclose(h, [0.5, 0.0], rtol=1e-12)
        params = set_tensor(params, "alpha", "embed", [[0.0, 1.0], [1.0, 0.0]])
        W1 = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [2.0, -1.0]])
        params = set_tensor(params, "alpha", "W1", W1)
        params = set_tensor(params, "alpha", "W2", np.eye(2))
        params = set_tensor(params, "alpha", "W3", [[1.0, -1.0], [0.0, 0.0]])
        z1 = np.tanh(np.concatenate([h, [0.0, 1.0]]) @ W1)
        z2 = np.tanh(z1)
        logits = z2 @ np.array([[1.0, -1.0], [0.0, 0.0]])
        expected = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(model.ltn_forward(params, x, 0).probs, expected, rtol=1e-12)

    def test_valid_distribution(self, tiny, tiny_params):
        X = np.random.default_rng(3).normal(size=(20, 3))
        for i, x in enumerate(X):
            label = tiny.ltn_forward(tiny_params, x, i % 2)
            assert abs(label.probs.sum() - 1) < 1e-12
            assert np.all(label.probs >= 0)

    def test_tagged_sentence(self, tiny, tiny_params):
        labels = tiny.ltn_forward(tiny_params, np.ones((4, 3)), [0, 1, 1, 0])
        assert len(labels) == 4
        np.testing.assert_allclose(labels[1].probs, labels[2].probs, rtol=1e-12)

    @pytest.mark.parametrize("label", [-1, 2])
    def test_label_out_of_range(self, tiny, tiny_params, label):
        with pytest.raises(ValueError, match="out of range"):
            tiny.ltn_forward(tiny_params, np.ones(3), label)

    def test_calls_counted(self, tiny_params):
        model = tiny_model()
        model.ltn_forward(tiny_params, np.ones(3), 0)
        assert model.calls["ltn"] == 1
