"""Model builders, forward topology, and the binary checkpoint format."""

import dataclasses

import numpy as np
import pytest

from dzq.autodiff import backward, softmax_cross_entropy
from dzq.data import Dataset
from dzq.errors import FormatError
from dzq.models import (
    CHECKPOINT_MAGIC,
    Layer,
    LayerSpec,
    Model,
    accuracy,
    build_mini_cnn,
    build_mlp,
    forward,
    layer_outcome,
    load_checkpoint,
    run_forward,
    save_checkpoint,
    validate_model,
)
from dzq.quantizers import LayerQuantState


def naive_mlp(model, batch):
    h = np.asarray(batch, dtype=np.float64)
    for i, layer in enumerate(model.layers):
        if i > 0:
            h = np.maximum(h, 0.0)
        h = h @ layer.weight + layer.bias
    return h


class TestBuilders:
    def test_mlp_dims_and_zero_biases(self):
        model = build_mlp(12, [8, 6], 3, seed=0)
        shapes = [layer.weight.shape for layer in model.layers]
        assert shapes == [(12, 8), (8, 6), (6, 3)]
        assert model.num_classes == 3
        for layer in model.layers:
            assert np.all(layer.bias == 0.0)

    def test_mlp_kaiming_bound(self):
        model = build_mlp(100, [50], 10, seed=1)
        first = model.layers[0].weight
        bound = np.sqrt(6.0 / 100)
        assert np.max(np.abs(first)) <= bound
        assert np.max(np.abs(first)) > 0.8 * bound

    def test_builders_deterministic_in_seed(self):
        a = build_mlp(10, [5], 2, seed=7)
        b = build_mlp(10, [5], 2, seed=7)
        c = build_mlp(10, [5], 2, seed=8)
        assert np.array_equal(a.layers[0].weight, b.layers[0].weight)
        assert not np.array_equal(a.layers[0].weight, c.layers[0].weight)

    def test_cnn_shape_chain_28x28(self):
        model = build_mini_cnn((1, 28, 28), 10, seed=0)
        conv0, conv1, fc = model.layers
        assert conv0.spec.out_size == (26, 26)
        assert conv1.spec.out_size == (11, 11)
        assert fc.spec.in_features == 32 * 5 * 5
        assert fc.spec.out_features == 10

    def test_cnn_shape_chain_32x32_rgb(self):
        model = build_mini_cnn((3, 32, 32), 5, seed=0)
        conv0, conv1, fc = model.layers
        assert conv0.spec.out_size == (30, 30)
        assert conv1.spec.out_size == (13, 13)
        assert fc.spec.in_features == 32 * 6 * 6


class TestValidation:
    def test_wrong_weight_shape_rejected(self):
        model = build_mlp(4, [3], 2)
        model.layers[0].weight = np.zeros((4, 99))
        with pytest.raises(ValueError):
            validate_model(model)

    def test_mismatched_chain_rejected(self):
        spec_a = LayerSpec(kind="linear", in_features=4, out_features=3)
        spec_b = LayerSpec(kind="linear", in_features=99, out_features=2)
        model = Model(input_shape=(4,), layers=[
            Layer("fc0", spec_a, np.zeros((4, 3)), np.zeros(3)),
            Layer("fc1", spec_b, np.zeros((99, 2)), np.zeros(2)),
        ])
        with pytest.raises(ValueError):
            validate_model(model)

    def test_empty_model_rejected(self):
        with pytest.raises(ValueError):
            validate_model(Model(input_shape=(4,), layers=[]))

    def test_pooled_away_input_rejected(self):
        with pytest.raises(ValueError):
            build_mini_cnn((1, 3, 3), 2)


class TestForward:
    def test_fp32_matches_naive_mlp(self):
        rng = np.random.default_rng(10)
        model = build_mlp(9, [7, 5], 3, seed=2)
        for layer in model.layers:
            layer.bias = rng.uniform(-0.5, 0.5, size=layer.bias.shape)
        batch = rng.uniform(-1, 1, size=(6, 9))
        got = forward(model, batch, mode="fp32")
        np.testing.assert_allclose(got, naive_mlp(model, batch), rtol=1e-12)

    def test_zero_input_yields_last_bias(self):
        model = build_mlp(5, [4], 3, seed=3)
        model.layers[-1].bias = np.array([0.3, -0.2, 0.9])
        got = forward(model, np.zeros((2, 5)), mode="fp32")
        np.testing.assert_allclose(got, np.tile([0.3, -0.2, 0.9], (2, 1)),
                                   atol=1e-15)

    def test_quant_mode_near_fp32_at_high_precision(self):
        # 16-bit grid with the dead zone squeezed almost shut
        model = build_mlp(20, [16], 4, seed=4)
        for layer in model.layers:
            layer.state = LayerQuantState(theta_dz=12.0, fixed_bits=16)
        rng = np.random.default_rng(11)
        batch = rng.uniform(-1, 1, size=(8, 20))
        base = forward(model, batch, mode="fp32")
        quant = forward(model, batch, mode="quant")
        np.testing.assert_allclose(quant, base, atol=1e-2)

    def test_quant_mode_differs_at_low_precision(self):
        model = build_mlp(20, [16], 4, seed=5)
        for layer in model.layers:
            layer.state = LayerQuantState(theta_dz=1.0, fixed_bits=2)
        rng = np.random.default_rng(12)
        batch = rng.uniform(-1, 1, size=(4, 20))
        assert not np.allclose(forward(model, batch, "quant"),
                               forward(model, batch, "fp32"))

    def test_forward_does_not_mutate_model(self):
        model = build_mlp(6, [5], 2, seed=6)
        before = [layer.weight.copy() for layer in model.layers]
        forward(model, np.ones((3, 6)), mode="quant")
        for layer, snap in zip(model.layers, before):
            assert np.array_equal(layer.weight, snap)

    def test_cnn_logit_shape(self):
        model = build_mini_cnn((1, 12, 12), 4, seed=7)
        batch = np.random.default_rng(13).uniform(-1, 1, size=(3, 1, 12, 12))
        assert forward(model, batch, "fp32").shape == (3, 4)
        assert forward(model, batch, "quant").shape == (3, 4)

    def test_training_handles_receive_gradients(self):
        model = build_mlp(8, [6], 3, seed=8)
        rng = np.random.default_rng(14)
        batch = rng.uniform(-1, 1, size=(5, 8))
        labels = rng.integers(0, 3, size=5)
        fp = run_forward(model, batch, mode="quant", requires_grad=True)
        backward(softmax_cross_entropy(fp.logits, labels))
        for w, b, th in zip(fp.weights, fp.biases, fp.theta_dz):
            assert w.grad is not None and w.grad.shape == w.value.shape
            assert b.grad is not None
            assert th.grad is not None

    def test_unknown_mode_rejected(self):
        model = build_mlp(4, [], 2, seed=9)
        with pytest.raises(ValueError):
            forward(model, np.zeros((1, 4)), mode="int8")


class TestAccuracy:
    def make_identity_model(self):
        spec = LayerSpec(kind="linear", in_features=2, out_features=2)
        layer = Layer("fc0", spec, np.eye(2), np.zeros(2))
        return validate_model(Model(input_shape=(2,), layers=[layer]))

    def test_perfect_and_flipped_labels(self):
        model = self.make_identity_model()
        feats = np.array([[2.0, -1.0], [-1.0, 2.0], [3.0, 0.0], [0.0, 3.0]])
        right = Dataset(feats, np.array([0, 1, 0, 1]), 2)
        wrong = Dataset(feats, np.array([1, 0, 1, 0]), 2)
        assert accuracy(model, right, mode="fp32") == 1.0
        assert accuracy(model, wrong, mode="fp32") == 0.0

    def test_batched_evaluation_matches_single(self):
        model = build_mlp(6, [5], 3, seed=15)
        rng = np.random.default_rng(16)
        ds = Dataset(rng.uniform(-1, 1, size=(37, 6)),
                     rng.integers(0, 3, size=37), 3)
        assert accuracy(model, ds, "fp32", batch_size=8) == \
            accuracy(model, ds, "fp32", batch_size=512)


class TestLayerOutcome:
    def test_matches_quantizer_config(self):
        model = build_mlp(10, [8], 2, seed=17)
        layer = model.layers[0]
        layer.state = LayerQuantState(theta_dz=1.5, fixed_bits=5,
                                      quantile=1.0)
        out = layer_outcome(layer)
        r = float(np.max(np.abs(layer.weight)))
        d = 2 * r * (1 - np.tanh(1.5))
        np.testing.assert_allclose(out.deadzone, d, rtol=1e-12)
        assert out.bits == 5


class TestCheckpoint:
    def make_model(self):
        model = build_mlp(7, [5], 3, seed=18)
        model.layers[0].state = LayerQuantState(
            theta_dz=1.25, fixed_bits=6, quantile=0.97, epsilon=1e-7)
        model.layers[1].state = LayerQuantState(
            theta_dz=-0.5, theta_bit=2.5, fixed_bits=None,
            b_min=3, b_max=7, detach_scale_from_d=True)
        rng = np.random.default_rng(19)
        for layer in model.layers:
            layer.bias = rng.uniform(-1, 1, size=layer.bias.shape)
        return model

    def test_round_trip_bit_exact(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "model.cdq"
        save_checkpoint(model, path, mode="quant")
        loaded, mode = load_checkpoint(path)
        assert mode == "quant"
        assert loaded.input_shape == model.input_shape
        assert len(loaded.layers) == len(model.layers)
        for a, b in zip(model.layers, loaded.layers):
            assert a.name == b.name
            assert a.spec == b.spec
            assert np.array_equal(a.weight, b.weight)
            assert np.array_equal(a.bias, b.bias)
            assert a.state == b.state

    def test_mode_byte_round_trips(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "model.cdq"
        save_checkpoint(model, path, mode="fp32")
        _, mode = load_checkpoint(path)
        assert mode == "fp32"

    def test_conv_round_trip(self, tmp_path):
        model = build_mini_cnn((1, 10, 10), 3, seed=20)
        path = tmp_path / "cnn.cdq"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path)
        for a, b in zip(model.layers, loaded.layers):
            assert a.spec == b.spec
            assert np.array_equal(a.weight, b.weight)

    def test_save_load_forward_identical(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "model.cdq"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path)
        batch = np.random.default_rng(21).uniform(-1, 1, size=(4, 7))
        assert np.array_equal(forward(model, batch, "quant"),
                              forward(loaded, batch, "quant"))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.cdq"
        path.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "model.cdq"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "model.cdq"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(path)

    def test_unknown_mode_byte_rejected(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "model.cdq"
        save_checkpoint(model, path)
        blob = bytearray(path.read_bytes())
        blob[len(CHECKPOINT_MAGIC)] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="mode"):
            load_checkpoint(path)

    def test_unknown_kind_byte_rejected(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "model.cdq"
        save_checkpoint(model, path)
        blob = bytearray(path.read_bytes())
        # header: magic, mode byte, ndim byte, one u32 dim, u32 layer count
        blob[len(CHECKPOINT_MAGIC) + 2 + 4 + 4] = 7
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="kind"):
            load_checkpoint(path)

    def test_empty_model_file_rejected(self, tmp_path):
        import struct
        path = tmp_path / "empty.cdq"
        blob = CHECKPOINT_MAGIC + struct.pack("<BB", 0, 1)
        blob += struct.pack("<I", 4) + struct.pack("<I", 0)
        path.write_bytes(blob)
        with pytest.raises(FormatError, match="no layers"):
            load_checkpoint(path)
