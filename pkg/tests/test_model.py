"""Feature extractor, attention block and mapper."""

import numpy as np
import pytest

from atacnet.loss import batch_loss
from atacnet.model import (
    AtacNet,
    AttentionConfig,
    BackboneConfig,
    ModelConfig,
    anomaly_map,
    attention_augment,
    calibrate_mapper,
    feature_extract,
    self_attention,
)
from atacnet.scoring import atac_forward
from atacnet.tensor import ShapeError, Tensor, conv2d, grad_check, no_grad, strict

from conftest import tiny_config, tiny_model


def dense_attention_oracle(f, wq, bq, wk, bk, wv, bv, gain):
    """Explicit per-position loops over the affinity matrix."""
    n, c, h, w = f.shape
    p = h * w
    out = f.copy()
    for ni in range(n):
        flat = f[ni].reshape(c, p)
        q = wq[:, :, 0, 0] @ flat + bq[:, None]
        k = wk[:, :, 0, 0] @ flat + bk[:, None]
        v = wv[:, :, 0, 0] @ flat + bv[:, None]
        agg = np.zeros((c, p))
        for i in range(p):
            logits = np.array([q[:, i] @ k[:, j] for j in range(p)])
            e = np.exp(logits - logits.max())
            a = e / e.sum()
            for j in range(p):
                agg[:, i] += a[j] * v[:, j]
        out[ni] += gain * agg.reshape(c, h, w)
    return out


class TestConfig:
    def test_default_backbone_gives_4x4(self):
        cfg = BackboneConfig()
        assert cfg.stage_channels == (16, 32, 64, 64)
        assert cfg.final_resolution == 4

    def test_needs_two_stages(self):
        with pytest.raises(ValueError):
            BackboneConfig(stage_channels=(8,))

    def test_final_map_at_least_4x4(self):
        with pytest.raises(ValueError):
            BackboneConfig(stage_channels=(8, 8, 8, 8), input_resolution=32)

    def test_query_key_channels(self):
        assert AttentionConfig(channels=64).qk_channels == 8
        assert AttentionConfig(channels=4).qk_channels == 1

    def test_dict_round_trip(self):
        cfg = tiny_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestFeatureExtract:
    def test_default_shape(self):
        model = AtacNet()
        f = feature_extract(Tensor(np.zeros((1, 1, 64, 64))), model)
        assert f.shape == (1, 64, 4, 4)
        assert model.backbone.stride == 16

    def test_zero_image_is_constant_per_channel(self):
        f = AtacNet(seed=1).feature_extract(Tensor(np.zeros((1, 1, 64, 64)))).data
        spread = f.max(axis=(2, 3)) - f.min(axis=(2, 3))
        assert np.all(spread == 0)

    def test_identical_batch_items(self):
        x = np.random.default_rng(0).uniform(size=(1, 1, 64, 64))
        f = AtacNet().feature_extract(Tensor(np.concatenate([x, x]))).data
        np.testing.assert_array_equal(f[0], f[1])

    def test_resolution_mismatch(self):
        with pytest.raises(ShapeError) as err:
            AtacNet().feature_extract(Tensor(np.zeros((1, 1, 32, 32))))
        assert err.value.dim == "resolution"


class TestSelfAttention:
    def test_zero_gain_is_identity(self):
        model = AtacNet()
        f = Tensor(np.random.default_rng(1).normal(size=(2, 64, 4, 4)))
        assert self_attention(f, model).data.tobytes() == f.data.tobytes()

    def test_single_position(self, f64):
        model = tiny_model(dtype=np.float64, gain=0.5)
        block = model.attention
        f = Tensor(np.random.default_rng(2).normal(size=(1, 6, 1, 1)))
        assert block.attention_weights(f).data.tolist() == [[[1.0]]]
        v = conv2d(f, block.wv, block.bv).data
        np.testing.assert_allclose(block.self_attention(f).data, f.data + 0.5 * v, rtol=1e-12)

    def test_dense_oracle(self, f64):
        cfg = ModelConfig(
            BackboneConfig(stage_channels=(8, 8), input_resolution=16), AttentionConfig(channels=8, gain_init=0.7)
        )
        block = AtacNet(cfg, seed=3).astype(np.float64).attention
        f = np.random.default_rng(3).normal(size=(1, 8, 4, 4))
        weights = block.attention_weights(Tensor(f)).data
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
        args = [t.data for t in (block.wq, block.bq, block.wk, block.bk, block.wv, block.bv)]
        expected = dense_attention_oracle(f, *args, 0.7)
        np.testing.assert_allclose(block.self_attention(Tensor(f)).data, expected, rtol=1e-5, atol=1e-9)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            AtacNet().attention.self_attention(Tensor(np.zeros((1, 3, 4, 4))))


class TestAttentionAugment:
    def test_default_shape(self):
        model = AtacNet()
        out = attention_augment(Tensor(np.random.default_rng(4).uniform(size=(1, 64, 4, 4))), model)
        assert out.shape == (1, 64, 4, 4)

    def test_zero_features_bias_only(self):
        model = AtacNet(ModelConfig(attention=AttentionConfig(gain_init=0.3)))
        out = model.attention_augment(Tensor(np.zeros((2, 64, 4, 4)))).data
        np.testing.assert_array_equal(out[0], out[1])
        assert np.all(out.max(axis=(2, 3)) == out.min(axis=(2, 3)))

    def test_gain_changes_output(self):
        model = AtacNet(ModelConfig(attention=AttentionConfig(gain_init=0.5)))
        f = Tensor(np.random.default_rng(5).uniform(size=(1, 64, 4, 4)))
        a = model.attention_augment(f).data.copy()
        model.attention.gain.data = model.attention.gain.data * 2
        assert not np.allclose(a, model.attention_augment(f).data)

    def test_zero_gain_reduces_to_conv_stack(self):
        model = AtacNet()
        f = Tensor(np.random.default_rng(6).uniform(size=(2, 64, 4, 4)))
        np.testing.assert_allclose(model.attention_augment(f).data, model.attention.convolve(f).data, atol=1e-7)


class TestAnomalyMap:
    def test_zero_weight_gives_bias(self):
        model = AtacNet()
        model.mapper.weight.data[:] = 0
        model.mapper.bias.data[:] = 1.25
        amap = anomaly_map(Tensor(np.random.default_rng(7).normal(size=(1, 64, 4, 4))), model)
        assert amap.shape == (1, 1, 4, 4)
        assert np.all(amap.data == np.float32(1.25))

    def test_identical_inputs(self):
        model = AtacNet()
        x = np.random.default_rng(8).uniform(size=(1, 1, 64, 64))
        _, _, amap = model.forward_maps(Tensor(np.concatenate([x, x])))
        np.testing.assert_array_equal(amap.data[0], amap.data[1])

    def test_bias_gradient_is_one(self, f64):
        model = AtacNet().astype(np.float64)
        att = Tensor(np.random.default_rng(9).normal(size=(1, 64, 4, 4)))
        model.anomaly_map(att).mean().backward()
        assert model.mapper.bias.grad.tolist() == [1.0]

    def test_gradients_wrt_mapper(self, f64):
        model = tiny_model(dtype=np.float64)
        att = Tensor(np.random.default_rng(10).normal(size=(2, 6, 4, 4)))
        params = list(model.mapper.named_parameters().values())
        assert grad_check(lambda: (model.anomaly_map(att) ** 2.0).mean(), params).passed


class TestParameters:
    def test_state_dict_round_trip(self):
        a, b = AtacNet(seed=1), AtacNet(seed=2)
        b.load_state_dict(a.state_dict())
        for k, v in a.state_dict().items():
            np.testing.assert_array_equal(v, b.state_dict()[k])

    def test_state_dict_mismatch(self):
        with pytest.raises(KeyError):
            AtacNet().load_state_dict({"nope": np.zeros(1)})

    def test_repeated_evaluation_bit_identical(self):
        model = AtacNet()
        x = Tensor(np.random.default_rng(11).uniform(size=(2, 1, 64, 64)))
        with strict():
            a = [t.data.tobytes() for t in model.forward_maps(x)]
            b = [t.data.tobytes() for t in model.forward_maps(x)]
        assert a == b

    def test_no_dead_stage(self):
        """Every parameter gets a nonzero gradient from a batch with both classes."""
        model = AtacNet(ModelConfig(attention=AttentionConfig(gain_init=0.1)), seed=0)
        x = np.random.default_rng(12).uniform(size=(4, 1, 64, 64))
        x[3:, :, 20:30, 20:40] = 1.0
        out = atac_forward(Tensor(x), model)
        # an unbalanced batch, so the bias contributions of the two classes cannot cancel
        batch_loss(out.score, [0, 0, 0, 1]).backward()
        for name, p in model.named_parameters().items():
            assert p.grad is not None and np.any(p.grad != 0), name

    def test_mapper_calibration(self):
        model = AtacNet(seed=4)
        x = np.random.default_rng(13).uniform(size=(8, 1, 64, 64)).astype(np.float32)
        scale = calibrate_mapper(model, x, target_std=1.0)
        assert scale > 0
        with no_grad():
            _, _, amap = model.forward_maps(Tensor(x))
        assert abs(float(amap.data.astype(np.float64).std()) - 1.0) < 1e-3

    def test_calibration_leaves_constant_map(self):
        model = AtacNet()
        model.mapper.weight.data[:] = 0
        before = model.mapper.bias.data.copy()
        assert calibrate_mapper(model, np.zeros((2, 1, 64, 64), dtype=np.float32)) == 1.0
        np.testing.assert_array_equal(model.mapper.bias.data, before)

    def test_end_to_end_gradient_through_backbone(self, f64):
        model = tiny_model(dtype=np.float64, gain=0.4)
        x = Tensor(np.random.default_rng(14).uniform(size=(2, 1, 16, 16)))
        params = [model.backbone.weights[0], model.attention.gain, model.attention.wq]
        report = grad_check(lambda: (model.forward_maps(x)[2] ** 2.0).mean(), params, n_coords=60, tol=1e-4)
        assert report.passed, report
