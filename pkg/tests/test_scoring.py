"""Attention map, crop box, top-K pooling and the two-pass score."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atacnet.model import AtacNet
from atacnet.scoring import (
    CropBox,
    CropPolicy,
    ScoringConfig,
    atac_forward,
    channel_mean_map,
    crop_and_resize,
    extract_crop_box,
    threshold_mask,
    topk_count,
    topk_mean,
)
from atacnet.tensor import Tensor, bilinear_resize, grad_check, strict

from conftest import tiny_model

NO_MARGIN = CropPolicy(margin=0.0, min_fraction=0.0)


def sort_topk_oracle(values, fraction):
    k = max(1, int(np.floor(fraction * values.size)))
    return float(np.sort(values.reshape(-1))[::-1][:k].mean()), k


def brute_force_box(mask):
    """Scan every cell and keep the extreme active coordinates."""
    r0 = c0 = None
    r1 = c1 = None
    for i in range(mask.shape[0]):
        for j in range(mask.shape[1]):
            if mask[i, j]:
                r0 = i if r0 is None else min(r0, i)
                c0 = j if c0 is None else min(c0, j)
                r1 = i + 1 if r1 is None else max(r1, i + 1)
                c1 = j + 1 if c1 is None else max(c1, j + 1)
    return None if r0 is None else (r0, c0, r1, c1)


class TestChannelMeanMap:
    def test_constant_is_degenerate(self):
        amap = channel_mean_map(np.full((1, 3, 4, 4), 5.0))
        assert np.all(amap.pre_norm == 5.0)
        assert np.all(amap.values == 0.0)

    def test_cancellation(self):
        a = np.random.default_rng(0).normal(size=(1, 1, 5, 5))
        amap = channel_mean_map(np.concatenate([a, -a], axis=1))
        assert np.all(amap.pre_norm == 0.0)

    def test_loop_oracle(self):
        att = np.random.default_rng(1).normal(size=(1, 8, 6, 6))
        amap = channel_mean_map(att)
        oracle = np.zeros((6, 6))
        for i in range(6):
            for j in range(6):
                oracle[i, j] = sum(att[0, c, i, j] for c in range(8)) / 8
        np.testing.assert_allclose(amap.pre_norm[0], oracle, atol=1e-9)
        assert amap.values.min() == 0.0 and amap.values.max() == 1.0

    def test_per_sample_normalization(self):
        att = np.random.default_rng(2).normal(size=(3, 4, 5, 5))
        att[1] *= 100
        values = channel_mean_map(att).values
        np.testing.assert_allclose(values.max(axis=(1, 2)), 1.0)
        np.testing.assert_allclose(values.min(axis=(1, 2)), 0.0)


class TestThresholdMask:
    def test_single_hot_cell(self):
        v = np.zeros((4, 4))
        v[1, 2] = 1.0
        assert np.argwhere(threshold_mask(v, 0.4)).tolist() == [[1, 2]]

    def test_degenerate_map_gives_empty_mask(self):
        assert not threshold_mask(np.zeros((4, 4)), 0.4).any()

    def test_elementwise_oracle(self):
        v = np.random.default_rng(3).uniform(size=(7, 7))
        expected = [[v[i, j] > 0.4 for j in range(7)] for i in range(7)]
        assert threshold_mask(v, 0.4).tolist() == expected

    def test_boundary_is_exclusive(self):
        assert not threshold_mask(np.array([[0.4]]), 0.4).any()


class TestExtractCropBox:
    def test_scale_arithmetic(self):
        mask = np.zeros((8, 8), bool)
        mask[2:6, 3:7] = True
        box = extract_crop_box(mask, (64, 64), (8, 8), NO_MARGIN)
        assert (box.y0, box.y1, box.x0, box.x1) == (16, 48, 24, 56)
        assert box.source_cells == (2, 3, 6, 7)

    def test_empty_mask_falls_back(self):
        box = extract_crop_box(np.zeros((8, 8), bool), (64, 48), (8, 8))
        assert box.as_tuple() == (0, 0, 48, 64) and box.is_fallback

    def test_all_active_is_full_image(self):
        box = extract_crop_box(np.ones((8, 8), bool), (64, 64), (8, 8), CropPolicy(margin=0.3))
        assert box.as_tuple() == (0, 0, 64, 64)

    def test_margin_expands(self):
        mask = np.zeros((8, 8), bool)
        mask[4, 4] = True
        box = extract_crop_box(mask, (64, 64), (8, 8), CropPolicy(margin=0.125, min_fraction=0.0))
        # one cell of margin on each side
        assert box.as_tuple() == (24, 24, 48, 48)

    def test_minimum_size_floor(self):
        mask = np.zeros((8, 8), bool)
        mask[0, 0] = True
        box = extract_crop_box(mask, (64, 64), (8, 8), CropPolicy(margin=0.0, min_fraction=0.25))
        assert box.as_tuple() == (0, 0, 16, 16)

    def test_fallback_is_idempotent(self):
        box = extract_crop_box(np.zeros((4, 4), bool), (32, 32))
        crop = crop_and_resize(np.random.default_rng(4).uniform(size=(1, 1, 32, 32)), box)
        again = extract_crop_box(np.zeros((4, 4), bool), crop.shape[2:])
        assert again.as_tuple() == box.as_tuple()

    def test_brute_force_scan(self):
        rng = np.random.default_rng(5)
        for trial in range(500):
            h, w = rng.integers(1, 10, size=2)
            density = rng.uniform(0.0, 0.5)
            mask = rng.uniform(size=(h, w)) < density
            cells = brute_force_box(mask)
            box = extract_crop_box(mask, (h * 8, w * 8), (h, w), NO_MARGIN)
            if cells is None:
                assert box.is_fallback
                continue
            assert box.source_cells == cells
            r0, c0, r1, c1 = cells
            assert box.as_tuple() == (c0 * 8, r0 * 8, c1 * 8, r1 * 8)

    @settings(max_examples=100, deadline=None)
    @given(
        st.integers(1, 8), st.integers(1, 8), st.integers(8, 80), st.integers(8, 80),
        st.floats(0, 0.5), st.floats(0, 1), st.integers(0, 2**31),
    )
    def test_box_invariants(self, h, w, H, W, margin, floor, seed):
        mask = np.random.default_rng(seed).uniform(size=(h, w)) < 0.3
        box = extract_crop_box(mask, (H, W), (h, w), CropPolicy(margin, floor))
        assert 0 <= box.x0 < box.x1 <= W
        assert 0 <= box.y0 < box.y1 <= H
        assert box.x1 - box.x0 >= min(W, int(np.ceil(floor * W)))
        assert box.y1 - box.y0 >= min(H, int(np.ceil(floor * H)))


class TestCropAndResize:
    def test_full_box_is_identity(self):
        x = np.random.default_rng(6).uniform(size=(2, 1, 16, 16)).astype(np.float32)
        out = crop_and_resize(x, CropBox.full(16, 16))
        assert out.data.tobytes() == x.tobytes()

    def test_constant_image(self):
        out = crop_and_resize(np.full((1, 1, 32, 32), 0.7), CropBox(3, 5, 20, 17))
        np.testing.assert_allclose(out.data, 0.7, atol=1e-6)

    def test_checkerboard_quadrant(self):
        yy, xx = np.mgrid[0:64, 0:64]
        board = ((yy // 8 + xx // 8) % 2).astype(np.float64)[None, None]
        out = crop_and_resize(board, CropBox(0, 0, 32, 32)).data
        expected = bilinear_resize(board[:, :, :32, :32], 64, 64).data
        np.testing.assert_array_equal(out, expected)

    def test_invalid_box(self):
        with pytest.raises(ValueError):
            crop_and_resize(np.zeros((1, 1, 8, 8)), CropBox(0, 0, 9, 8))


class TestTopkMean:
    def test_full_selection_is_mean(self):
        m = np.random.default_rng(7).normal(size=(1, 1, 5, 5))
        np.testing.assert_allclose(topk_mean(Tensor(m), 1.0).data, m.mean(), rtol=1e-6)

    def test_hand_computation(self):
        assert topk_mean(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)), 0.5).item() == 3.5

    def test_seven_by_seven(self, f64):
        m = np.random.default_rng(8).normal(size=(7, 7))
        value, k = sort_topk_oracle(m, 0.1)
        assert k == 4 == topk_count(0.1, 49)
        assert topk_mean(Tensor(m[None, None]), 0.1).item() == value

    def test_sort_oracle_exact(self, f64):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            h, w = rng.integers(1, 12, size=2)
            m = rng.normal(size=(h, w))
            if rng.uniform() < 0.2:
                m = np.round(m)  # plenty of ties
            frac = float(rng.choice([0.05, 0.1, 0.25, 0.5, 1.0]))
            value, _ = sort_topk_oracle(m, frac)
            assert topk_mean(Tensor(m[None, None]), frac).item() == value

    def test_k_rounding(self):
        assert topk_count(0.1, 16) == 1
        assert topk_count(0.1, 64) == 6
        assert topk_count(0.1, 5) == 1
        assert topk_count(0.1, 100) == 10

    def test_ties_pick_lowest_index(self):
        m = Tensor(np.array([[[[2.0, 5.0], [5.0, 1.0]]]]), requires_grad=True)
        topk_mean(m, 0.25).sum().backward()
        assert m.grad.reshape(-1).tolist() == [0.0, 1.0, 0.0, 0.0]

    def test_gradient_sums_to_one(self, f64):
        m = Tensor(np.random.default_rng(10).normal(size=(3, 1, 6, 6)), requires_grad=True)
        topk_mean(m, 0.1).sum().backward()
        np.testing.assert_allclose(m.grad.sum(axis=(1, 2, 3)), 1.0, atol=1e-12)
        assert set(np.unique(m.grad).tolist()) == {0.0, 1.0 / 3}

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 10), st.integers(1, 10), st.floats(0.01, 1.0), st.integers(0, 2**31))
    def test_at_least_mean(self, h, w, frac, seed):
        m = np.random.default_rng(seed).normal(size=(1, 1, h, w))
        assert topk_mean(Tensor(m, dtype=np.float64), frac).item() >= m.mean() - 1e-12

    def test_finite_differences(self, f64):
        m = Tensor(np.random.default_rng(11).normal(size=(2, 1, 5, 5)))
        assert grad_check(lambda: (topk_mean(m, 0.2) ** 2.0).sum(), m).passed


class TestAtacForward:
    def test_constant_network(self):
        model = tiny_model()
        model.mapper.weight.data[:] = 0
        model.mapper.bias.data[:] = 0.75
        out = atac_forward(np.random.default_rng(12).uniform(size=(2, 1, 16, 16)), model)
        assert np.all(out.map_raw.data == np.float32(0.75))
        assert np.all(out.map_crop.data == np.float32(0.75))
        assert np.all(out.score.data == np.float32(0.75))

    def test_degenerate_attention_falls_back(self):
        """A constant image makes every feature constant, so the crop is the whole image."""
        model = tiny_model()
        out = atac_forward(np.full((1, 1, 16, 16), 0.5), model)
        assert out.boxes[0].is_fallback
        assert out.map_crop.data.tobytes() == out.map_raw.data.tobytes()
        assert out.score.item() == topk_mean(out.map_raw, 0.1).item()

    def test_composition_oracle(self):
        model = AtacNet(seed=5)
        x = np.random.default_rng(13).uniform(size=(2, 1, 64, 64)).astype(np.float32)
        cfg = ScoringConfig()
        out = atac_forward(x, model, cfg)

        _, att, map1 = model.forward_maps(Tensor(x))
        amap = channel_mean_map(att)
        boxes = [
            extract_crop_box(threshold_mask(amap.values[i], 0.4), (64, 64), amap.values.shape[1:], cfg.policy)
            for i in range(2)
        ]
        _, _, map2 = model.forward_maps(crop_and_resize(x, boxes))
        expected = (topk_mean(map1, 0.1) + topk_mean(map2, 0.1)) * 0.5
        assert out.score.data.tobytes() == expected.data.tobytes()
        assert [b.as_tuple() for b in out.boxes] == [b.as_tuple() for b in boxes]

    def test_score_is_mean_of_components(self):
        out = atac_forward(np.random.default_rng(14).uniform(size=(3, 1, 16, 16)), tiny_model(gain=0.3))
        np.testing.assert_array_equal(out.score.data, (out.pooled_raw.data + out.pooled_crop.data) * np.float32(0.5))

    def test_single_pass_variant(self):
        out = atac_forward(np.random.default_rng(15).uniform(size=(2, 1, 16, 16)), tiny_model(), ScoringConfig(two_pass=False))
        assert out.map_crop is None
        assert out.score.data.tobytes() == out.pooled_raw.data.tobytes()

    def test_passes_share_parameters(self, monkeypatch):
        """Both passes read the identical parameter tensors (checked by identity)."""
        model = tiny_model()
        seen = []
        original = model.forward_maps

        def spy(x):
            seen.append([id(p) for p in model.parameters()])
            return original(x)

        monkeypatch.setattr(model, "forward_maps", spy)
        out = atac_forward(np.random.default_rng(16).uniform(size=(1, 1, 16, 16)), model)
        assert len(seen) == 2 and seen[0] == seen[1]
        # gradient from the crop pass alone lands on the shared leaves
        out.pooled_crop.sum().backward()
        assert all(p.grad is not None for p in model.mapper.named_parameters().values())

    def test_deterministic(self):
        model = AtacNet(seed=2)
        x = np.random.default_rng(17).uniform(size=(2, 1, 64, 64)).astype(np.float32)
        with strict():
            a = atac_forward(x, model).score.data.tobytes()
            b = atac_forward(x, model).score.data.tobytes()
        assert a == b

    def test_gradient_check_with_frozen_box(self, f64):
        """Full score w.r.t. every parameter; the crop box is pinned across probes."""
        model = tiny_model(dtype=np.float64, gain=0.5)
        x = Tensor(np.random.default_rng(18).uniform(size=(1, 1, 16, 16)))
        boxes = atac_forward(x, model).boxes

        def frozen_box_ok():
            return [b.as_tuple() for b in atac_forward(x, model).boxes] == [b.as_tuple() for b in boxes]

        report = grad_check(
            lambda: atac_forward(x, model, boxes=boxes).score.sum(),
            model.parameters(),
            tol=1e-3,
            n_coords=120,
            is_valid_probe=frozen_box_ok,
        )
        assert report.passed, report
