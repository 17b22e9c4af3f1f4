"""Deviation against the Gaussian reference and the contrastive deviation loss."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atacnet.loss import STANDARD, LossConfig, ReferenceDistribution, batch_loss, deviation, deviation_loss
from atacnet.tensor import Tensor, grad_check


def free_score_descent(steps=200, lr=0.1, k=10.0):
    """10 normals and 2 anomalies whose scores are free parameters, trained with plain gradient descent."""
    scores = Tensor(np.r_[np.linspace(-2, 2, 10), 0.5, -0.3], requires_grad=True, dtype=np.float64)
    labels = np.r_[np.zeros(10), np.ones(2)]
    cfg = LossConfig(k=k)
    for _ in range(steps):
        scores.grad = None
        # sum, not mean, so each score moves at the full step size
        (deviation_loss(scores, labels, STANDARD, cfg).sum()).backward()
        scores.data = scores.data - lr * scores.grad
    return np.abs(scores.data), labels


class TestReference:
    def test_analytic_is_standard(self):
        assert (STANDARD.mu, STANDARD.sigma, STANDARD.mode) == (0.0, 1.0, "analytic")

    def test_analytic_must_be_standard(self):
        with pytest.raises(ValueError):
            ReferenceDistribution(mu=1.0, sigma=2.0)

    def test_sigma_positive(self):
        with pytest.raises(ValueError):
            ReferenceDistribution(mu=0.0, sigma=0.0, mode="sampled")

    def test_sampled_is_seeded(self):
        a = ReferenceDistribution.sampled(5000, seed=3)
        b = ReferenceDistribution.sampled(5000, seed=3)
        assert a == b
        assert abs(a.mu) < 0.05 and abs(a.sigma - 1) < 0.05


class TestDeviation:
    def test_zero(self):
        assert deviation(0.0) == 0.0

    def test_ten(self):
        assert deviation(10.0) == 10.0

    def test_custom_reference(self):
        assert deviation(3.0, ReferenceDistribution(1.0, 2.0, mode="sampled")) == 1.0


class TestDeviationLoss:
    def test_normal_at_mean(self):
        assert deviation_loss(0.0, 0) == 0.0

    def test_anomaly_at_cutoff(self):
        assert deviation_loss(10.0, 1) == 0.0

    def test_anomaly_inside_cutoff(self):
        assert deviation_loss(4.0, 1) == 6.0

    def test_symmetric_for_normals(self):
        assert deviation_loss(-3.0, 0) == 3.0

    def test_literal_form_goes_negative(self):
        assert deviation_loss(12.0, 1, cfg=LossConfig(hinge=False)) == -2.0
        assert deviation_loss(12.0, 1) == 0.0

    def test_rejects_non_binary_labels(self):
        with pytest.raises(ValueError):
            deviation_loss(1.0, 2)

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            LossConfig(k=0.0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1e3, 1e3), st.sampled_from([0, 1]))
    def test_non_negative_with_hinge(self, score, y):
        assert deviation_loss(score, y) >= 0.0

    def test_normal_gradient_points_to_mean(self, f64):
        s = Tensor([-2.0, 3.0], requires_grad=True)
        deviation_loss(s, [0, 0]).sum().backward()
        assert s.grad.tolist() == [-1.0, 1.0]

    def test_anomaly_gradient(self, f64):
        s = Tensor([4.0, -4.0, 11.0], requires_grad=True)
        deviation_loss(s, [1, 1, 1]).sum().backward()
        # inside the cut-off |dev| is pushed up; beyond it the hinge is flat
        assert s.grad.tolist() == [-1.0, 1.0, 0.0]

    def test_finite_differences(self, f64):
        s = Tensor([0.7, -1.3, 4.2, -8.5, 12.0])
        y = [0, 0, 1, 1, 1]
        assert grad_check(lambda: deviation_loss(s, y).sum(), s).passed


class TestBatchLoss:
    def test_all_normal_at_zero(self):
        assert batch_loss(Tensor(np.zeros(4)), [0, 0, 0, 0]).item() == 0.0

    def test_both_at_optimum(self):
        assert batch_loss(Tensor([0.0, 10.0]), [0, 1]).item() == 0.0

    def test_loop_oracle(self, f64):
        rng = np.random.default_rng(0)
        scores = rng.normal(scale=6, size=32)
        labels = rng.integers(0, 2, size=32)
        oracle = np.mean([abs(s) if y == 0 else max(0.0, 10 - abs(s)) for s, y in zip(scores, labels)])
        assert abs(batch_loss(Tensor(scores), labels).item() - oracle) <= 1e-9

    def test_gradient_reaches_every_score(self, f64):
        s = Tensor([0.5, -0.5, 3.0, -3.0], requires_grad=True)
        batch_loss(s, [0, 0, 1, 1]).backward()
        assert np.all(s.grad != 0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            batch_loss(Tensor(np.zeros(3)), [0, 1])


class TestFreeScoreOptimization:
    def test_reaches_targets_within_200_steps(self):
        dev, labels = free_score_descent()
        assert np.all(dev[labels == 0] < 0.1)
        assert np.all(dev[labels == 1] > 10 - 0.1)
