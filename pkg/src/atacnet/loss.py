"""Deviation scoring against a Gaussian reference and the contrastive deviation loss.

Normal samples are pulled toward the reference mean (loss ``|dev|``);
anomalies are pushed until ``|dev|`` reaches the cut-off ``k`` (loss
``max(0, k - |dev|)``, or the unclamped ``k - |dev|`` with ``hinge=False``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, make_rng, relu


@dataclass(frozen=True)
class ReferenceDistribution:
    mu: float = 0.0
    sigma: float = 1.0
    mode: str = "analytic"  # or "sampled"
    count: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("analytic", "sampled"):
            raise ValueError(f"unknown reference mode {self.mode!r}")
        if not self.sigma > 0:
            raise ValueError(f"reference sigma must be positive, got {self.sigma}")
        if self.mode == "analytic" and (self.mu, self.sigma) != (0.0, 1.0):
            raise ValueError("analytic reference is the standard Gaussian (mu=0, sigma=1)")

    @classmethod
    def sampled(cls, count: int = 5000, seed: int = 0) -> "ReferenceDistribution":
        """Mean/std of ``count`` standard-normal draws from a seeded stream."""
        draws = make_rng(seed).standard_normal(count)
        return cls(mu=float(draws.mean()), sigma=float(draws.std()), mode="sampled", count=count, seed=seed)


STANDARD = ReferenceDistribution()


@dataclass(frozen=True)
class LossConfig:
    k: float = 10.0
    hinge: bool = True

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"cut-off k must be positive, got {self.k}")


def deviation(score, ref: ReferenceDistribution = STANDARD):
    """``(score - mu) / sigma``; works on floats, arrays and tensors."""
    if not ref.sigma > 0:
        raise ValueError(f"reference sigma must be positive, got {ref.sigma}")
    return (score - ref.mu) * (1.0 / ref.sigma)


def deviation_loss(score, y, ref: ReferenceDistribution = STANDARD, cfg: LossConfig = LossConfig()):
    """Per-sample loss for a float/array score, or an elementwise tensor for a Tensor score."""
    y_arr = np.asarray(y)
    if not np.all((y_arr == 0) | (y_arr == 1)):
        raise ValueError("labels must be 0 or 1")
    if isinstance(score, Tensor):
        yt = y_arr.astype(score.dtype)
        dev = abs(deviation(score, ref))
        push = cfg.k - dev
        if cfg.hinge:
            push = relu(push)
        return dev * (1.0 - yt) + push * yt
    dev = np.abs(deviation(np.asarray(score, dtype=np.float64), ref))
    push = cfg.k - dev
    if cfg.hinge:
        push = np.maximum(push, 0.0)
    out = (1 - y_arr) * dev + y_arr * push
    return float(out) if out.ndim == 0 else out


def batch_loss(
    scores: Tensor,
    labels,
    ref: ReferenceDistribution = STANDARD,
    cfg: LossConfig = LossConfig(),
) -> Tensor:
    """Mean deviation loss over a batch of scores."""
    labels = np.asarray(labels)
    if labels.shape != (scores.shape[0],) or scores.ndim != 1:
        raise ValueError(f"{scores.shape[0]} scores but {labels.size} labels")
    return deviation_loss(scores, labels, ref, cfg).mean()
