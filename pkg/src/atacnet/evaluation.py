"""Metrics and visual diagnostics: AUROC, score histograms, Grad-CAM, heatmap export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netpbm
from .data import Sample
from .model import AtacNet
from .scoring import CropBox, ScoringConfig, atac_forward, crop_and_resize, topk_mean
from .tensor import Tensor, bilinear_resize, grad


@dataclass(frozen=True)
class ScoredSample:
    id: str
    label: int
    score: float


@dataclass
class Histogram:
    edges: np.ndarray
    normal: np.ndarray
    anomalous: np.ndarray


@dataclass
class GradCamResult:
    weights: np.ndarray  # N x K channel weights
    saliency: np.ndarray  # N x h x w, non-negative
    overlay: np.ndarray | None  # N x H x W upsampled saliency


def _split(samples):
    scores = np.array([s.score for s in samples], dtype=np.float64)
    labels = np.array([s.label for s in samples])
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return scores, labels


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], len(values)]
    ranks_sorted = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    ranks = np.empty(len(values))
    ranks[order] = ranks_sorted
    return ranks


def auroc(samples: list[ScoredSample]) -> float:
    """Mann-Whitney estimate of P(anomaly score > normal score), ties counting one half."""
    scores, labels = _split(samples)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both normal and anomalous samples")
    ranks = midranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def score_histogram(samples: list[ScoredSample], n_bins: int = 20) -> Histogram:
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    scores, labels = _split(samples)
    lo, hi = (scores.min(), scores.max()) if scores.size else (0.0, 1.0)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, n_bins + 1)
    normal, _ = np.histogram(scores[labels == 0], bins=edges)
    anomalous, _ = np.histogram(scores[labels == 1], bins=edges)
    return Histogram(edges, normal, anomalous)


def histogram_csv(hist: Histogram) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "normal", "anomalous"])
    for i in range(len(hist.normal)):
        w.writerow([repr(float(hist.edges[i])), repr(float(hist.edges[i + 1])), int(hist.normal[i]), int(hist.anomalous[i])])
    return buf.getvalue()


def gradcam(activations: Tensor, target: Tensor, out_size: tuple[int, int] | None = None) -> GradCamResult:
    """Grad-CAM over N x K x h x w activations for a scalar target.

    Channel weights are the spatial mean of d target / d A; the saliency is
    ReLU of the weighted channel sum.
    """
    (g,) = grad(target, [activations])
    a = activations.data.astype(np.float64)
    weights = g.astype(np.float64).mean(axis=(2, 3))
    saliency = np.maximum((weights[:, :, None, None] * a).sum(axis=1), 0.0)
    overlay = None
    if out_size is not None:
        overlay = np.maximum(bilinear_resize(saliency[:, None], *out_size).data[:, 0], 0.0)
    return GradCamResult(weights, saliency, overlay)


def normalize_map(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def export_heatmap(
    amap: np.ndarray, image: np.ndarray, path: str | Path, omega: float | None = None, alpha: float = 0.6
) -> dict[str, Path]:
    """Write ``<path>_map.pgm``, ``<path>_overlay.ppm`` and, with ``omega``, ``<path>_mask.pgm``."""
    stem = Path(path)
    if not stem.parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {stem.parent}")
    norm = normalize_map(amap)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    H, W = img.shape[:2]
    up = np.clip(bilinear_resize(norm[None, None], H, W).data[0, 0].astype(np.float64), 0, 1)
    heat = np.stack([np.ones_like(up), np.zeros_like(up), np.zeros_like(up)], axis=2)
    weight = (alpha * up)[:, :, None]
    overlay = (1 - weight) * img + weight * heat
    paths = {"map": stem.with_name(stem.name + "_map.pgm"), "overlay": stem.with_name(stem.name + "_overlay.ppm")}
    netpbm.write_image(paths["map"], norm)
    netpbm.write_image(paths["overlay"], overlay)
    if omega is not None:
        paths["mask"] = stem.with_name(stem.name + "_mask.pgm")
        netpbm.write_image(paths["mask"], (norm > omega).astype(np.float64))
    return paths


# ---------------------------------------------------------------- zoom motivation
def _box_mass(saliency: np.ndarray, box: tuple[int, int, int, int]) -> float:
    x0, y0, x1, y1 = box
    total = saliency.sum()
    if total <= 0 or x1 <= x0 or y1 <= y0:
        return 0.0
    return float(saliency[y0:y1, x0:x1].sum() / total)


def map_box_into_crop(gt: tuple[int, int, int, int], crop: CropBox, size: tuple[int, int]) -> tuple[int, int, int, int]:
    """Ground-truth pixel box expressed in the resized crop's coordinates (clipped)."""
    H, W = size
    sx = W / (crop.x1 - crop.x0)
    sy = H / (crop.y1 - crop.y0)
    x0 = int(np.clip(np.floor((gt[0] - crop.x0) * sx), 0, W))
    y0 = int(np.clip(np.floor((gt[1] - crop.y0) * sy), 0, H))
    x1 = int(np.clip(np.ceil((gt[2] - crop.x0) * sx), 0, W))
    y1 = int(np.clip(np.ceil((gt[3] - crop.y0) * sy), 0, H))
    return x0, y0, x1, y1


def zoom_saliency_mass(model: AtacNet, sample: Sample, scoring: ScoringConfig | None = None) -> tuple[float, float]:
    """Fraction of Grad-CAM mass inside the ground-truth defect box, raw vs attention-cropped input.

    The target for each view is the pooled anomaly score of that view alone;
    activations are the backbone features.
    """
    scoring = scoring or ScoringConfig()
    meta = sample.meta
    gt = (meta["x0"], meta["y0"], meta["x1"], meta["y1"])
    x = Tensor(sample.image.transpose(2, 0, 1)[None])
    H, W = x.shape[2:]
    box = atac_forward(x, model, scoring).boxes[0]

    def mass(inp: Tensor, region):
        f = model.feature_extract(inp)
        target = topk_mean(model.anomaly_map(model.attention_augment(f)), scoring.topk_fraction).sum()
        cam = gradcam(f, target, (H, W))
        return _box_mass(cam.overlay[0], region)

    raw = mass(x, gt)
    crop = mass(crop_and_resize(x, box), map_box_into_crop(gt, box, (H, W)))
    return raw, crop


__all__ = [
    "ScoredSample",
    "Histogram",
    "GradCamResult",
    "auroc",
    "midranks",
    "score_histogram",
    "histogram_csv",
    "gradcam",
    "normalize_map",
    "export_heatmap",
    "zoom_saliency_mass",
    "map_box_into_crop",
]
