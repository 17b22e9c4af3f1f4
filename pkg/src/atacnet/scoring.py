"""Attention-guided cropping and the two-pass anomaly score.

Pass 1 scores the raw image and yields the attended features.  Their channel
mean, min-max normalized per sample and thresholded at ``omega``, gives the
active cells; the bounding box of those cells (padded, scaled to pixels,
floored to a minimum size) is cropped out of the image and resized back to the
input resolution.  Pass 2 scores the crop with the same parameters.  Each map
is pooled by the mean of its top-K cells and the two pooled values are
averaged.

The crop box is a discrete function of the parameters, so it is computed from
detached values and gradients reach the parameters only through the two score
maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import AtacNet
from .tensor import Tensor, bilinear_resize, no_grad

# relative spread below which a map counts as constant
DEGENERATE_RTOL = 1e-6


@dataclass
class ScoringConfig:
    omega: float = 0.4
    topk_fraction: float = 0.10
    margin: float = 0.10
    min_crop_fraction: float = 0.25
    two_pass: bool = True

    def __post_init__(self):
        if not 0.0 < self.omega < 1.0:
            raise ValueError(f"omega must lie in (0, 1), got {self.omega}")
        if not 0.0 < self.topk_fraction <= 1.0:
            raise ValueError(f"topk_fraction must lie in (0, 1], got {self.topk_fraction}")
        if self.margin < 0 or not 0.0 <= self.min_crop_fraction <= 1.0:
            raise ValueError("margin must be >= 0 and min_crop_fraction in [0, 1]")

    @property
    def policy(self) -> "CropPolicy":
        return CropPolicy(self.margin, self.min_crop_fraction)


@dataclass(frozen=True)
class CropPolicy:
    margin: float = 0.10
    min_fraction: float = 0.25


@dataclass(frozen=True)
class CropBox:
    """Pixel rectangle ``[y0, y1) x [x0, x1)``.

    ``source_cells`` is the tight ``(row0, col0, row1, col1)`` cell box
    (inclusive-exclusive) it came from, or ``None`` for the full-image fallback.
    """

    x0: int
    y0: int
    x1: int
    y1: int
    source_cells: tuple[int, int, int, int] | None = None

    @property
    def is_fallback(self) -> bool:
        return self.source_cells is None

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    @classmethod
    def full(cls, height: int, width: int) -> "CropBox":
        return cls(0, 0, width, height, None)


@dataclass
class AttentionMap:
    values: np.ndarray  # N x h x w, min-max normalized
    pre_norm: np.ndarray  # N x h x w, raw channel mean


@dataclass
class AtacOutput:
    score: Tensor  # N
    pooled_raw: Tensor  # N, top-K mean of the raw-image map
    pooled_crop: Tensor  # N, top-K mean of the crop map (equals pooled_raw in single-pass mode)
    map_raw: Tensor  # N x 1 x h x w
    map_crop: Tensor | None
    attention: AttentionMap
    boxes: list[CropBox]
    crops: Tensor | None = None
    attended_raw: Tensor | None = field(default=None, repr=False)


def channel_mean_map(att: Tensor | np.ndarray) -> AttentionMap:
    """Channel mean of the attended features plus its per-sample min-max normalization.

    A map whose spread is negligible normalizes to all zeros.
    """
    a = att.data if isinstance(att, Tensor) else np.asarray(att)
    pre = a.astype(np.float64).mean(axis=1)
    lo = pre.min(axis=(1, 2), keepdims=True)
    hi = pre.max(axis=(1, 2), keepdims=True)
    spread = hi - lo
    degenerate = spread <= DEGENERATE_RTOL * np.maximum(1.0, np.abs(hi))
    safe = np.where(degenerate, 1.0, spread)
    values = np.where(degenerate, 0.0, (pre - lo) / safe)
    return AttentionMap(values=values, pre_norm=pre)


def threshold_mask(values: np.ndarray, omega: float) -> np.ndarray:
    return np.asarray(values) > omega


def _grow(lo: int, hi: int, need: int, limit: int) -> tuple[int, int]:
    if hi - lo >= need:
        return lo, hi
    extra = need - (hi - lo)
    lo -= extra // 2
    hi += extra - extra // 2
    if lo < 0:
        hi, lo = hi - lo, 0
    if hi > limit:
        lo, hi = lo - (hi - limit), limit
    return max(lo, 0), hi


def extract_crop_box(
    mask: np.ndarray,
    image_dims: tuple[int, int],
    map_dims: tuple[int, int] | None = None,
    policy: CropPolicy = CropPolicy(),
) -> CropBox:
    """Bounding box of the active cells mapped to image pixels.

    The tight cell box is padded by ``policy.margin`` of the map extent per
    side, scaled by ``H/h`` and ``W/w``, clamped, and grown (centered) to at
    least ``policy.min_fraction`` of each image side.  An empty mask yields the
    full image.
    """
    mask = np.asarray(mask, dtype=bool)
    H, W = image_dims
    h, w = map_dims if map_dims is not None else mask.shape
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} disagrees with map dims {(h, w)}")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return CropBox.full(H, W)
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    c0, c1 = int(cols[0]), int(cols[-1]) + 1
    my, mx = policy.margin * h, policy.margin * w
    y0 = max(0, math.floor((r0 - my) * H / h + 1e-9))
    y1 = min(H, math.ceil((r1 + my) * H / h - 1e-9))
    x0 = max(0, math.floor((c0 - mx) * W / w + 1e-9))
    x1 = min(W, math.ceil((c1 + mx) * W / w - 1e-9))
    y0, y1 = _grow(y0, y1, min(H, math.ceil(policy.min_fraction * H)), H)
    x0, x1 = _grow(x0, x1, min(W, math.ceil(policy.min_fraction * W)), W)
    return CropBox(x0, y0, x1, y1, (r0, c0, r1, c1))


def crop_and_resize(x: Tensor | np.ndarray, boxes: CropBox | list[CropBox]) -> Tensor:
    """Crop each NCHW sample to its box and resample back to H x W (a graph constant)."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    n, _, H, W = xd.shape
    if isinstance(boxes, CropBox):
        boxes = [boxes] * n
    if len(boxes) != n:
        raise ValueError(f"{len(boxes)} boxes for a batch of {n}")
    out = []
    for i, b in enumerate(boxes):
        if not (0 <= b.x0 < b.x1 <= W and 0 <= b.y0 < b.y1 <= H):
            raise ValueError(f"crop box {b.as_tuple()} invalid for a {H}x{W} image")
        patch = xd[i : i + 1, :, b.y0 : b.y1, b.x0 : b.x1]
        out.append(bilinear_resize(patch, H, W).data)
    return Tensor(np.concatenate(out, axis=0), dtype=xd.dtype)


def topk_count(fraction: float, cells: int) -> int:
    return max(1, math.floor(fraction * cells + 1e-9))


def topk_mean(amap: Tensor, fraction: float = 0.10) -> Tensor:
    """Mean of the K largest cells of each sample's map, K = max(1, floor(fraction*h*w)).

    Ties are broken toward the lowest flat index.  The gradient is 1/K on the
    selected cells and zero elsewhere.
    """
    n = amap.shape[0]
    flat = amap.data.reshape(n, -1)
    k = topk_count(fraction, flat.shape[1])
    order = np.argsort(-flat, axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(flat, order, axis=1)
    out = picked.mean(axis=1)
    shape, dtype = amap.shape, amap.dtype

    def backward(g):
        gflat = np.zeros((n, flat.shape[1]), dtype=dtype)
        np.put_along_axis(gflat, order, (g / k)[:, None].astype(dtype), axis=1)
        return (gflat.reshape(shape),)

    return Tensor._from_op(np.asarray(out, dtype=dtype), (amap,), backward, "topk_mean")


def crop_boxes(attention: AttentionMap, image_dims: tuple[int, int], cfg: ScoringConfig) -> list[CropBox]:
    map_dims = attention.values.shape[1:]
    return [
        extract_crop_box(threshold_mask(v, cfg.omega), image_dims, map_dims, cfg.policy) for v in attention.values
    ]


def atac_forward(
    x: Tensor | np.ndarray,
    model: AtacNet,
    cfg: ScoringConfig | None = None,
    boxes: list[CropBox] | None = None,
) -> AtacOutput:
    """Score an NCHW batch.  ``boxes`` overrides the attention-derived crops."""
    cfg = cfg or ScoringConfig()
    x = x if isinstance(x, Tensor) else Tensor(x)
    _, att, map_raw = model.forward_maps(x)
    attention = channel_mean_map(att)
    if boxes is None:
        boxes = crop_boxes(attention, x.shape[2:], cfg)
    pooled_raw = topk_mean(map_raw, cfg.topk_fraction)
    if not cfg.two_pass:
        return AtacOutput(pooled_raw, pooled_raw, pooled_raw, map_raw, None, attention, boxes, None, att)
    with no_grad():
        crops = crop_and_resize(x, boxes)
    _, _, map_crop = model.forward_maps(crops)
    pooled_crop = topk_mean(map_crop, cfg.topk_fraction)
    score = (pooled_raw + pooled_crop) * 0.5
    return AtacOutput(score, pooled_raw, pooled_crop, map_raw, map_crop, attention, boxes, crops, att)
