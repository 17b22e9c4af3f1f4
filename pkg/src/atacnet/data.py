"""Datasets: manifests, loading, weak-supervision episodes, Cut-Mix and synthetic defects."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from .tensor import bilinear_resize, make_rng

ORIGINS = ("real", "cutmix", "synthetic")


@dataclass
class Sample:
    image: np.ndarray  # H x W x C, float32 in [0, 1]
    label: int
    origin: str = "real"
    id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, int]]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------- manifests
def read_manifest(path: str | os.PathLike, split: str | None = None) -> DatasetManifest:
    """Parse ``relative/path<TAB>label`` lines; ``#`` starts a comment."""
    path = Path(path)
    entries = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1].strip() not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected 'relative/path<TAB>0|1', got {raw!r}")
        entries.append((parts[0], int(parts[1])))
    return DatasetManifest(path.parent, entries, split or path.stem)


def write_manifest(path: str | os.PathLike, entries: list[tuple[str, int]], comment: str | None = None) -> None:
    lines = [f"# {comment}"] if comment else []
    lines += [f"{rel}\t{label}" for rel, label in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sidecar(path: str | os.PathLike) -> dict:
    meta = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            value = value.strip()
            meta[key.strip()] = int(value) if value.lstrip("-").isdigit() else value
    return meta


def _convert_channels(img: np.ndarray, channels: int | None) -> np.ndarray:
    if channels is None or img.shape[2] == channels:
        return img
    if channels == 1:
        return img.mean(axis=2, keepdims=True)
    if img.shape[2] == 1:
        return np.repeat(img, channels, axis=2)
    raise ValueError(f"cannot convert {img.shape[2]} channels to {channels}")


def prepare_image(img: np.ndarray, resolution: int | None = None, channels: int | None = None) -> np.ndarray:
    img = _convert_channels(np.asarray(img, dtype=np.float64), channels)
    if resolution is not None and img.shape[:2] != (resolution, resolution):
        nchw = img.transpose(2, 0, 1)[None]
        img = bilinear_resize(nchw, resolution, resolution).data.astype(np.float64)[0].transpose(1, 2, 0)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def load_dataset(manifest: DatasetManifest, resolution: int | None = None, channels: int | None = None) -> list[Sample]:
    """Decode every manifest entry, in manifest order, into a :class:`Sample`.

    Images are resized bilinearly to ``resolution`` when given.  A sidecar
    ``<stem>.txt`` next to the image marks it as synthetic and is kept in
    ``Sample.meta``.
    """
    samples = []
    for rel, label in manifest.entries:
        path = manifest.root / rel
        img = prepare_image(netpbm.read_image(path), resolution, channels)
        sidecar = path.with_suffix(".txt")
        meta = read_sidecar(sidecar) if sidecar.exists() else {}
        origin = "synthetic" if "defect_kind" in meta else "real"
        samples.append(Sample(img, label, origin, rel, meta))
    return samples


# ---------------------------------------------------------------- episodes
def sample_episode(normals: list[Sample], anomalies: list[Sample], n_anomalies: int, seed: int) -> list[Sample]:
    """All normals plus ``n_anomalies`` anomalies drawn uniformly without replacement."""
    if n_anomalies > len(anomalies):
        raise ValueError(f"episode needs {n_anomalies} anomalies but only {len(anomalies)} are available")
    rng = make_rng(seed)
    picked = sorted(rng.choice(len(anomalies), size=n_anomalies, replace=False).tolist())
    episode = list(normals) + [anomalies[i] for i in picked]
    ids = [s.id for s in episode]
    if len(set(ids)) != len(ids):
        raise ValueError("episode contains duplicate sample ids")
    return episode


# ---------------------------------------------------------------- cut-mix
@dataclass(frozen=True)
class CutMixConfig:
    area_range: tuple[float, float] = (0.02, 0.15)
    aspect_range: tuple[float, float] = (1 / 3, 3.0)
    source: str = "other-normal-image"  # or "same-image-offset"
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.area_range
        if not 0 < lo <= hi < 1 + 1e-12:
            raise ValueError(f"area fractions must lie in (0, 1], got {self.area_range}")
        if not 0 < self.aspect_range[0] <= self.aspect_range[1]:
            raise ValueError(f"bad aspect ratio range {self.aspect_range}")
        if self.source not in ("other-normal-image", "same-image-offset"):
            raise ValueError(f"unknown cut-mix source {self.source!r}")


@dataclass(frozen=True)
class PasteRecord:
    src_y: int
    src_x: int
    dst_y: int
    dst_x: int
    height: int
    width: int
    degenerate: bool


def cutmix_box(shape: tuple[int, int], cfg: CutMixConfig, rng: np.random.Generator) -> tuple[int, int]:
    H, W = shape
    area = rng.uniform(*cfg.area_range) * H * W
    lo, hi = np.log(cfg.aspect_range[0]), np.log(cfg.aspect_range[1])
    aspect = float(np.exp(rng.uniform(lo, hi))) if hi > lo else float(np.exp(lo))
    h = max(1, int(round(math.sqrt(area / aspect))))
    w = max(1, int(round(math.sqrt(area * aspect))))
    if h > H or w > W:
        raise ValueError(f"cut-mix box {h}x{w} does not fit a {H}x{W} image")
    return h, w


def cutmix(
    base: Sample,
    donor: Sample,
    cfg: CutMixConfig,
    rng: np.random.Generator,
    placement: tuple[int, int, int, int] | None = None,
) -> tuple[Sample, PasteRecord]:
    """Paste a random rectangle of ``donor`` onto normal ``base``; the result is labeled 1.

    ``placement = (src_y, src_x, dst_y, dst_x)`` pins the rectangle positions.
    """
    if base.label != 0:
        raise ValueError("cut-mix base must be a normal sample")
    H, W = base.image.shape[:2]
    if donor.image.shape != base.image.shape:
        raise ValueError(f"donor shape {donor.image.shape} differs from base {base.image.shape}")
    h, w = cutmix_box((H, W), cfg, rng)
    if placement is None:
        sy, sx = int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
        dy, dx = int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
    else:
        sy, sx, dy, dx = placement
    out = base.image.copy()
    out[dy : dy + h, dx : dx + w] = donor.image[sy : sy + h, sx : sx + w]
    degenerate = bool(np.array_equal(out, base.image))
    record = PasteRecord(sy, sx, dy, dx, h, w, degenerate)
    meta = {"paste": dataclasses.asdict(record), "base": base.id, "donor": donor.id}
    return Sample(np.clip(out, 0.0, 1.0), 1, "cutmix", f"{base.id}#cutmix", meta), record


# ---------------------------------------------------------------- synthetic data
TEXTURES = ("stripes", "blobs", "noise")
DEFECTS = ("scratch", "blot", "patch-swap")
_SPLITS = {"train": 0, "test": 1}


@dataclass
class SynthConfig:
    resolution: int = 64
    texture: str = "blobs"
    defect: str = "scratch"
    defect_intensity: float = 1.0
    train_normal: int = 200
    train_anomalous: int = 10
    test_normal: int = 100
    test_anomalous: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}; choose from {TEXTURES}")
        if self.defect not in DEFECTS:
            raise ValueError(f"unknown defect {self.defect!r}; choose from {DEFECTS}")
        if not 0.0 <= self.defect_intensity <= 1.0:
            raise ValueError("defect_intensity must lie in [0, 1]")
        if self.resolution < 8:
            raise ValueError("resolution must be at least 8")


def image_seed(seed: int, split: str, label: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, _SPLITS[split], label, index]).generate_state(1)[0])


def render_texture(kind: str, res: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    if kind == "stripes":
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(3, 8)
        phase = rng.uniform(0, 2 * np.pi)
        img = 0.5 + 0.3 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / res + phase)
        img += rng.normal(0, 0.02, size=img.shape)
    elif kind == "blobs":
        # per-image brightness and contrast, so patches moved between images leave seams
        base = rng.uniform(0.35, 0.65)
        contrast = rng.uniform(0.5, 1.5)
        field = np.zeros((res, res))
        for _ in range(int(round(0.012 * res * res))):
            cy, cx = rng.uniform(0, res, size=2)
            s = rng.uniform(0.03, 0.07) * res
            amp = rng.uniform(-0.2, 0.2)
            field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img = base + contrast * field + rng.normal(0, 0.02, size=(res, res))
    elif kind == "noise":
        raw = rng.uniform(0, 1, size=(res + 2, res + 2))
        img = sum(raw[i : i + res, j : j + res] for i in range(3) for j in range(3)) / 9.0
        img = 0.5 + (img - 0.5) * 2.0
    else:
        raise ValueError(f"unknown texture {kind!r}")
    return np.clip(img, 0.05, 0.95)


def _segment_distance(yy, xx, p0, p1):
    d = p1 - p0
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(d @ d, 1e-12), 0, 1)
    return np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))


def render_defect(kind: str, img: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return (fully applied defect image, blend weight in [0, 1])."""
    res = img.shape[0]
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    value = 0.02 if rng.uniform() < 0.5 else 0.98
    if kind == "scratch":
        center = rng.uniform(0.25 * res, 0.75 * res, size=2)
        angle = rng.uniform(0, np.pi)
        length = rng.uniform(0.3, 0.5) * res
        half = 0.5 * length * np.array([np.sin(angle), np.cos(angle)])
        thickness = rng.uniform(1.0, 2.0)
        dist = _segment_distance(yy, xx, center - half, center + half)
        weight = np.clip(thickness / 2 + 0.5 - dist, 0, 1)
        return np.full_like(img, value), weight
    if kind == "blot":
        cy, cx = rng.uniform(0.2 * res, 0.8 * res, size=2)
        ry, rx = rng.uniform(0.05, 0.12, size=2) * res
        d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        weight = np.clip((1.0 - d) * 3.0, 0, 1)
        return np.full_like(img, value), weight
    if kind == "patch-swap":
        h, w = (int(v) for v in rng.integers(res // 8, res // 4 + 1, size=2))
        sy, sx = (int(v) for v in rng.integers(0, res - max(h, w) + 1, size=2))
        while True:
            dy, dx = (int(v) for v in rng.integers(0, res - max(h, w) + 1, size=2))
            if abs(dy - sy) >= h or abs(dx - sx) >= w:
                break
        src = img.copy()
        src[dy : dy + h, dx : dx + w] = img[sy : sy + h, sx : sx + w]
        weight = np.zeros_like(img)
        weight[dy : dy + h, dx : dx + w] = 1.0
        return src, weight
    raise ValueError(f"unknown defect {kind!r}")


def render_synthetic(cfg: SynthConfig, img_seed: int, anomalous: bool) -> tuple[np.ndarray, dict]:
    """Render one grayscale image; the texture depends only on ``img_seed``."""
    texture = render_texture(cfg.texture, cfg.resolution, make_rng([img_seed, 0]))
    meta = {"defect_kind": "none", "x0": 0, "y0": 0, "x1": 0, "y1": 0, "seed": img_seed}
    if not anomalous:
        return texture, meta
    target, weight = render_defect(cfg.defect, texture, make_rng([img_seed, 1]))
    img = texture + cfg.defect_intensity * weight * (target - texture)
    ys, xs = np.nonzero(weight > 0)
    meta.update(defect_kind=cfg.defect, x0=int(xs.min()), y0=int(ys.min()), x1=int(xs.max()) + 1, y1=int(ys.max()) + 1)
    return img, meta


@dataclass
class SyntheticDataset:
    root: Path
    train: DatasetManifest
    test: DatasetManifest


def generate_synthetic(cfg: SynthConfig, out_dir: str | os.PathLike) -> SyntheticDataset:
    """Write PGM images, per-image sidecars and ``train.tsv``/``test.tsv`` manifests."""
    root = Path(out_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {root}")
    if not os.access(root, os.W_OK):
        raise PermissionError(f"output directory is not writable: {root}")
    manifests = {}
    plan = {
        "train": ((0, cfg.train_normal), (1, cfg.train_anomalous)),
        "test": ((0, cfg.test_normal), (1, cfg.test_anomalous)),
    }
    for split, groups in plan.items():
        entries = []
        for label, count in groups:
            sub = Path(split) / ("anomaly" if label else "normal")
            if count:
                (root / sub).mkdir(parents=True, exist_ok=True)
            for i in range(count):
                seed = image_seed(cfg.seed, split, label, i)
                img, meta = render_synthetic(cfg, seed, bool(label))
                rel = sub / f"{split}_{'anomaly' if label else 'normal'}_{i:04d}.pgm"
                netpbm.write_image(root / rel, img)
                sidecar = "".join(f"{k}={meta[k]}\n" for k in ("defect_kind", "x0", "y0", "x1", "y1", "seed"))
                (root / rel).with_suffix(".txt").write_text(sidecar, encoding="utf-8")
                entries.append((rel.as_posix(), label))
        write_manifest(root / f"{split}.tsv", entries, f"synthetic {cfg.texture}/{cfg.defect} seed={cfg.seed}")
        manifests[split] = DatasetManifest(root, entries, split)
    return SyntheticDataset(root, manifests["train"], manifests["test"])
