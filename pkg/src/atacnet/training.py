"""Training recipe: Adam with step decay over shuffled episode batches plus on-the-fly Cut-Mix.

Every random choice made during epoch ``e`` comes from a generator seeded with
``(seed, e)``, so an interrupted run resumed from a checkpoint replays exactly
the batches the uninterrupted run would have seen.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import CutMixConfig, Sample, cutmix
from .loss import STANDARD, LossConfig, ReferenceDistribution, batch_loss
from .model import AtacNet, ModelConfig
from .scoring import ScoringConfig, atac_forward
from .tensor import Tensor, make_rng, no_grad, zero_grad

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ATAC"
CHECKPOINT_VERSION = 1
LOG_FIELDS = ("epoch", "lr", "mean_loss", "mean_score_normal", "mean_score_anomaly")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Schedule:
    base_lr: float = 1e-3
    decay_factor: float = 0.1
    step_size_epochs: int = 10
    total_epochs: int = 30
    batch_size: int = 16

    def __post_init__(self):
        if self.base_lr < 0 or self.decay_factor <= 0 or self.step_size_epochs <= 0 or self.batch_size <= 0:
            raise ValueError("schedule values must be positive")
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be non-negative")


def lr_at_epoch(schedule: Schedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return schedule.base_lr * schedule.decay_factor ** (epoch // schedule.step_size_epochs)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place to ``params``.

    Missing gradients count as zero.  ``weight_decay`` adds an L2 term to the
    gradient and ``grad_clip`` rescales by global norm; both are off by default.
    """
    g_all = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        g_all[name] = g
    if state.grad_clip is not None:
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in g_all.values()))
        if norm > state.grad_clip:
            scale = state.grad_clip / norm
            g_all = {k: g * scale for k, g in g_all.items()}

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = g_all[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


@dataclass
class TrainConfig:
    schedule: Schedule = field(default_factory=Schedule)
    loss: LossConfig = field(default_factory=LossConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    cutmix: CutMixConfig = field(default_factory=CutMixConfig)
    cutmix_rate: float = 0.25
    reference: ReferenceDistribution = STANDARD
    weight_decay: float = 0.0
    grad_clip: float | None = None


@dataclass
class EpochLog:
    epoch: int
    lr: float
    mean_loss: float
    mean_score_normal: float
    mean_score_anomaly: float


@dataclass
class TrainResult:
    model: AtacNet
    log: list[EpochLog]
    state: AdamState
    epoch: int  # number of completed epochs


def _nchw(images: list[np.ndarray]) -> Tensor:
    return Tensor(np.stack(images).transpose(0, 3, 1, 2))


def epoch_batches(
    episode: list[Sample], cfg: TrainConfig, seed: int, epoch: int
) -> list[tuple[list[np.ndarray], np.ndarray]]:
    """Shuffled batches for one epoch with Cut-Mix applied; a pure function of (seed, epoch)."""
    rng = make_rng([seed, epoch])
    normals = [i for i, s in enumerate(episode) if s.label == 0]
    order = rng.permutation(len(episode))
    bs = cfg.schedule.batch_size
    batches = []
    for start in range(0, len(order), bs):
        images, labels = [], []
        for idx in order[start : start + bs]:
            sample = episode[int(idx)]
            if sample.label == 0 and cfg.cutmix_rate > 0 and rng.uniform() < cfg.cutmix_rate:
                donors = [j for j in normals if j != idx]
                if cfg.cutmix.source == "other-normal-image" and donors:
                    donor = episode[donors[int(rng.integers(len(donors)))]]
                else:
                    donor = sample
                sample, _ = cutmix(sample, donor, cfg.cutmix, rng)
            images.append(sample.image)
            labels.append(sample.label)
        batches.append((images, np.asarray(labels)))
    return batches


def train(
    model: AtacNet,
    episode: list[Sample],
    cfg: TrainConfig | None = None,
    seed: int = 0,
    state: AdamState | None = None,
    start_epoch: int = 0,
    end_epoch: int | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Run epochs ``start_epoch .. end_epoch-1`` (default: through ``total_epochs``)."""
    cfg = cfg or TrainConfig()
    if not episode:
        raise TrainingError("episode is empty")
    has_anomaly = any(s.label == 1 for s in episode) or cfg.cutmix_rate > 0
    if not any(s.label == 0 for s in episode) or not has_anomaly:
        raise TrainingError("episode must provide both normal and anomalous samples")
    state = state or AdamState(weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    end_epoch = cfg.schedule.total_epochs if end_epoch is None else end_epoch
    params = model.named_parameters()
    history = []
    for epoch in range(start_epoch, end_epoch):
        state.lr = lr_at_epoch(cfg.schedule, epoch)
        losses, normal_scores, anomaly_scores = [], [], []
        for images, labels in epoch_batches(episode, cfg, seed, epoch):
            zero_grad(params.values())
            out = atac_forward(_nchw(images), model, cfg.scoring)
            loss = batch_loss(out.score, labels, cfg.reference, cfg.loss)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            loss.backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, state)
            losses.append(loss.item() * len(labels))
            scores = out.score.data.astype(np.float64)
            normal_scores.extend(scores[labels == 0])
            anomaly_scores.extend(scores[labels == 1])
        entry = EpochLog(
            epoch,
            state.lr,
            float(np.sum(losses) / len(episode)),
            float(np.mean(normal_scores)) if normal_scores else float("nan"),
            float(np.mean(anomaly_scores)) if anomaly_scores else float("nan"),
        )
        history.append(entry)
        log.info(
            "epoch %d lr %.1e loss %.4f normal %.3f anomaly %.3f",
            epoch, entry.lr, entry.mean_loss, entry.mean_score_normal, entry.mean_score_anomaly,
        )
        if on_epoch:
            on_epoch(entry)
    zero_grad(params.values())
    return TrainResult(model, history, state, end_epoch)


def score_samples(model: AtacNet, samples: list[Sample], scoring: ScoringConfig | None = None, batch_size: int = 16):
    """Forward-only scoring in fixed-size batches; returns the :class:`AtacOutput` per batch."""
    outs = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            outs.append(atac_forward(_nchw([s.image for s in chunk]), model, scoring))
    return outs


def write_log_csv(path: str | Path, history: list[EpochLog]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_FIELDS)
    for e in history:
        writer.writerow([e.epoch, repr(e.lr), repr(e.mean_loss), repr(e.mean_score_normal), repr(e.mean_score_anomaly)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------- checkpoints
@dataclass
class Checkpoint:
    model_config: dict
    params: dict[str, np.ndarray]
    optimizer: AdamState
    rng_state: dict
    epoch: int
    extra: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model: AtacNet, state: AdamState, seed: int, epoch: int, extra: dict | None = None):
        return cls(model.config.to_dict(), model.state_dict(), state, {"seed": seed, "next_epoch": epoch}, epoch, extra or {})

    def build_model(self) -> AtacNet:
        model = AtacNet(ModelConfig.from_dict(self.model_config))
        model.load_state_dict(self.params)
        return model


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Serialize as: magic, u32 version, JSON metadata, name table, tensors, CRC32 (all little-endian)."""
    opt = ckpt.optimizer
    meta = {
        "model": ckpt.model_config,
        "epoch": ckpt.epoch,
        "rng": ckpt.rng_state,
        "optimizer": {
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "weight_decay": opt.weight_decay,
            "grad_clip": opt.grad_clip,
            "step": opt.step,
        },
        "extra": ckpt.extra,
    }
    tensors = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"adam_m/{k}", v) for k, v in sorted(opt.m.items())]
    tensors += [(f"adam_v/{k}", v) for k, v in sorted(opt.v.items())]

    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", CHECKPOINT_VERSION)
    meta_bytes = _canonical_json(meta)
    out += struct.pack("<I", len(meta_bytes)) + meta_bytes
    out += struct.pack("<I", len(tensors))
    for name, _ in tensors:
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
    for _, arr in tensors:
        arr = np.asarray(arr)
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 12:
        raise CheckpointError("checkpoint is truncated")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {buf[:4]!r})")
    version = struct.unpack("<I", buf[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint is corrupt or truncated (CRC mismatch)")
    r = _Reader(body)
    r.take(8)
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
        names = [r.take(r.u32()).decode("utf-8") for _ in range(r.u32())]
        arrays = {}
        for name in names:
            ndim = r.u32()
            shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    except CheckpointError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError, struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if r.pos != len(body):
        raise CheckpointError("checkpoint has trailing bytes")
    o = meta["optimizer"]
    state = AdamState(
        lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
        weight_decay=o["weight_decay"], grad_clip=o["grad_clip"], step=o["step"],
        m={k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")},
        v={k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")},
    )
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    return Checkpoint(meta["model"], params, state, meta["rng"], meta["epoch"], meta.get("extra", {}))


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
