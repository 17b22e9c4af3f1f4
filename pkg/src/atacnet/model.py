"""Learnable stages: feature extractor, attention augmentation, anomaly mapper.

The network is described entirely by :class:`ModelConfig`; parameters live in
plain :class:`~atacnet.tensor.Tensor` leaves grouped per stage.  The default
backbone is a small strided CNN standing in for a pretrained ResNet; any
object with ``named_parameters()``, ``out_channels``, ``stride`` and
``__call__`` can replace it.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .tensor import ShapeError, Tensor, conv2d, make_rng, leaky_relu, matmul, no_grad, pad2d, relu, softmax


def _check_padding_mode(mode: str) -> None:
    if mode not in ("reflect", "zeros"):
        raise ValueError(f"padding_mode must be 'reflect' or 'zeros', got {mode!r}")


@dataclass
class BackboneConfig:
    in_channels: int = 1
    stage_channels: tuple[int, ...] = (16, 32, 64, 64)
    kernel_size: int = 3
    input_resolution: int = 64
    padding_mode: str = "reflect"  # or "zeros"
    negative_slope: float = 0.0  # > 0 switches the stages to leaky ReLU

    def __post_init__(self):
        _check_padding_mode(self.padding_mode)
        if not 0.0 <= self.negative_slope < 1.0:
            raise ValueError(f"negative_slope must lie in [0, 1), got {self.negative_slope}")
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) < 2:
            raise ValueError("backbone needs at least 2 stages")
        if self.final_resolution < 4:
            raise ValueError(
                f"input_resolution {self.input_resolution} with {len(self.stage_channels)} stride-2 stages "
                f"leaves a {self.final_resolution}x{self.final_resolution} map; at least 4x4 is required"
            )

    @property
    def final_resolution(self) -> int:
        r = self.input_resolution
        pad = self.kernel_size // 2
        for _ in self.stage_channels:
            r = (r + 2 * pad - self.kernel_size) // 2 + 1
        return r


@dataclass
class AttentionConfig:
    channels: int = 64
    conv_layers: int = 1
    kernel_size: int = 3
    qk_reduction: int = 8
    gain_init: float = 0.0
    padding_mode: str = "reflect"

    def __post_init__(self):
        _check_padding_mode(self.padding_mode)

    @property
    def qk_channels(self) -> int:
        return max(1, self.channels // self.qk_reduction)


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    # optional per-channel input normalization applied after the [0,1] scaling
    input_mean: tuple[float, ...] | None = None
    input_std: tuple[float, ...] | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            backbone=BackboneConfig(**d.get("backbone", {})),
            attention=AttentionConfig(**d.get("attention", {})),
            input_mean=tuple(d["input_mean"]) if d.get("input_mean") is not None else None,
            input_std=tuple(d["input_std"]) if d.get("input_std") is not None else None,
        )


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _bias(rng: np.random.Generator, n: int, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(n,)), requires_grad=True)


class Stage(Protocol):
    def named_parameters(self) -> dict[str, Tensor]: ...


class ConvBackbone:
    """Strided conv + (leaky) ReLU stages; each stage halves the spatial extent."""

    stride_per_stage = 2

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        c_in, k = cfg.in_channels, cfg.kernel_size
        for c_out in cfg.stage_channels:
            fan_in = c_in * k * k
            self.weights.append(_kaiming_uniform(rng, (c_out, c_in, k, k), fan_in))
            self.biases.append(_bias(rng, c_out, fan_in))
            c_in = c_out

    @property
    def out_channels(self) -> int:
        return self.cfg.stage_channels[-1]

    @property
    def stride(self) -> int:
        return self.stride_per_stage ** len(self.weights)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"stage{i}.weight"] = w
            out[f"stage{i}.bias"] = b
        return out

    def __call__(self, x: Tensor) -> Tensor:
        pad = self.cfg.kernel_size // 2
        for w, b in zip(self.weights, self.biases):
            x = conv2d(pad2d(x, pad, self.cfg.padding_mode), w, b, stride=self.stride_per_stage)
            x = leaky_relu(x, self.cfg.negative_slope) if self.cfg.negative_slope else relu(x)
        return x


class AttentionBlock:
    """Conv stack followed by single-head spatial self-attention with a residual gain."""

    def __init__(self, cfg: AttentionConfig, in_channels: int, rng: np.random.Generator):
        self.cfg = cfg
        k = cfg.kernel_size
        self.conv_weights: list[Tensor] = []
        self.conv_biases: list[Tensor] = []
        c_in = in_channels
        for _ in range(cfg.conv_layers):
            fan_in = c_in * k * k
            self.conv_weights.append(_kaiming_uniform(rng, (cfg.channels, c_in, k, k), fan_in))
            self.conv_biases.append(_bias(rng, cfg.channels, fan_in))
            c_in = cfg.channels
        c, cq = cfg.channels, cfg.qk_channels
        self.wq = _kaiming_uniform(rng, (cq, c, 1, 1), c)
        self.bq = _bias(rng, cq, c)
        self.wk = _kaiming_uniform(rng, (cq, c, 1, 1), c)
        self.bk = _bias(rng, cq, c)
        self.wv = _kaiming_uniform(rng, (c, c, 1, 1), c)
        self.bv = _bias(rng, c, c)
        self.gain = Tensor([cfg.gain_init], requires_grad=True)

    @property
    def out_channels(self) -> int:
        return self.cfg.channels if self.cfg.conv_layers else self.wv.shape[0]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            out[f"conv{i}.weight"] = w
            out[f"conv{i}.bias"] = b
        out.update(
            {
                "query.weight": self.wq,
                "query.bias": self.bq,
                "key.weight": self.wk,
                "key.bias": self.bk,
                "value.weight": self.wv,
                "value.bias": self.bv,
                "gain": self.gain,
            }
        )
        return out

    def convolve(self, f: Tensor) -> Tensor:
        pad = self.cfg.kernel_size // 2
        for w, b in zip(self.conv_weights, self.conv_biases):
            f = relu(conv2d(pad2d(f, pad, self.cfg.padding_mode), w, b))
        return f

    def attention_weights(self, f: Tensor) -> Tensor:
        """Row-stochastic N x P x P matrix; row i weighs every position for query i."""
        n, _, h, w = f.shape
        p = h * w
        q = conv2d(f, self.wq, self.bq).reshape(n, -1, p).transpose(0, 2, 1)
        k = conv2d(f, self.wk, self.bk).reshape(n, -1, p)
        return softmax(matmul(q, k), axis=-1)

    def self_attention(self, f: Tensor) -> Tensor:
        n, c, h, w = f.shape
        if c != self.wv.shape[1]:
            raise ShapeError(
                f"self-attention expects {self.wv.shape[1]} channels, got {c}",
                dim="channels",
                expected=self.wv.shape[1],
                got=c,
            )
        attn = self.attention_weights(f)
        v = conv2d(f, self.wv, self.bv).reshape(n, c, h * w)
        agg = matmul(v, attn.transpose(0, 2, 1)).reshape(n, c, h, w)
        return f + self.gain.reshape(1, 1, 1, 1) * agg

    def __call__(self, f: Tensor) -> Tensor:
        return self.self_attention(self.convolve(f))


class Mapper:
    """1x1 convolution from attended features to a single-channel score map."""

    def __init__(self, in_channels: int, rng: np.random.Generator):
        self.weight = _kaiming_uniform(rng, (1, in_channels, 1, 1), in_channels)
        self.bias = _bias(rng, 1, in_channels)

    def named_parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, att: Tensor) -> Tensor:
        if att.shape[1] != self.weight.shape[1]:
            raise ShapeError(
                f"mapper expects {self.weight.shape[1]} channels, got {att.shape[1]}",
                dim="channels",
                expected=self.weight.shape[1],
                got=att.shape[1],
            )
        return conv2d(att, self.weight, self.bias)


class AtacNet:
    """Feature extractor, attention block and mapper sharing one parameter set."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, backbone=None):
        self.config = config or ModelConfig()
        rng = make_rng(seed)
        self.backbone = backbone if backbone is not None else ConvBackbone(self.config.backbone, rng)
        self.attention = AttentionBlock(self.config.attention, self.backbone.out_channels, rng)
        self.mapper = Mapper(self.attention.out_channels, rng)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, stage in (("backbone", self.backbone), ("attention", self.attention), ("mapper", self.mapper)):
            for name, t in stage.named_parameters().items():
                out[f"{prefix}.{name}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ShapeError(f"{k}: expected shape {t.shape}, got {arr.shape}", dim=k, expected=t.shape, got=arr.shape)
            t.data = arr.astype(t.dtype, copy=True)

    def astype(self, dtype) -> "AtacNet":
        """Convert every parameter in place (used for float64 gradient checks)."""
        for t in self.parameters():
            t.data = t.data.astype(dtype)
        return self

    # -------------------------------------------------------------- stages
    def normalize(self, x: Tensor) -> Tensor:
        cfg = self.config
        if cfg.input_mean is None and cfg.input_std is None:
            return x
        c = x.shape[1]
        mean = np.asarray(cfg.input_mean if cfg.input_mean is not None else [0.0] * c, dtype=x.dtype)
        std = np.asarray(cfg.input_std if cfg.input_std is not None else [1.0] * c, dtype=x.dtype)
        return (x - mean.reshape(1, c, 1, 1)) * (1.0 / std).reshape(1, c, 1, 1)

    def feature_extract(self, x: Tensor) -> Tensor:
        res = self.config.backbone.input_resolution
        if x.ndim != 4 or x.shape[2:] != (res, res):
            raise ShapeError(
                f"input must be N x C x {res} x {res}, got {tuple(x.shape)}", dim="resolution", expected=res, got=x.shape
            )
        return self.backbone(self.normalize(x))

    def attention_augment(self, f: Tensor) -> Tensor:
        return self.attention(f)

    def anomaly_map(self, att: Tensor) -> Tensor:
        return self.mapper(att)

    def forward_maps(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """One pass: returns (features, attended features, anomaly map)."""
        f = self.feature_extract(x)
        att = self.attention_augment(f)
        return f, att, self.anomaly_map(att)


def calibrate_mapper(model: AtacNet, x: Tensor | np.ndarray, target_std: float = 1.0) -> float:
    """Data-dependent init: rescale the mapper so the raw map over ``x`` has std ``target_std``.

    Weight and bias are multiplied by the same factor, which is returned.  A
    constant map leaves the mapper untouched and returns 1.
    """
    if not target_std > 0:
        raise ValueError(f"target_std must be positive, got {target_std}")
    with no_grad():
        _, _, amap = model.forward_maps(x if isinstance(x, Tensor) else Tensor(x))
    std = float(amap.data.astype(np.float64).std())
    if std <= 1e-12:
        return 1.0
    scale = target_std / std
    for p in model.mapper.named_parameters().values():
        p.data = (p.data * scale).astype(p.dtype)
    return scale


def feature_extract(x: Tensor, model: AtacNet) -> Tensor:
    return model.feature_extract(x)


def self_attention(f: Tensor, model: AtacNet) -> Tensor:
    return model.attention.self_attention(f)


def attention_augment(f: Tensor, model: AtacNet) -> Tensor:
    return model.attention_augment(f)


def anomaly_map(att: Tensor, model: AtacNet) -> Tensor:
    return model.anomaly_map(att)
