"""Run configuration: typed ``[section]`` / ``key = value`` files with a canonical echo.

Values resolve in increasing precedence: schema defaults, a named preset,
the ``ATAC_SEED`` environment variable (seed only), a config file, then
command-line overrides.  Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from typing import Any, Callable

from .data import CutMixConfig, SynthConfig
from .loss import STANDARD, LossConfig, ReferenceDistribution
from .model import AttentionConfig, BackboneConfig, ModelConfig
from .scoring import ScoringConfig
from .training import Schedule, TrainConfig

SEED_ENV = "ATAC_SEED"


class ConfigError(ValueError):
    """Invalid configuration text, key or value."""


# ---------------------------------------------------------------- value types
def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _parse_opt_float(text: str) -> float | None:
    return None if text.strip().lower() == "none" else float(text)


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


@dataclass(frozen=True)
class Field:
    default: Any
    parse: Callable[[str], Any]
    choices: tuple | None = None


def _f(default, parse=None, choices=None) -> Field:
    if parse is None:
        parse = {bool: _parse_bool, int: int, float: float, str: str.strip}[type(default)]
    return Field(default, parse, choices)


_SCHEMA: dict[str, dict[str, Field]] = {
    "run": {
        "seed": _f(0),
        "strict": _f(True),
        "output_dir": _f("."),
    },
    "data": {
        "train_manifest": _f(""),
        "test_manifest": _f(""),
        "resolution": _f(64),
        "channels": _f(1),
        "anomalies": _f(10, choices=(1, 10)),
    },
    "synth": {
        "texture": _f("blobs", choices=("stripes", "blobs", "noise")),
        "defect": _f("scratch", choices=("scratch", "blot", "patch-swap")),
        "defect_intensity": _f(1.0),
        "train_normal": _f(200),
        "train_anomalous": _f(10),
        "test_normal": _f(100),
        "test_anomalous": _f(100),
    },
    "model": {
        "stage_channels": Field((16, 32, 64, 64), _parse_ints),
        "kernel_size": _f(3),
        "negative_slope": _f(0.0),
        "attention_channels": _f(64),
        "attention_conv_layers": _f(1),
        "qk_reduction": _f(8),
        "gain_init": _f(0.0),
        "padding_mode": _f("reflect", choices=("reflect", "zeros")),
        "calibrate": _f(True),
    },
    "scoring": {
        "omega": _f(0.4),
        "topk_fraction": _f(0.1),
        "margin": _f(0.1),
        "min_crop_fraction": _f(0.25),
        "two_pass": _f(True),
    },
    "loss": {
        "k": _f(10.0),
        "hinge": _f(True),
        "reference": _f("analytic", choices=("analytic", "sampled")),
        "reference_count": _f(5000),
    },
    "schedule": {
        "base_lr": _f(1e-3),
        "decay_factor": _f(0.1),
        "step_size_epochs": _f(10),
        "epochs": _f(30),
        "batch_size": _f(16),
    },
    "cutmix": {
        "rate": _f(0.25),
        "area_min": _f(0.02),
        "area_max": _f(0.15),
        "aspect_min": _f(1 / 3),
        "aspect_max": _f(3.0),
        "source": _f("other-normal-image", choices=("other-normal-image", "same-image-offset")),
    },
    "optim": {
        "weight_decay": _f(0.0),
        "grad_clip": Field(None, _parse_opt_float),
    },
}

PRESETS: dict[str, dict[str, str]] = {
    "blobs": {"synth.texture": "blobs"},
    "stripes": {"synth.texture": "stripes"},
    "noise": {"synth.texture": "noise"},
    # desk-scale experiment: shallower leaky backbone (8x8 score map) and a
    # learning rate sized for a network of a few thousand parameters
    "desk": {
        "synth.texture": "blobs",
        "model.stage_channels": "8,16,32",
        "model.negative_slope": "0.1",
        "schedule.base_lr": "0.003",
    },
}


def _split_key(dotted: str) -> tuple[str, str]:
    section, sep, key = dotted.partition(".")
    if not sep:
        raise ConfigError(f"expected section.key, got {dotted!r}")
    return section, key


class RunConfig:
    """Every tunable of a run, grouped by section, with schema-checked values."""

    def __init__(self):
        self.values = {sec: {k: f.default for k, f in fields.items()} for sec, fields in _SCHEMA.items()}

    # ------------------------------------------------------------ access
    def get(self, dotted: str):
        section, key = _split_key(dotted)
        self._field(section, key)
        return self.values[section][key]

    def set(self, dotted: str, text: str) -> None:
        """Parse ``text`` with the key's type and store it."""
        section, key = _split_key(dotted)
        self._assign(section, key, text)

    def _field(self, section: str, key: str) -> Field:
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in _SCHEMA[section]:
            raise ConfigError(f"unknown config key {key!r} in [{section}]")
        return _SCHEMA[section][key]

    def _assign(self, section: str, key: str, text: str) -> None:
        fld = self._field(section, key)
        try:
            value = fld.parse(text)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from None
        if fld.choices is not None and value not in fld.choices:
            raise ConfigError(f"{section}.{key} must be one of {', '.join(map(str, fld.choices))}; got {text.strip()!r}")
        self.values[section][key] = value

    # ------------------------------------------------------------ text form
    def update_from_text(self, text: str, source: str = "<config>") -> None:
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        parser.optionxform = str  # keys are case-sensitive
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        if parser.defaults():
            raise ConfigError(f"{source}: keys must appear under a [section] header")
        for section in parser.sections():
            for key, raw in parser.items(section):
                self._assign(section, key, raw)

    def to_text(self) -> str:
        """Canonical serialization: schema order, one ``key = value`` per line."""
        blocks = []
        for section, fields in _SCHEMA.items():
            lines = [f"[{section}]"] + [f"{k} = {_fmt(self.values[section][k])}".rstrip() for k in fields]
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        cfg.update_from_text(text, source)
        return cfg

    @classmethod
    def resolve(
        cls,
        preset: str | None = None,
        config_text: str | None = None,
        overrides: dict[str, str] | None = None,
        env: dict[str, str] | None = None,
    ) -> "RunConfig":
        """Merge defaults, preset, ``ATAC_SEED``, file text and overrides, in that order."""
        cfg = cls()
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
            for dotted, text in PRESETS[preset].items():
                cfg.set(dotted, text)
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            cfg.set("run.seed", env[SEED_ENV])
        if config_text is not None:
            cfg.update_from_text(config_text)
        for dotted, text in (overrides or {}).items():
            cfg.set(dotted, text)
        return cfg

    # ------------------------------------------------------------ builders
    def model_config(self) -> ModelConfig:
        m, d = self.values["model"], self.values["data"]
        try:
            return ModelConfig(
                BackboneConfig(
                    in_channels=d["channels"],
                    stage_channels=m["stage_channels"],
                    kernel_size=m["kernel_size"],
                    input_resolution=d["resolution"],
                    padding_mode=m["padding_mode"],
                    negative_slope=m["negative_slope"],
                ),
                AttentionConfig(
                    channels=m["attention_channels"],
                    conv_layers=m["attention_conv_layers"],
                    kernel_size=m["kernel_size"],
                    qk_reduction=m["qk_reduction"],
                    gain_init=m["gain_init"],
                    padding_mode=m["padding_mode"],
                ),
            )
        except ValueError as exc:
            raise ConfigError(f"[model]: {exc}") from None

    def scoring_config(self) -> ScoringConfig:
        s = self.values["scoring"]
        try:
            return ScoringConfig(s["omega"], s["topk_fraction"], s["margin"], s["min_crop_fraction"], s["two_pass"])
        except ValueError as exc:
            raise ConfigError(f"[scoring]: {exc}") from None

    def reference(self) -> ReferenceDistribution:
        lo = self.values["loss"]
        if lo["reference"] == "analytic":
            return STANDARD
        return ReferenceDistribution.sampled(lo["reference_count"], self.values["run"]["seed"])

    def train_config(self) -> TrainConfig:
        sc, lo, cm, op = (self.values[k] for k in ("schedule", "loss", "cutmix", "optim"))
        try:
            return TrainConfig(
                schedule=Schedule(sc["base_lr"], sc["decay_factor"], sc["step_size_epochs"], sc["epochs"], sc["batch_size"]),
                loss=LossConfig(lo["k"], lo["hinge"]),
                scoring=self.scoring_config(),
                cutmix=CutMixConfig(
                    (cm["area_min"], cm["area_max"]),
                    (cm["aspect_min"], cm["aspect_max"]),
                    cm["source"],
                    self.values["run"]["seed"],
                ),
                cutmix_rate=cm["rate"],
                reference=self.reference(),
                weight_decay=op["weight_decay"],
                grad_clip=op["grad_clip"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def synth_config(self) -> SynthConfig:
        s = self.values["synth"]
        try:
            return SynthConfig(
                resolution=self.values["data"]["resolution"],
                texture=s["texture"],
                defect=s["defect"],
                defect_intensity=s["defect_intensity"],
                train_normal=s["train_normal"],
                train_anomalous=s["train_anomalous"],
                test_normal=s["test_normal"],
                test_anomalous=s["test_anomalous"],
                seed=self.values["run"]["seed"],
            )
        except ValueError as exc:
            raise ConfigError(f"[synth]: {exc}") from None


__all__ = ["RunConfig", "ConfigError", "PRESETS", "SEED_ENV"]
