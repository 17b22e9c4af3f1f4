"""Shared fixtures: float64 mode, tiny models and a small synthetic dataset."""

import numpy as np
import pytest

from atacnet.data import SynthConfig, generate_synthetic, load_dataset
from atacnet.model import AtacNet, AttentionConfig, BackboneConfig, ModelConfig
from atacnet.tensor import precision


@pytest.fixture
def f64():
    """Run the test body with float64 tensors."""
    with precision(np.float64):
        yield


def tiny_config(resolution=16, stages=(4, 6), att=6, gain=0.0, in_channels=1):
    """A two-stage network small enough for finite-difference checks."""
    return ModelConfig(
        BackboneConfig(in_channels=in_channels, stage_channels=stages, input_resolution=resolution),
        AttentionConfig(channels=att, gain_init=gain),
    )


def tiny_model(seed=0, dtype=np.float32, **kw):
    return AtacNet(tiny_config(**kw), seed=seed).astype(dtype)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """32x32 blob textures with scratches: 12 normal / 4 anomalous per split."""
    root = tmp_path_factory.mktemp("synth")
    cfg = SynthConfig(
        resolution=32, train_normal=12, train_anomalous=4, test_normal=12, test_anomalous=4, seed=3
    )
    ds = generate_synthetic(cfg, root)
    return ds, load_dataset(ds.train), load_dataset(ds.test)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
