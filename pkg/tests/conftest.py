"""
Shared fixtures: a small synthetic model, sequences at 16x16 and a config
for the `tiny` preset, so the suite runs in seconds on a CPU.

Long acceptance runs are marked `slow` and only run with HEADGAN_LAB_SLOW=1.
"""

import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import SynthConfig, TrainConfig
from src.morphable import make_synthetic_model, make_synthetic_sequence


SLOW = os.environ.get("HEADGAN_LAB_SLOW") == "1"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance run (HEADGAN_LAB_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if SLOW:
        return
    skip = pytest.mark.skip(reason="set HEADGAN_LAB_SLOW=1 to run acceptance tests")
    for item in items:
        if item.get_closest_marker("slow") is not None:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def model():
    return make_synthetic_model(seed=0, N=100)


@pytest.fixture(scope="session")
def synth_config():
    return SynthConfig(resolution=16)


@pytest.fixture(scope="session")
def sequence(model, synth_config):
    return make_synthetic_sequence(model, seed=1, T=5, config=synth_config)


@pytest.fixture(scope="session")
def other_sequence(model, synth_config):
    return make_synthetic_sequence(model, seed=2, T=4, config=synth_config)


@pytest.fixture
def tiny_config():
    return TrainConfig(preset="tiny", batch_size=2, steps=2, checkpoint_every=1, log_every=1, seed=3)


@pytest.fixture
def dataset_dir(tmp_path, model, sequence, other_sequence):
    """A `synth`-style directory with two sequences."""
    root = tmp_path / "data"
    model.save(root / "model.hgar")
    sequence.save(root / "sequences" / "seq_0000.hgar")
    other_sequence.save(root / "sequences" / "seq_0001.hgar")
    return root
