import pytest
import sys
import os
from pathlib import Path
from unittest.mock import patch

import numpy as np

# Add the parent directory to the path so we can import server.py and remixsep
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from remixsep.array_sim import ArrayGeometry, SceneSpec, generate_dataset, render_scene, synth_source
from remixsep.config import RunConfig

TINY_DURATION = 0.25
TINY_SEED = 7


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run desk-scale acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    """Fresh, fixed-seed generator per test."""
    return np.random.default_rng(1234)


@pytest.fixture
def geometry():
    return ArrayGeometry.linear()


@pytest.fixture
def tiny_scene(geometry):
    """Two synthetic sources at -45° and 30°, rendered on the default 4-mic array."""
    spec = SceneSpec((-45, 30), seed=TINY_SEED)
    sources = [synth_source(11, TINY_DURATION), synth_source(12, TINY_DURATION)]
    return render_scene(spec, sources, geometry)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Session-wide 4/2/2 dataset with a 4-utterance clean pool."""
    out_dir = tmp_path_factory.mktemp("data")
    return generate_dataset(4, 2, 2, seed=TINY_SEED, out_dir=out_dir, duration=TINY_DURATION)


def write_tiny_config(path: Path, manifest: Path, out_dir: Path, **train) -> Path:
    """Run config with toy model sizes and one-epoch stages."""
    values = {
        "data": {"manifest": str(manifest), "out_dir": str(out_dir), "val_limit": "1"},
        "model": {"hidden": "16", "context": "1", "disc_channels": "4"},
        "train": {
            "seed": "3",
            "epochs_adversarial": "1",
            "epochs_rccl": "1",
            "epochs_pit": "1",
            "batch_size_adversarial": "2",
            "batch_size_rccl": "2",
            "batch_size_pit": "2",
            **{key: str(value) for key, value in train.items()},
        },
    }
    return RunConfig(values).write(path)


@pytest.fixture
def tiny_config(tmp_path, tiny_dataset):
    """Path of a toy run config pointing at the session dataset."""
    return write_tiny_config(tmp_path / "run.cfg", tiny_dataset.manifest_path, tmp_path / "runs")


@pytest.fixture
def mock_env(tmp_path):
    """Mock environment variables for testing."""
    env_vars = {
        'REMIXSEP_WORKDIR': str(tmp_path),
        'REMIXSEP_LOG_LEVEL': os.environ.get('REMIXSEP_LOG_LEVEL', 'INFO'),
        'REMIXSEP_WORKERS': '1'
    }

    with patch.dict(os.environ, env_vars):
        yield
