"""Shared pytest fixtures for calibration tests."""

# pylint: disable=redefined-outer-name
# Pytest fixtures intentionally use other fixtures as parameters

import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path to import the source package
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.file_handler import FileHandler  # noqa: E402
from src.runner import Runner  # noqa: E402
from src.synth import generate_constructed_case  # noqa: E402


@pytest.fixture
def workspace_root():
    """Return path to workspace root."""
    return Path(__file__).parent.parent


@pytest.fixture
def config_root(workspace_root):
    """Return path to config directory."""
    return workspace_root / "config"


@pytest.fixture
def runner(workspace_root):
    """Runner on the real templates and configs."""
    return Runner(basedir=workspace_root)


@pytest.fixture
def constructed_dir(tmp_path):
    """Noise-free constructed case written to disk."""
    dataset = generate_constructed_case(np.random.default_rng(0), noise_enabled=False)
    directory = tmp_path / "constructed"
    FileHandler().write_dataset(dataset, directory)
    return directory
