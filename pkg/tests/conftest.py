from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from neuropipe.config import RunConfig
from neuropipe.mockdata import create_dataset


@pytest.fixture(scope="session")
def demo_dataset(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("demo-data")
    return create_dataset(root, subjects=3, seed=0)


@pytest.fixture()
def mock_config() -> RunConfig:
    return RunConfig(mock=True)
