import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def train50(tmp_path_factory):
    from condcd.synthetic import WorldConfig, generate_dataset
    from condcd.training import load_manifest

    root = tmp_path_factory.mktemp("train50")
    manifest = generate_dataset(WorldConfig(seed=1), 50, root)
    return load_manifest(manifest)
