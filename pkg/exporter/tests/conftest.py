import numpy as np
import pytest

from cora_exporter.export import export_bundle


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def bundle_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    export_bundle(out, seed=0)
    return out
