import numpy as np
import pytest

from .helpers import ONE_LAYER, write_adapter, write_checkpoint


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def one_layer_files(tmp_path):
    "base W = 2 I and an adapter whose update is [[0, 1], [0, 0]]"
    base = write_checkpoint(tmp_path / "base.safetensors", {ONE_LAYER: 2 * np.eye(2)})
    adapter = write_adapter(
        tmp_path / "adapter",
        {"model.layers.0.mlp.down_proj": (np.array([[0.0, 1.0]]), np.array([[1.0], [0.0]]))},
        alpha=1,
        r=1,
    )
    return base, adapter
