import numpy as np
import pytest

from osdet.config import RunConfig
from osdet.labels import LabelSpace


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def space_k2():
    return LabelSpace(("circle", "square"))


@pytest.fixture
def space_k4():
    return LabelSpace(("circle", "cross", "square", "triangle"))


@pytest.fixture
def tiny_cfg(tmp_path):
    """A configuration small enough for single-second training runs."""
    return RunConfig(
        num_labeled=16,
        num_unlabeled=16,
        num_test=6,
        stage1_iters=6,
        stage2_iters=6,
        batch_labeled=2,
        batch_unlabeled=2,
        output_dir=str(tmp_path / "run"),
    )


def random_unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
