import numpy as np
import pytest
import torch

from tests.helpers import synthetic_scene, write_datasets


@pytest.fixture
def rng():
    """Fresh, fixed-seed numpy generator"""
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def torch_seed():
    """Pin torch's global generator so parameter init is repeatable per test"""
    torch.manual_seed(0)


@pytest.fixture
def scene():
    """20x20x16 cube with three labeled stripes and four background rows"""
    return synthetic_scene()


@pytest.fixture
def datasets(tmp_path):
    """Target, homogeneous and heterogeneous data written under tmp_path/data"""
    return write_datasets(tmp_path / "data")
