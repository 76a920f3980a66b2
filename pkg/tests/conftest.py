import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "scripts"))

from cimsim.dataio import load_params
from cimsim.training import Dataset

import make_synthetic_digits  # noqa: E402  (from scripts/)


@pytest.fixture(scope="session")
def params():
    return load_params()


@pytest.fixture(scope="session")
def reram_params(params):
    return params["reram"]


@pytest.fixture(scope="session")
def fg_params(params):
    return params["fg"]


@pytest.fixture(scope="session")
def tiny_digits() -> Dataset:
    """256 synthetic digit images for fast functional tests."""
    images, labels = make_synthetic_digits.make_dataset(256, seed=123)
    return Dataset(images[:, None, :, :] / 255.0, labels)


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory) -> str:
    """Small on-disk IDX dataset directory (shared across CLI tests)."""
    out = tmp_path_factory.mktemp("idx")
    from cimsim.dataio import save_idx

    images, labels = make_synthetic_digits.make_dataset(300, seed=5)
    save_idx(out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte",
             images[:200], labels[:200])
    save_idx(out / "t10k-images-idx3-ubyte", out / "t10k-labels-idx1-ubyte",
             images[200:], labels[200:])
    return str(out)
