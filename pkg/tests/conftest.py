import numpy as np
import pytest

from omega_seg import data as D


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    """A generated 'tiny' dataset (6 subjects, 60 images of 32x32) with folds."""
    root = tmp_path_factory.mktemp("tiny")
    D.write_dataset(root, 7, "tiny")
    ds = D.load_dataset(root, 32)
    D.write_folds(root / "folds.csv", D.partition_folds(ds.subject_counts(), 3, 7))
    return root


@pytest.fixture(scope="session")
def tiny(tiny_dir):
    return D.load_dataset(tiny_dir, 32)
