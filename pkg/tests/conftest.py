import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from protofair.data import load_interactions, make_split
from synth import zipf_dataset


@pytest.fixture
def tiny_tsv(tmp_path):
    """Three users with timestamped histories; enough for a real split."""
    path = tmp_path / "tiny.tsv"
    path.write_text(
        "# tiny corpus\n"
        "alice\tapple\t1\n"
        "alice\tbanana\t2\n"
        "alice\tcherry\t3\n"
        "alice\tdate\t4\n"
        "bob\tapple\t1\n"
        "bob\tcherry\t2\n"
        "bob\tbanana\t3\n"
        "carol\tapple\t5\n"
        "carol\tdate\t6\n",
        encoding="utf-8",
    )
    return path


@pytest.fixture
def tiny_dataset(tiny_tsv):
    return load_interactions(tiny_tsv, "tsv")


@pytest.fixture(scope="session")
def small_zipf(tmp_path_factory):
    """A small trainable dataset+split for cheap training tests."""
    tmp = tmp_path_factory.mktemp("smallzipf")
    dataset = zipf_dataset(
        tmp, n_users=60, n_items=40, seed=11, min_per_user=8,
        max_per_user=14, label_n=4,
    )
    split = make_split(dataset, seed=5)
    return dataset, split


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
