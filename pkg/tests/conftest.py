import numpy as np
import pytest

from mixres import data as data_mod


@pytest.fixture(scope="session")
def synthetic_data_dir(tmp_path_factory):
    """CIFAR-10 binary files with synthetic content, shared across tests."""
    root = tmp_path_factory.mktemp("cifar_synth")
    return data_mod.write_synthetic_dataset_dir(root / "data", train_n=600, test_n=256, seed=11)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
