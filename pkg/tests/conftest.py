import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def digits():
    from cornercase.datasets import load_dataset

    return load_dataset("digits", "builtin_synthetic", seed=0)


@pytest.fixture(scope="session")
def digits_ensemble(digits):
    from cornercase.model_zoo import TrainConfig, train_ensemble

    train, test = digits
    return train_ensemble(train, test, TrainConfig())


@pytest.fixture(scope="session")
def digits_model_dir(digits_ensemble, tmp_path_factory):
    path = tmp_path_factory.mktemp("models")
    digits_ensemble[0].save(path)
    return path
