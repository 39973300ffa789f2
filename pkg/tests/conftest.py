import numpy as np
import pytest

from tbu.datapool import PlantedPoolSpec, generate_planted_pool, split_initial, \
    standardize_features
from tbu.model import MlpSpec, TrainConfig, train_supervised


@pytest.fixture(scope="session")
def tiny_spec():
    return PlantedPoolSpec(num_classes=3, pool_size=360, val_size=60, test_size=60,
                           core_fraction=0.3, noise_fraction=0.15, flip_p=0.4, seed=11)


@pytest.fixture(scope="session")
def tiny_pool(tiny_spec):
    dataset, annotations = generate_planted_pool(tiny_spec)
    pool = split_initial(dataset, 45, tiny_spec.val_size, tiny_spec.test_size, seed=2)
    return dataset, annotations, pool


@pytest.fixture(scope="session")
def tiny_model(tiny_pool):
    dataset, _, pool = tiny_pool
    std = standardize_features(dataset, pool.labeled_idx)
    params = train_supervised(std, pool.labeled_idx, MlpSpec((12,)),
                              TrainConfig(epochs=16, seed=4))
    return std, pool, params


def rng_for(seed):
    return np.random.default_rng(seed)
