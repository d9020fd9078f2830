"""Shared fixtures: small datasets, small networks and a trained strictly convex model"""

import os

import pytest

from config import DATA_DIR_ENV
from data_io import generate_synthetic
from data_models import MlpSpec
from helpers import convex_dataset, random_dataset, random_params, train_convex


@pytest.fixture
def blobs():
    return generate_synthetic("gaussian_blobs", 120, 4, 3, seed=3)


@pytest.fixture
def tanh_net():
    spec = MlpSpec((6, 4, 3), "tanh")
    return random_params(spec, seed=1), random_dataset(40, 6, 3, seed=2)


@pytest.fixture(scope="session")
def convex_problem():
    """n = 200, d = 10 blobs with overlap, logistic regression with l2 = 1e-2"""
    dataset = convex_dataset(200, seed=11)
    heldout = convex_dataset(100, seed=12)
    spec, params = train_convex(dataset)
    return spec, dataset, heldout, params


@pytest.fixture
def mnist_dir():
    directory = os.environ.get(DATA_DIR_ENV)
    names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
    if not directory or not all(
            os.path.exists(os.path.join(directory, f)) or os.path.exists(os.path.join(directory, f + ".gz"))
            for f in names):
        pytest.skip(f"MNIST IDX files not found under ${DATA_DIR_ENV}")
    return directory
