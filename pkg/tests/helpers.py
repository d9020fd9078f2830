"""Builders shared by the test modules"""

import os

import numpy as np

import ihvp
import model_core
from data_io import generate_synthetic
from data_models import Dataset, MlpSpec, TrainConfig

CONVEX_L2 = 1e-2


def convex_config(l2=CONVEX_L2, seed=0):
    """Newton-polished logistic regression: reaches the unique optimum to ~1e-10"""
    return TrainConfig(learning_rate=0.1, epochs=0, batch_size=32, seed=seed,
                       l2_penalty=l2, newton_steps=60, grad_tol=1e-11)


def convex_dataset(n, seed, d=10, separation=2.0):
    return generate_synthetic("gaussian_blobs", n, d, 2, seed, separation=separation)


def train_convex(dataset, l2=CONVEX_L2):
    spec = MlpSpec((dataset.d, dataset.num_classes))
    return spec, model_core.train(spec, dataset, convex_config(l2))


def random_dataset(n, d, C, seed):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((n, d)), rng.integers(0, C, size=n), C)


def random_params(spec, seed, l2=0.0, scale=1.0):
    """Initialized weights with non-zero biases so every curvature term is exercised"""
    params = model_core.init_params(spec, seed, l2)
    rng = np.random.default_rng([seed, 7])
    return params.with_theta(scale * params.theta + 0.1 * rng.standard_normal(params.p))


def exact_solver(params, dataset, damping):
    return ihvp.ExactDenseSolver(model_core.dense_gnh(params, dataset), damping)


def eigenbasis_variances(Q_A, Q_Y, samples):
    """Mean squared coordinates of flattened layer samples (m, p (d + 1)) in the
    basis Q_A kron Q_Y, as a (p, d + 1) matrix"""
    p, d = Q_Y.shape[0], Q_A.shape[0]
    samples = np.asarray(samples, dtype=np.float64)
    V = samples.reshape(samples.shape[0], d, p).transpose(0, 2, 1)
    projected = np.einsum("ki,mkl,lj->mij", Q_Y, V, Q_A)
    return np.mean(projected ** 2, axis=0)


def mnist_training_paths(directory):
    """(images, labels) under directory, preferring uncompressed files"""
    def present(name):
        path = os.path.join(directory, name)
        return path if os.path.exists(path) else path + ".gz"
    return present("train-images-idx3-ubyte"), present("train-labels-idx1-ubyte")
