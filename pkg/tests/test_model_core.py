"""Gradients, curvature products, pseudo-gradients and training of the MLP core"""

import math

import numpy as np
import pytest

import model_core
from data_io import generate_synthetic
from data_models import (
    DataFormatError, Example, MlpSpec, ModelParams, NumericalError, SizeGuardError, TrainConfig,
    ConfigError,
)
from helpers import random_dataset, random_params

SHAPES = [
    ((3, 2), "relu"),
    ((4, 5, 3), "tanh"),
    ((6, 4, 3), "tanh"),
    ((2, 8, 8, 2), "tanh"),
    ((5, 3, 4, 2), "relu"),
    ((3, 6, 4), "relu"),
]


def _fd_gradient(params, z, h=1e-6):
    out = np.empty(params.p)
    for j in range(params.p):
        e = np.zeros(params.p)
        e[j] = h
        out[j] = (model_core.loss(params.with_theta(params.theta + e), z)
                  - model_core.loss(params.with_theta(params.theta - e), z)) / (2 * h)
    return out


class TestGradients:

    @pytest.mark.parametrize("dims,activation", SHAPES)
    def test_gradient_matches_central_differences(self, dims, activation):
        spec = MlpSpec(dims, activation)
        params = random_params(spec, seed=sum(dims), l2=0.01)
        data = random_dataset(5, dims[0], dims[-1], seed=len(dims))
        for i in range(3):
            z = data[i]
            g = model_core.grad(params, z)
            fd = _fd_gradient(params, z)
            assert np.linalg.norm(g - fd) / np.linalg.norm(g) < 1e-5

    def test_per_sample_grads_match_single_gradients(self, tanh_net):
        params, data = tanh_net
        G = model_core.per_sample_grads(params, data.features, data.labels)
        assert G.shape == (data.n, params.p)
        for i in (0, 7, 39):
            np.testing.assert_allclose(G[i], model_core.grad(params, data[i]), rtol=1e-10, atol=1e-13)

    def test_batch_grad_is_mean_of_per_sample_grads(self, tanh_net):
        params, data = tanh_net
        G = model_core.per_sample_grads(params, data.features, data.labels)
        np.testing.assert_allclose(model_core.batch_grad(params, data), G.mean(axis=0), atol=1e-13)

    def test_l2_term_enters_gradient(self, tanh_net):
        params, data = tanh_net
        regularized = ModelParams(params.theta, params.spec, 0.5)
        delta = model_core.grad(regularized, data[0]) - model_core.grad(params, data[0])
        np.testing.assert_allclose(delta, 0.5 * params.theta, atol=1e-13)


class TestCurvatureProducts:

    @pytest.mark.parametrize("dims,activation", [s for s in SHAPES if s[1] == "tanh"])
    def test_hvp_matches_gradient_differences(self, dims, activation):
        spec = MlpSpec(dims, activation)
        params = random_params(spec, seed=3, l2=0.01)
        data = random_dataset(20, dims[0], dims[-1], seed=4)
        v = np.random.default_rng(5).standard_normal(params.p)
        v /= np.linalg.norm(v)
        h = 1e-5
        fd = (model_core.batch_grad(params.with_theta(params.theta + h * v), data)
              - model_core.batch_grad(params.with_theta(params.theta - h * v), data)) / (2 * h)
        Hv = model_core.hvp(params, data, v)
        assert np.linalg.norm(Hv - fd) / np.linalg.norm(Hv) < 1e-6

    @pytest.mark.parametrize("dims,activation", SHAPES)
    def test_products_match_dense_matrices(self, dims, activation):
        spec = MlpSpec(dims, activation)
        params = random_params(spec, seed=6)
        data = random_dataset(15, dims[0], dims[-1], seed=7)
        v = np.random.default_rng(8).standard_normal(params.p)
        H = model_core.dense_hessian(params, data)
        G = model_core.dense_gnh(params, data)
        Hv, Gv = model_core.hvp(params, data, v), model_core.gnh_vp(params, data, v)
        assert np.linalg.norm(H @ v - Hv) / np.linalg.norm(Hv) < 1e-9
        assert np.linalg.norm(G @ v - Gv) / np.linalg.norm(Gv) < 1e-9

    def test_gnh_is_symmetric_psd(self, tanh_net):
        params, data = tanh_net
        G = model_core.dense_gnh(params, data)
        np.testing.assert_allclose(G, G.T, atol=1e-12)
        eig = np.linalg.eigvalsh(0.5 * (G + G.T))
        assert eig.min() > -1e-10 * eig.max()

    def test_hessian_is_symmetric(self, tanh_net):
        params, data = tanh_net
        H = model_core.dense_hessian(params, data)
        np.testing.assert_allclose(H, H.T, atol=1e-10)

    def test_gnh_equals_hessian_for_linear_model(self, blobs):
        spec = MlpSpec((blobs.d, blobs.num_classes))
        params = random_params(spec, seed=2, l2=0.1)
        v = np.random.default_rng(0).standard_normal(params.p)
        np.testing.assert_allclose(model_core.hvp(params, blobs, v), model_core.gnh_vp(params, blobs, v),
                                   rtol=1e-12, atol=1e-14)

    def test_indices_select_a_minibatch(self, tanh_net):
        params, data = tanh_net
        v = np.random.default_rng(1).standard_normal(params.p)
        idx = np.array([3, 9, 11, 20])
        np.testing.assert_allclose(model_core.gnh_vp(params, data, v, indices=idx),
                                   model_core.gnh_vp(params, data.subset(idx), v), atol=1e-14)

    def test_wrong_vector_length_rejected(self, tanh_net):
        params, data = tanh_net
        with pytest.raises(ConfigError):
            model_core.gnh_vp(params, data, np.ones(params.p + 1))

    def test_dense_size_guard(self):
        spec = MlpSpec((100, 50, 10))
        params = model_core.init_params(spec, 0)
        data = random_dataset(3, 100, 10, seed=0)
        with pytest.raises(SizeGuardError):
            model_core.dense_gnh(params, data)

    def test_block_diagonal_zeroes_cross_layer_blocks(self, tanh_net):
        params, data = tanh_net
        G = model_core.dense_gnh(params, data)
        B = model_core.block_diagonal(G, params)
        first, second = model_core.layer_slices(params)
        np.testing.assert_array_equal(B[first, second], 0.0)
        np.testing.assert_array_equal(B[second, second], G[second, second])


class TestPseudoGradients:

    def test_deterministic_in_seed(self, tanh_net):
        params, data = tanh_net
        a = model_core.sample_pseudo_gradient(params, data.features[0], seed=4)
        b = model_core.sample_pseudo_gradient(params, data.features[0], seed=4)
        np.testing.assert_array_equal(a, b)

    def test_is_the_gradient_of_some_label(self, tanh_net):
        params, data = tanh_net
        x = data.features[1]
        pseudo = model_core.sample_pseudo_gradient(params, x, seed=9)
        candidates = [model_core.grad(params, Example(x, c)) for c in range(3)]
        assert any(np.allclose(pseudo, g, atol=1e-13) for g in candidates)

    def test_sampled_labels_follow_probabilities(self):
        probs = np.tile([0.2, 0.5, 0.3], (20000, 1))
        labels = model_core.sample_labels(probs, np.random.default_rng(0))
        freq = np.bincount(labels, minlength=3) / labels.size
        np.testing.assert_allclose(freq, [0.2, 0.5, 0.3], atol=0.02)

    def test_outer_products_average_to_gnh(self):
        spec = MlpSpec((3, 3, 3), "tanh")
        params = random_params(spec, seed=3, scale=0.5)
        data = random_dataset(5, 3, 3, seed=4)
        total = np.zeros((params.p, params.p))
        draws = 10000
        for k in range(draws):
            g = model_core.sample_pseudo_gradient(params, data.features[k % data.n], seed=k)
            total += np.outer(g, g)
        gnh = model_core.dense_gnh(params, data)
        assert np.linalg.norm(total / draws - gnh) / np.linalg.norm(gnh) < 0.05


class TestInitialization:

    def test_shapes_and_ranges(self):
        spec = MlpSpec((4, 3, 2))
        params = model_core.init_params(spec, seed=0)
        assert params.p == 3 * 5 + 2 * 4
        for W, fan_in in zip(params.layer_weights(), (4, 3)):
            assert np.all(W[:, -1] == 0.0)
            assert np.all(np.abs(W[:, :-1]) <= math.sqrt(6.0 / fan_in))
            assert np.any(W[:, :-1] != 0.0)

    def test_seeded(self):
        spec = MlpSpec((4, 3, 2), "tanh")
        a, b = model_core.init_params(spec, seed=5), model_core.init_params(spec, seed=5)
        np.testing.assert_array_equal(a.theta, b.theta)
        assert not np.array_equal(a.theta, model_core.init_params(spec, seed=6).theta)


class TestLoss:

    def test_uniform_logits_cost_log_c(self):
        params = ModelParams(np.zeros(30), MlpSpec((2, 10)))
        value = model_core.loss(params, Example(np.array([0.3, -1.2]), 4))
        assert value == pytest.approx(math.log(10.0), abs=1e-12)

    def test_two_class_closed_form(self):
        W = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])  # logits (1, 0)
        theta = W.reshape(-1, order="F")
        z = Example(np.array([2.0, -3.0]), 0)
        assert model_core.loss(ModelParams(theta, MlpSpec((2, 2))), z) == pytest.approx(0.313262, abs=1e-6)
        # l2 / 2 * ||theta||^2 with ||theta|| = 1
        assert model_core.loss(ModelParams(theta, MlpSpec((2, 2)), 0.5), z) == pytest.approx(0.563262, abs=1e-6)


class TestForward:

    def test_dimension_mismatch_rejected(self, tanh_net):
        params, _ = tanh_net
        with pytest.raises(DataFormatError):
            model_core.forward(params, np.ones(5))

    def test_non_finite_parameters_rejected(self, tanh_net):
        params, _ = tanh_net
        theta = params.theta.copy()
        theta[0] = np.nan
        with pytest.raises(NumericalError):
            ModelParams(theta, params.spec)

    def test_bias_is_last_column(self):
        spec = MlpSpec((2, 1))
        W = np.array([[0.0, 0.0, 1.5]])  # (p, d + 1), bias last
        params = ModelParams(W.reshape(-1, order="F"), spec)
        logits, _ = model_core.forward(params, np.array([3.0, -4.0]))
        assert logits[0] == 1.5


class TestTraining:

    def test_training_is_deterministic(self, blobs):
        spec = MlpSpec((blobs.d, 8, blobs.num_classes))
        config = TrainConfig(epochs=3, seed=5)
        a = model_core.train(spec, blobs, config)
        b = model_core.train(spec, blobs, config)
        np.testing.assert_array_equal(a.theta, b.theta)

    def test_separated_blobs_are_learned(self):
        data = generate_synthetic("gaussian_blobs", 200, 2, 2, seed=1, separation=6.0)
        params = model_core.train(MlpSpec((2, 2)), data, TrainConfig(epochs=20))
        assert model_core.accuracy(params, data) >= 0.99

    def test_newton_polish_reaches_stationary_point(self, convex_problem):
        _, dataset, _, params = convex_problem
        assert np.linalg.norm(model_core.batch_grad(params, dataset)) < 1e-8

    def test_provenance_records_training(self, blobs):
        spec = MlpSpec((blobs.d, blobs.num_classes))
        params = model_core.train(spec, blobs, TrainConfig(epochs=2, seed=3))
        assert params.provenance["init_seed"] == 3
        assert params.provenance["n_train"] == blobs.n
        assert np.isfinite(params.provenance["final_risk"])

    def test_normalizer_below_n_rejected(self, blobs):
        spec = MlpSpec((blobs.d, blobs.num_classes))
        with pytest.raises(ConfigError):
            model_core.train(spec, blobs, TrainConfig(epochs=1), normalizer=blobs.n - 1)

    def test_zero_epochs_returns_initialization(self, blobs):
        spec = MlpSpec((blobs.d, 5, blobs.num_classes), "tanh")
        params = model_core.train(spec, blobs, TrainConfig(epochs=0, seed=7, l2_penalty=1e-3))
        np.testing.assert_array_equal(params.theta, model_core.init_params(spec, 7, 1e-3).theta)
        assert params.l2_penalty == 1e-3

    def test_model_width_must_match_data(self, blobs):
        with pytest.raises(DataFormatError):
            model_core.train(MlpSpec((blobs.d + 1, 3)), blobs, TrainConfig(epochs=1))
