"""Retraining oracles, the Linear Datamodeling Score and mislabel detection"""

import numpy as np
import pytest
from scipy import stats

import attribution
import evaluation
import ihvp
import model_core
from data_io import read_idx
from data_models import (
    ConfigError, CorruptionSpec, Dataset, LdsConfig, MlpSpec, NumericalError, SolverConfig, SubsetRun,
    TrainConfig, UsageError,
)
from helpers import convex_config, exact_solver, mnist_training_paths


def _linear_runs(n=8, M=20, seed=0):
    """Subset runs whose losses are exactly w . mask"""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(n)
    masks = evaluation.sample_subsets(n, 0.5, M, seed)
    runs = [SubsetRun(j, m, 0, np.array([w @ m, -(w @ m)])) for j, m in enumerate(masks)]
    return w, runs


class TestSubsets:

    def test_every_mask_has_ceil_alpha_n_rows(self):
        masks = evaluation.sample_subsets(10, 0.3, 5, seed=1)
        assert len(masks) == 5
        assert all(m.dtype == bool and m.sum() == 3 for m in masks)

    def test_rounding_up(self):
        assert all(m.sum() == 4 for m in evaluation.sample_subsets(7, 0.5, 3, seed=0))

    def test_seeded(self):
        a = evaluation.sample_subsets(50, 0.5, 4, seed=9)
        b = evaluation.sample_subsets(50, 0.5, 4, seed=9)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not np.array_equal(a[0], a[1])

    def test_every_row_is_included_at_rate_alpha(self):
        masks = evaluation.sample_subsets(20, 0.5, 1000, seed=2)
        counts = np.sum(masks, axis=0)
        sigma = np.sqrt(1000 * 0.5 * 0.5)
        assert np.all(np.abs(counts - 500) < 5 * sigma)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, 1.5])
    def test_rate_out_of_range(self, alpha):
        with pytest.raises(ConfigError):
            evaluation.sample_subsets(10, alpha, 2, seed=0)

    def test_test_points_are_sorted_and_distinct(self):
        idx = evaluation.sample_test_points(30, LdsConfig(test_sample_count=10, test_seed=4))
        assert len(set(idx.tolist())) == 10
        assert np.all(np.diff(idx) > 0)
        assert evaluation.sample_test_points(5, LdsConfig(test_sample_count=10)).tolist() == [0, 1, 2, 3, 4]


class TestSpearman:

    def test_known_value(self):
        assert evaluation.spearman([1, 2, 3], [2, 3, 1]) == pytest.approx(-0.5)

    def test_ties_use_average_ranks(self):
        xs, ys = [1.0, 1.0, 2.0, 5.0, 3.0], [0.3, 0.1, 0.2, 0.9, 0.4]
        assert evaluation.spearman(xs, ys) == pytest.approx(stats.spearmanr(xs, ys)[0], abs=1e-12)

    def test_constant_input_is_undefined(self):
        with pytest.raises(NumericalError):
            evaluation.spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            evaluation.spearman([1.0, 2.0], [1.0, 2.0, 3.0])


class TestLds:

    def test_exact_linear_scores_reach_one(self):
        w, runs = _linear_runs()
        assert evaluation.lds_per_sample(w, runs, 0) == pytest.approx(1.0)

    def test_negated_scores_reach_minus_one(self):
        w, runs = _linear_runs()
        assert evaluation.lds_per_sample(-w, runs, 0) == pytest.approx(-1.0)
        assert evaluation.lds_per_sample(w, runs, 1) == pytest.approx(-1.0)

    def test_zero_scores_are_undefined(self):
        w, runs = _linear_runs()
        with pytest.raises(NumericalError):
            evaluation.lds_per_sample(np.zeros_like(w), runs, 0)

    def test_single_run_rejected(self):
        w, runs = _linear_runs()
        with pytest.raises(ConfigError):
            evaluation.lds_per_sample(w, runs[:1], 0)

    def test_datamodel_oracle_is_perfect_on_linear_losses(self):
        _, runs = _linear_runs(seed=3)
        tau = evaluation.oracle_scores(runs, 0, 8)
        assert evaluation.lds_per_sample(tau, runs, 0) == pytest.approx(1.0)

    def test_mean_over_test_points(self):
        w, runs = _linear_runs()
        test_set = Dataset(np.zeros((2, 3)), np.array([0, 1]), 2)
        result = evaluation.lds(test_set, lambda z: w, runs, LdsConfig(test_sample_count=2))
        assert result.mean == pytest.approx(0.0)
        np.testing.assert_allclose(result.per_point, [1.0, -1.0])
        assert result.test_indices.tolist() == [0, 1]


class TestSubsetRetraining:

    def test_retraining_is_deterministic(self, blobs):
        spec = MlpSpec((blobs.d, blobs.num_classes))
        mask = evaluation.sample_subsets(blobs.n, 0.5, 1, seed=2)[0]
        config = TrainConfig(epochs=2, seed=4)
        a = evaluation.retrain_subset(spec, blobs, mask, config)
        b = evaluation.retrain_subset(spec, blobs, mask, config)
        np.testing.assert_array_equal(a.theta, b.theta)

    def test_bad_masks_rejected(self, blobs):
        spec = MlpSpec((blobs.d, blobs.num_classes))
        with pytest.raises(ConfigError):
            evaluation.retrain_subset(spec, blobs, np.zeros(blobs.n, dtype=bool), TrainConfig(epochs=1))
        with pytest.raises(ConfigError):
            evaluation.retrain_subset(spec, blobs, np.ones(blobs.n - 1, dtype=bool), TrainConfig(epochs=1))
        with pytest.raises(UsageError):
            evaluation.retrain_without(spec, blobs, blobs.n, TrainConfig(epochs=1))

    def test_finished_runs_are_reused(self, tmp_path, blobs, monkeypatch):
        spec = MlpSpec((blobs.d, blobs.num_classes))
        masks = evaluation.sample_subsets(blobs.n, 0.5, 3, seed=0)
        test_set = blobs.subset(np.arange(5))
        config = TrainConfig(epochs=1, seed=2)
        calls = []
        real = evaluation.retrain_subset

        def counting(*args, **kwargs):
            calls.append(1)
            return real(*args, **kwargs)

        monkeypatch.setattr(evaluation, "retrain_subset", counting)
        first = evaluation.run_subsets(spec, blobs, test_set, masks, config, cache_dir=str(tmp_path))
        assert len(calls) == 3
        second = evaluation.run_subsets(spec, blobs, test_set, masks, config, jobs=2, cache_dir=str(tmp_path))
        assert len(calls) == 3
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.losses, b.losses)
            np.testing.assert_array_equal(a.mask, b.mask)
        evaluation.run_subsets(spec, blobs, test_set, masks, TrainConfig(epochs=1, seed=3), cache_dir=str(tmp_path))
        assert len(calls) == 6


class TestCorruption:

    def test_flips_exactly_floor_fraction_n(self, blobs):
        corrupted, spec = evaluation.corrupt_labels(blobs, 0.1, seed=5)
        assert len(spec.flips) == 12
        changed = np.flatnonzero(corrupted.labels != blobs.labels)
        assert changed.tolist() == spec.corrupted_indices.tolist()
        for i, (old, new) in spec.flips.items():
            assert old == blobs.labels[i] and new == corrupted.labels[i] and old != new

    def test_seeded(self, blobs):
        _, a = evaluation.corrupt_labels(blobs, 0.2, seed=1)
        _, b = evaluation.corrupt_labels(blobs, 0.2, seed=1)
        assert a.flips == b.flips

    def test_restore_round_trip(self, blobs):
        corrupted, spec = evaluation.corrupt_labels(blobs, 0.25, seed=2)
        np.testing.assert_array_equal(evaluation.restore_labels(corrupted, spec).labels, blobs.labels)
        with pytest.raises(UsageError):
            evaluation.restore_labels(blobs, spec)

    @pytest.mark.parametrize("fraction", [0.0, 1.0])
    def test_fraction_out_of_range(self, blobs, fraction):
        with pytest.raises(ConfigError):
            evaluation.corrupt_labels(blobs, fraction, seed=0)


class TestDetectionCurve:

    SPEC = CorruptionSpec(0.2, 0, {2: (0, 1), 5: (1, 0)})

    def test_recall_at_budgets(self):
        ranking = [2, 0, 5, 1, 3, 4, 6, 7, 8, 9]
        curve = evaluation.detection_curve(ranking, self.SPEC, [0.1, 0.2, 0.3, 1.0])
        assert curve == [(0.1, 0.5), (0.2, 0.5), (0.3, 1.0), (1.0, 1.0)]

    def test_random_ranking_curve_is_monotone(self, blobs):
        corrupted, spec = evaluation.corrupt_labels(blobs, 0.1, seed=0)
        curve = evaluation.detection_curve(evaluation.random_ranking(blobs.n, 3), spec,
                                           [0.1, 0.2, 0.3, 0.4, 0.5, 1.0])
        recalls = [r for _, r in curve]
        assert recalls == sorted(recalls)
        assert recalls[-1] == 1.0

    def test_ranking_must_be_a_permutation(self):
        with pytest.raises(UsageError):
            evaluation.detection_curve([2, 2, 5, 1, 3, 4, 6, 7, 8, 9], self.SPEC, [0.1])

    def test_budget_out_of_range(self):
        with pytest.raises(ConfigError):
            evaluation.detection_curve(list(range(10)), self.SPEC, [0.0])


def test_random_attribution_is_seeded_per_point(blobs):
    attribute = evaluation.random_attribution(blobs.n, seed=0)
    np.testing.assert_array_equal(attribute(blobs[0]), attribute(blobs[0]))
    assert not np.array_equal(attribute(blobs[0]), attribute(blobs[1]))


@pytest.mark.slow
def test_influence_beats_random_on_convex_problem(convex_problem):
    spec, dataset, heldout, params = convex_problem
    config = LdsConfig(num_subsets=50, alpha=0.5, seed=0, test_sample_count=50)
    masks = evaluation.sample_subsets(dataset.n, config.alpha, config.num_subsets, config.seed)
    runs = evaluation.run_subsets(spec, dataset, heldout, masks, convex_config(), jobs=2)
    solver = exact_solver(params, dataset, 1e-6)
    influence = evaluation.lds(heldout, lambda z: attribution.influence_batch(solver, params, z, dataset),
                               runs, config)
    baseline = evaluation.lds(heldout, evaluation.random_attribution(dataset.n, 0), runs, config)
    assert influence.mean >= 0.3
    assert abs(baseline.mean) < 0.1


@pytest.mark.slow
def test_self_influence_finds_flipped_mnist_labels(mnist_dir):
    clean = read_idx(*mnist_training_paths(mnist_dir), limit=5000)
    corrupted, spec = evaluation.corrupt_labels(clean, 0.1, seed=0)
    mlp = MlpSpec((784, 32, 10), "relu")
    params = model_core.train(mlp, corrupted, TrainConfig(learning_rate=0.1, epochs=10, seed=0, l2_penalty=1e-4))
    solver = ihvp.build_solver(params, corrupted, SolverConfig(name="ekfac", damping=1e-3))
    ranking = attribution.rank_by_self_influence(solver, params, corrupted, jobs=4)
    curve = evaluation.detection_curve(ranking, spec, [0.1, 0.2, 0.3, 0.4, 0.5])
    recalls = [r for _, r in curve]
    assert recalls == sorted(recalls)
    assert recalls[0] >= 0.3
