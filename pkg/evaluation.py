#!/usr/bin/env python3
"""
evaluation.py
Ground-truth harnesses: leave-one-out and subset retraining oracles, the
Linear Datamodeling Score, and mislabel detection with label corruption.
"""

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from tqdm import tqdm

import attribution
import model_core
from config import SUBSET_RUN_VERSION
from data_io import read_container, write_container
from data_models import (
    ConfigError, CorruptionSpec, DataFormatError, Dataset, LdsConfig, LdsResult,
    MlpSpec, ModelParams, NumericalError, SubsetRun, TrainConfig, UsageError,
)
from logger_setup import get_logger
from utils import array_digest, safe_json_dumps, sha256_bytes

logger = get_logger("evaluation")


# -------- RETRAINING ORACLES --------

def retrain_subset(spec: MlpSpec, dataset: Dataset, mask, config: TrainConfig) -> ModelParams:
    """Train from the shared init seed on the masked rows, risk normalized by subset size"""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (dataset.n,):
        raise ConfigError(f"mask has shape {mask.shape}, expected ({dataset.n},)")
    if not mask.any():
        raise ConfigError("subset mask selects no training rows")
    return model_core.train(spec, dataset.subset(mask), config)


def retrain_without(spec: MlpSpec, dataset: Dataset, index: int, config: TrainConfig) -> ModelParams:
    """Exact leave-one-out optimum of (1/n) * sum_{i != index} L_i with n the original size"""
    if not 0 <= index < dataset.n:
        raise UsageError(f"index {index} out of range for n = {dataset.n}")
    mask = np.ones(dataset.n, dtype=bool)
    mask[index] = False
    return model_core.train(spec, dataset.subset(mask), config, normalizer=dataset.n)


def loo_verification(spec: MlpSpec, dataset: Dataset, config: TrainConfig, params: ModelParams,
                     solver, z_test, indices: Optional[Sequence[int]] = None, jobs: int = 1,
                     logger=logger) -> Dict:
    """Influence-predicted test-loss change -(1/n) I_loss(z_i, z_test) against the exact
    change after retraining without z_i"""
    if indices is None:
        indices = range(dataset.n)
    indices = [int(i) for i in indices]
    n = dataset.n
    scores = attribution.influence_batch(solver, params, z_test, dataset, jobs=jobs)
    predicted = -scores[indices] / n
    base = model_core.loss(params, z_test)

    def actual_delta(i):
        return model_core.loss(retrain_without(spec, dataset, i, config), z_test) - base

    started = time.time()
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        actual = np.array(list(tqdm(pool.map(actual_delta, indices), total=len(indices),
                                    desc="LOO retrains", disable=len(indices) < 2)))
    rho = spearman(predicted, actual)
    logger.info("LOO verification over %d points: spearman %.4f (%.1fs)",
                len(indices), rho, time.time() - started)
    return {"indices": np.array(indices), "predicted": predicted, "actual": actual, "spearman": rho}


# -------- LINEAR DATAMODELING SCORE --------

def sample_subsets(n: int, alpha: float, M: int, seed: int) -> List[np.ndarray]:
    """M boolean masks with exactly ceil(alpha * n) entries each"""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"subsampling rate must lie in (0, 1), got {alpha}")
    if alpha * n < 1:
        raise ConfigError(f"alpha * n = {alpha * n} selects fewer than one row")
    k = math.ceil(round(alpha * n, 9))
    rng = np.random.default_rng(seed)
    masks = []
    for _ in range(M):
        mask = np.zeros(n, dtype=bool)
        mask[rng.choice(n, size=k, replace=False)] = True
        masks.append(mask)
    return masks


def spearman(xs, ys) -> float:
    """Pearson correlation of mean-tie ranks"""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ConfigError(f"spearman needs equal-length vectors, got {xs.shape} and {ys.shape}")
    if xs.size < 2:
        raise ConfigError("spearman needs at least two values")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise NumericalError("spearman correlation is undefined for constant input")
    rx = stats.rankdata(xs, method="average")
    ry = stats.rankdata(ys, method="average")
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.clip(rx @ ry / np.sqrt((rx @ rx) * (ry @ ry)), -1.0, 1.0))


def _run_key(spec, dataset, test_set, mask, config):
    payload = safe_json_dumps({
        "version": SUBSET_RUN_VERSION,
        "spec": spec.to_dict(),
        "train_config": config.to_dict(),
        "train": array_digest(dataset.features, dataset.labels),
        "test": array_digest(test_set.features, test_set.labels),
        "mask": array_digest(np.asarray(mask, dtype=np.int64)),
    })
    return sha256_bytes(payload.encode("utf-8"))


def _load_cached_run(path, index, key, seed):
    try:
        header, arrays = read_container(path, "subset_run")
    except (OSError, DataFormatError):
        return None
    if header["meta"].get("key") != key:
        return None
    return SubsetRun(index, arrays["mask"].astype(bool), seed, arrays["losses"])


def run_subsets(spec: MlpSpec, dataset: Dataset, test_set: Dataset, masks: Sequence[np.ndarray],
                config: TrainConfig, jobs: int = 1, cache_dir: Optional[str] = None,
                keep_params: bool = False, logger=logger) -> List[SubsetRun]:
    """Retrain on every mask and record per-test-point losses.

    With cache_dir, each finished run is stored as subset_<j>.bin keyed by a hash of
    its inputs; reruns with identical inputs load instead of retraining."""
    started = time.time()

    def execute(index):
        mask = np.asarray(masks[index], dtype=bool)
        path = key = None
        if cache_dir is not None:
            key = _run_key(spec, dataset, test_set, mask, config)
            path = os.path.join(cache_dir, f"subset_{index:05d}.bin")
            cached = _load_cached_run(path, index, key, config.seed)
            if cached is not None and not keep_params:
                return cached, True
        params = retrain_subset(spec, dataset, mask, config)
        losses = model_core.per_sample_losses(params, test_set.features, test_set.labels)
        if not np.all(np.isfinite(losses)):
            raise NumericalError(f"non-finite test loss after subset retrain {index}")
        if path is not None:
            write_container(path, "subset_run", {"key": key, "index": index, "seed": config.seed},
                            {"mask": mask.astype(np.float64), "losses": losses})
        return SubsetRun(index, mask, config.seed, losses, params if keep_params else None), False

    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        done = list(tqdm(pool.map(execute, range(len(masks))), total=len(masks), desc="Subset retrains"))
    runs = [run for run, _ in done]
    reused = sum(1 for _, cached in done if cached)
    logger.info("Completed %d subset runs (%d reused) in %.1fs", len(runs), reused, time.time() - started)
    return runs


def lds_per_sample(tau, subset_runs: Sequence[SubsetRun], test_position: int) -> float:
    """Spearman over subsets of measured test loss against sum_{i in S_j} tau_i.

    test_position indexes the test point inside each run's loss vector."""
    if len(subset_runs) < 2:
        raise ConfigError("LDS needs at least two subset runs")
    tau = np.asarray(tau, dtype=np.float64)
    predicted = np.array([tau[run.mask].sum() for run in subset_runs])
    measured = np.array([run.losses[test_position] for run in subset_runs])
    return spearman(measured, predicted)


def sample_test_points(test_n: int, config: LdsConfig) -> np.ndarray:
    count = min(config.test_sample_count, test_n)
    rng = np.random.default_rng(config.test_seed)
    return np.sort(rng.choice(test_n, size=count, replace=False))


def lds(test_set: Dataset, attribute: Callable, subset_runs: Sequence[SubsetRun],
        config: LdsConfig, test_indices=None, logger=logger) -> LdsResult:
    """Mean per-point LDS; attribute(example) returns the n-vector of scores for one test point"""
    if test_indices is None:
        test_indices = sample_test_points(test_set.n, config)
    test_indices = np.asarray(test_indices, dtype=np.int64)
    per_point = np.array([lds_per_sample(attribute(test_set[int(t)]), subset_runs, int(t))
                          for t in tqdm(test_indices, desc="LDS", disable=len(test_indices) < 2)])
    result = LdsResult(float(per_point.mean()), per_point, test_indices)
    logger.info("LDS %.4f over %d test points, %d subsets", result.mean, len(test_indices), len(subset_runs))
    return result


def oracle_scores(subset_runs: Sequence[SubsetRun], test_position: int, n: int) -> np.ndarray:
    """Least-squares linear datamodel fitted to the measured losses; its LDS is the
    ceiling a linear attribution can reach on these runs"""
    masks = np.array([run.mask for run in subset_runs], dtype=np.float64)
    measured = np.array([run.losses[test_position] for run in subset_runs])
    design = np.hstack([masks, np.ones((masks.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(design, measured, rcond=None)
    return coef[:n]


# -------- MISLABEL DETECTION --------

def corrupt_labels(dataset: Dataset, fraction: float, seed: int) -> Tuple[Dataset, CorruptionSpec]:
    """Flip floor(fraction * n) labels, each to a uniformly drawn different class"""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"corruption fraction must lie in (0, 1), got {fraction}")
    C = dataset.num_classes
    if C < 2:
        raise ConfigError("label corruption needs at least two classes")
    rng = np.random.default_rng(seed)
    count = int(math.floor(fraction * dataset.n))
    chosen = np.sort(rng.choice(dataset.n, size=count, replace=False))
    shifts = rng.integers(1, C, size=count)
    labels = dataset.labels.copy()
    flips = {}
    for i, shift in zip(chosen, shifts):
        old = int(labels[i])
        new = (old + int(shift)) % C
        labels[i] = new
        flips[int(i)] = (old, new)
    return dataset.with_labels(labels), CorruptionSpec(fraction, seed, flips)


def restore_labels(dataset: Dataset, spec: CorruptionSpec) -> Dataset:
    labels = dataset.labels.copy()
    for i, (old, new) in spec.flips.items():
        if not 0 <= i < dataset.n or int(labels[i]) != new:
            raise UsageError(f"dataset does not carry the corrupted label at index {i}")
        labels[i] = old
    return dataset.with_labels(labels)


def random_ranking(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n)


def detection_curve(ranking, spec: CorruptionSpec, budgets: Sequence[float]) -> List[Tuple[float, float]]:
    """(budget, recall) with recall = |corrupted in top ceil(budget * n)| / |corrupted|"""
    ranking = np.asarray(ranking, dtype=np.int64)
    n = ranking.size
    if n == 0 or not np.array_equal(np.sort(ranking), np.arange(n)):
        raise UsageError("ranking is not a permutation of the training indices")
    corrupted = spec.corrupted_indices
    if corrupted.size == 0:
        raise UsageError("corruption spec has no flipped labels")
    if corrupted.max() >= n:
        raise UsageError("corruption spec refers to indices beyond the ranking")
    # position of every index inside the ranking
    position = np.empty(n, dtype=np.int64)
    position[ranking] = np.arange(n)
    curve = []
    for budget in budgets:
        if not 0.0 < budget <= 1.0:
            raise ConfigError(f"inspection budget must lie in (0, 1], got {budget}")
        inspected = math.ceil(round(budget * n, 9))
        found = int(np.sum(position[corrupted] < inspected))
        curve.append((float(budget), found / corrupted.size))
    return curve


def random_attribution(n: int, seed: int) -> Callable:
    """Null-baseline attribution: Gaussian scores seeded by the test point's contents"""
    def attribute(z):
        key = int(array_digest(np.asarray(z.features, dtype=np.float64), np.array([z.label]))[:15], 16)
        return np.random.default_rng([seed, key]).standard_normal(n)
    return attribute
