#!/usr/bin/env python3
"""
attribution.py
Influence scores of training points on parameters and test losses, batch
attribution over a training set, self-influence ranking and the
leave-one-out parameter-delta approximation.

Every function takes the trained params alongside the fitted solver; gradients
are taken at those params.
"""

import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Tuple

import numpy as np

import model_core
from config import CHUNK_SIZE
from data_models import ConfigError, Dataset, Example, InfluenceRecord, ModelParams, ParamInfluence
from logger_setup import get_logger
from utils import array_digest, iter_chunks

logger = get_logger("attribution")


class GradientCache:
    """Thread-safe LRU store of per-sample training gradients keyed by (checkpoint hash, index)"""

    def __init__(self, max_entries=4096, logger=logger):
        self.entries = OrderedDict()
        self.lock = threading.Lock()
        self.max_entries = max_entries
        self.hits = 0
        self.misses = 0
        self.logger = logger

    @staticmethod
    def checkpoint_key(params: ModelParams):
        return array_digest(params.theta)

    def get(self, key, index):
        with self.lock:
            g = self.entries.get((key, index))
            if g is None:
                self.misses += 1
                return None
            self.entries.move_to_end((key, index))
            self.hits += 1
            return g

    def put(self, key, index, g):
        with self.lock:
            self.entries[(key, index)] = g
            self.entries.move_to_end((key, index))
            while len(self.entries) > self.max_entries:
                self.entries.popitem(last=False)

    def clear(self):
        with self.lock:
            self.entries.clear()

    def __len__(self):
        with self.lock:
            return len(self.entries)


def train_gradients(params: ModelParams, dataset: Dataset, start: int, stop: int,
                    cache: Optional[GradientCache] = None) -> np.ndarray:
    """Per-sample gradients for rows [start, stop), served from cache where present"""
    if cache is None:
        return model_core.per_sample_grads(params, dataset.features[start:stop], dataset.labels[start:stop])
    key = cache.checkpoint_key(params)
    rows = [cache.get(key, i) for i in range(start, stop)]
    missing = [i for i, g in zip(range(start, stop), rows) if g is None]
    if missing:
        fresh = model_core.per_sample_grads(params, dataset.features[missing], dataset.labels[missing])
        for i, g in zip(missing, fresh):
            g.flags.writeable = False
            cache.put(key, i, g)
            rows[i - start] = g
    return np.vstack(rows)


# -------- SCORES --------

def influence_params(solver, params: ModelParams, z: Example, train_index: int = -1) -> ParamInfluence:
    """-(G + lambda I)^-1 grad L(z)"""
    direction = -solver.apply(model_core.grad(params, z))
    return ParamInfluence(train_index, direction)


def influence_loss(solver, params: ModelParams, z_train: Example, z_test: Example) -> float:
    """-grad L(z_test)^T (G + lambda I)^-1 grad L(z_train)"""
    g_test = model_core.grad(params, z_test)
    return float(-g_test @ solver.apply(model_core.grad(params, z_train)))


def influence_batch(solver, params: ModelParams, z_test: Example, dataset: Dataset,
                    jobs: int = 1, cache: Optional[GradientCache] = None) -> np.ndarray:
    """Scores tau_i = -grad L(z_i)^T v for every training row, with v = apply(grad L(z_test))
    computed once. Chunks write into their own slots so jobs never changes a value."""
    v = solver.apply(model_core.grad(params, z_test))
    scores = np.empty(dataset.n)

    def score_chunk(bounds):
        start, stop = bounds
        scores[start:stop] = -(train_gradients(params, dataset, start, stop, cache) @ v)

    chunks = list(iter_chunks(dataset.n, CHUNK_SIZE))
    if jobs <= 1 or len(chunks) == 1:
        for bounds in chunks:
            score_chunk(bounds)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(score_chunk, chunks))
    return scores


def self_influence(solver, params: ModelParams, z: Example) -> float:
    """grad L(z)^T (G + lambda I)^-1 grad L(z), the positive quadratic form"""
    g = model_core.grad(params, z)
    return float(g @ solver.apply(g))


def self_influence_scores(solver, params: ModelParams, dataset: Dataset, jobs: int = 1) -> np.ndarray:
    scores = np.empty(dataset.n)

    def score(i):
        scores[i] = self_influence(solver, params, dataset[i])

    if jobs <= 1:
        for i in range(dataset.n):
            score(i)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(score, range(dataset.n)))
    return scores


def loo_delta_approx(solver, params: ModelParams, z: Example, n: int) -> np.ndarray:
    """Predicted theta_{-z} - theta: removal as up-weighting by -1/n"""
    if n < 1:
        raise ConfigError(f"n must be at least 1, got {n}")
    return -influence_params(solver, params, z).direction / n


# -------- RANKINGS --------

def descending_order(scores) -> np.ndarray:
    """Indices by descending score, ties by ascending index"""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def rank_by_self_influence(solver, params: ModelParams, dataset: Dataset, jobs: int = 1) -> np.ndarray:
    return descending_order(self_influence_scores(solver, params, dataset, jobs))


def rank_by_loss(params: ModelParams, dataset: Dataset) -> np.ndarray:
    """Baseline: training points by descending loss"""
    return descending_order(model_core.per_sample_losses(params, dataset.features, dataset.labels))


def top_influences(scores, k: int) -> Tuple[List[int], List[int]]:
    """k most positive and k most negative training indices"""
    if k < 1:
        raise ConfigError("top-k must be positive")
    order = descending_order(scores)
    k = min(k, order.size)
    ascending = np.argsort(np.asarray(scores, dtype=np.float64), kind="stable")
    return order[:k].tolist(), ascending[:k].tolist()


def score_records(scores, test_index, solver) -> List[InfluenceRecord]:
    return [InfluenceRecord(int(i), test_index, float(s), solver.solver_id, solver.damping)
            for i, s in enumerate(scores)]
