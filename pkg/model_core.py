#!/usr/bin/env python3
"""
model_core.py
Deterministic MLP training and differentiation: per-sample gradients,
Hessian-vector and Gauss-Newton-vector products, pseudo-gradient sampling.

Parameter layout: layer l is a (p_l, d_l + 1) matrix whose last column is the
bias (inputs carry an appended constant 1). theta concatenates the column-major
flattening of every layer, so the per-sample gradient of layer l is
vec(Dy a^T) = kron(a, Dy).
"""

from __future__ import annotations

import math
import time
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.special import logsumexp, softmax

from config import DENSE_SIZE_GUARD
from data_models import (
    ConfigError, DataFormatError, Dataset, Example, ForwardCache, MlpSpec,
    ModelParams, NumericalError, SizeGuardError, TrainConfig, TrainingDivergence,
)
from logger_setup import get_logger
from utils import iter_chunks

logger = get_logger("model_core")


# -------- LAYOUT HELPERS --------

def _offsets(spec: MlpSpec) -> List[int]:
    out = [0]
    for p_l, d_l in spec.layer_shapes:
        out.append(out[-1] + p_l * d_l)
    return out


def _unflatten(spec: MlpSpec, vec: np.ndarray) -> List[np.ndarray]:
    offs = _offsets(spec)
    return [vec[offs[i]:offs[i + 1]].reshape(shape, order="F")
            for i, shape in enumerate(spec.layer_shapes)]


def _flatten(mats: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([m.reshape(-1, order="F") for m in mats])


def layer_slices(params: ModelParams) -> List[slice]:
    """Slices of theta belonging to each layer"""
    offs = params.offsets
    return [slice(offs[i], offs[i + 1]) for i in range(len(offs) - 1)]


def block_diagonal(matrix: np.ndarray, params: ModelParams) -> np.ndarray:
    """Copy of a p x p matrix with every cross-layer block zeroed"""
    out = np.zeros_like(matrix)
    for s in layer_slices(params):
        out[s, s] = matrix[s, s]
    return out


def _as_batch(spec: MlpSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DataFormatError(
            f"feature dimension {X.shape[-1]} does not match model input {spec.input_dim}")
    return X


# -------- ACTIVATIONS --------
# relu'(0) is taken as 0

def _activate(activation, y):
    if activation == "relu":
        return np.maximum(y, 0.0)
    return np.tanh(y)


def _activation_derivs(activation, y):
    """First and second derivative of the activation at y"""
    if activation == "relu":
        return (y > 0.0).astype(np.float64), np.zeros_like(y)
    t = np.tanh(y)
    d1 = 1.0 - t * t
    return d1, -2.0 * t * d1


# -------- INITIALIZATION / FORWARD --------

def init_params(spec: MlpSpec, seed: int, l2_penalty: float = 0.0) -> ModelParams:
    """Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights, zero biases"""
    rng = np.random.default_rng(seed)
    mats = []
    for p_l, d_aug in spec.layer_shapes:
        fan_in = d_aug - 1
        bound = math.sqrt(6.0 / fan_in)
        W = np.zeros((p_l, d_aug))
        W[:, :fan_in] = rng.uniform(-bound, bound, size=(p_l, fan_in))
        mats.append(W)
    return ModelParams(_flatten(mats), spec, l2_penalty, {"init_seed": int(seed)})


def _forward(spec: MlpSpec, weights: List[np.ndarray], X: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    m = X.shape[0]
    ones = np.ones((m, 1))
    inputs, pre = [], []
    a = X
    for l, W in enumerate(weights):
        a_aug = np.hstack([a, ones])
        y = a_aug @ W.T
        inputs.append(a_aug)
        pre.append(y)
        a = _activate(spec.activation, y) if l < len(weights) - 1 else y
    return a, ForwardCache(inputs, pre)


def forward_batch(params: ModelParams, X) -> Tuple[np.ndarray, ForwardCache]:
    """Logits (m, C) and the per-layer cache for a batch of inputs"""
    X = _as_batch(params.spec, X)
    return _forward(params.spec, params.layer_weights(), X)


def forward(params: ModelParams, x) -> Tuple[np.ndarray, ForwardCache]:
    """Logits (C,) and cache for a single input vector"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DataFormatError("forward expects a single feature vector")
    logits, cache = forward_batch(params, x)
    return logits[0], cache


def predict(params: ModelParams, X) -> np.ndarray:
    logits, _ = forward_batch(params, X)
    return np.argmax(logits, axis=1)


def accuracy(params: ModelParams, dataset: Dataset) -> float:
    return float(np.mean(predict(params, dataset.features) == dataset.labels))


# -------- LOSS / GRADIENTS --------

def _cross_entropy(logits, labels):
    return logsumexp(logits, axis=1) - logits[np.arange(logits.shape[0]), labels]


def per_sample_losses(params: ModelParams, X, labels) -> np.ndarray:
    """Cross-entropy plus the L2 term for every row"""
    logits, _ = forward_batch(params, X)
    penalty = 0.5 * params.l2_penalty * float(params.theta @ params.theta)
    return _cross_entropy(logits, np.asarray(labels)) + penalty


def loss(params: ModelParams, z: Example) -> float:
    """-log softmax(f(x))_y + (l2/2) * ||theta||^2"""
    return float(per_sample_losses(params, z.features, [z.label])[0])


def empirical_risk(params: ModelParams, dataset: Dataset, normalizer: Optional[float] = None) -> float:
    """(1/normalizer) * sum of per-sample losses (normalizer defaults to n)"""
    total = 0.0
    for start, stop in iter_chunks(dataset.n):
        total += float(np.sum(per_sample_losses(
            params, dataset.features[start:stop], dataset.labels[start:stop])))
    return total / (normalizer or dataset.n)


def _preactivation_grads(spec, weights, cache, g_out) -> List[np.ndarray]:
    """Backpropagate dL/dlogits to dL/dy_l for every layer"""
    grads = [None] * len(weights)
    g = g_out
    for l in reversed(range(len(weights))):
        grads[l] = g
        if l > 0:
            d1, _ = _activation_derivs(spec.activation, cache.preactivations[l - 1])
            g = (g @ weights[l][:, :-1]) * d1
    return grads


def _one_hot(labels, num_classes):
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _grad_sum(spec, weights, X, labels) -> np.ndarray:
    """Sum over rows of the cross-entropy gradient (no L2 term)"""
    logits, cache = _forward(spec, weights, X)
    g_out = softmax(logits, axis=1) - _one_hot(labels, spec.num_classes)
    gs = _preactivation_grads(spec, weights, cache, g_out)
    return _flatten([g.T @ a for g, a in zip(gs, cache.inputs)])


def _risk_grad(spec, theta, l2, X, labels, normalizer) -> np.ndarray:
    """Gradient of (1/normalizer) * sum_i L_i over the given rows, chunks summed in index order"""
    weights = _unflatten(spec, theta)
    total = np.zeros_like(theta)
    for start, stop in iter_chunks(X.shape[0]):
        total += _grad_sum(spec, weights, X[start:stop], labels[start:stop])
    return (total + X.shape[0] * l2 * theta) / normalizer


def per_sample_grads(params: ModelParams, X, labels) -> np.ndarray:
    """(m, p) matrix of per-sample loss gradients, L2 term included"""
    X = _as_batch(params.spec, X)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    weights = params.layer_weights()
    logits, cache = _forward(params.spec, weights, X)
    g_out = softmax(logits, axis=1) - _one_hot(labels, params.spec.num_classes)
    gs = _preactivation_grads(params.spec, weights, cache, g_out)
    m = X.shape[0]
    blocks = [np.einsum("mj,mi->mji", a, g).reshape(m, -1) for g, a in zip(gs, cache.inputs)]
    return np.hstack(blocks) + params.l2_penalty * params.theta


def grad(params: ModelParams, z: Example) -> np.ndarray:
    """Exact gradient of loss(params, z)"""
    X = _as_batch(params.spec, z.features)
    return _risk_grad(params.spec, params.theta, params.l2_penalty,
                      X, np.array([z.label]), 1.0)


def batch_grad(params: ModelParams, dataset: Dataset, indices=None) -> np.ndarray:
    """Mean of per-sample gradients over indices (all rows by default)"""
    if indices is None:
        indices = np.arange(dataset.n)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ConfigError("batch_grad needs at least one index")
    return _risk_grad(params.spec, params.theta, params.l2_penalty,
                      dataset.features[indices], dataset.labels[indices], indices.size)


# -------- CURVATURE PRODUCTS --------

def _curvature_sum(spec, weights, X, labels, V, gauss_newton) -> np.ndarray:
    """Sum over rows of (Hessian or GNH of the cross-entropy) times the direction V.

    Forward pass propagates R{.} = directional derivatives; the backward pass
    either backpropagates H_out J v alone (GNH) or also differentiates the
    backward pass itself (exact Hessian)."""
    logits, cache = _forward(spec, weights, X)
    m = X.shape[0]
    L = len(weights)
    probs = softmax(logits, axis=1)

    R_inputs, R_pre = [], []
    Ra = np.zeros((m, spec.input_dim))
    zeros_col = np.zeros((m, 1))
    for l in range(L):
        Ra_aug = np.hstack([Ra, zeros_col])
        Ry = cache.inputs[l] @ V[l].T + Ra_aug @ weights[l].T
        R_inputs.append(Ra_aug)
        R_pre.append(Ry)
        if l < L - 1:
            d1, _ = _activation_derivs(spec.activation, cache.preactivations[l])
            Ra = d1 * Ry

    Rz = R_pre[-1]
    Rg = probs * Rz - probs * np.sum(probs * Rz, axis=1, keepdims=True)

    out = [None] * L
    if gauss_newton:
        gs = _preactivation_grads(spec, weights, cache, Rg)
        for l in range(L):
            out[l] = gs[l].T @ cache.inputs[l]
        return _flatten(out)

    g = probs - _one_hot(labels, spec.num_classes)
    for l in reversed(range(L)):
        out[l] = Rg.T @ cache.inputs[l] + g.T @ R_inputs[l]
        if l > 0:
            d1, d2 = _activation_derivs(spec.activation, cache.preactivations[l - 1])
            b = g @ weights[l][:, :-1]
            Rb = g @ V[l][:, :-1] + Rg @ weights[l][:, :-1]
            Rg = d2 * R_pre[l - 1] * b + d1 * Rb
            g = d1 * b
    return _flatten(out)


def _risk_curvature_vp(spec, theta, l2, X, labels, v, normalizer, gauss_newton) -> np.ndarray:
    weights = _unflatten(spec, theta)
    V = _unflatten(spec, v)
    total = np.zeros_like(theta)
    for start, stop in iter_chunks(X.shape[0]):
        total += _curvature_sum(spec, weights, X[start:stop], labels[start:stop], V, gauss_newton)
    return (total + X.shape[0] * l2 * v) / normalizer


def _check_vector(params, v):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != params.p:
        raise ConfigError(f"vector has length {v.shape[0]}, expected {params.p}")
    if not np.all(np.isfinite(v)):
        raise NumericalError("vector contains non-finite entries")
    return v


def hvp(params: ModelParams, dataset: Dataset, v, indices=None, normalizer=None) -> np.ndarray:
    """Exact Hessian of the empirical risk times v"""
    v = _check_vector(params, v)
    X, labels = _rows(dataset, indices)
    return _risk_curvature_vp(params.spec, params.theta, params.l2_penalty, X, labels, v,
                              normalizer or X.shape[0], gauss_newton=False)


def gnh_vp(params: ModelParams, dataset: Dataset, v, indices=None, normalizer=None) -> np.ndarray:
    """Gauss-Newton Hessian of the empirical risk times v (PSD); the L2 term adds l2 * v"""
    v = _check_vector(params, v)
    X, labels = _rows(dataset, indices)
    return _risk_curvature_vp(params.spec, params.theta, params.l2_penalty, X, labels, v,
                              normalizer or X.shape[0], gauss_newton=True)


def _rows(dataset, indices):
    if indices is None:
        return dataset.features, dataset.labels
    indices = np.asarray(indices, dtype=np.int64)
    return dataset.features[indices], dataset.labels[indices]


def _dense(params, matvec) -> np.ndarray:
    if params.p > DENSE_SIZE_GUARD:
        raise SizeGuardError(f"dense curvature refused: p = {params.p} > {DENSE_SIZE_GUARD}")
    M = np.empty((params.p, params.p))
    e = np.zeros(params.p)
    for j in range(params.p):
        e[j] = 1.0
        M[:, j] = matvec(e)
        e[j] = 0.0
    return M


def dense_hessian(params: ModelParams, dataset: Dataset, normalizer=None) -> np.ndarray:
    """Explicit p x p Hessian, one hvp per column (desk-scale oracle)"""
    return _dense(params, lambda e: hvp(params, dataset, e, normalizer=normalizer))


def dense_gnh(params: ModelParams, dataset: Dataset, normalizer=None) -> np.ndarray:
    """Explicit p x p Gauss-Newton Hessian, one gnh_vp per column (desk-scale oracle)"""
    return _dense(params, lambda e: gnh_vp(params, dataset, e, normalizer=normalizer))


# -------- PSEUDO-GRADIENTS --------

def sample_labels(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One label per row drawn from the row's categorical distribution"""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    labels = np.sum(cdf < u[:, None], axis=1)
    return np.minimum(labels, probs.shape[1] - 1)


def layer_backprop(params: ModelParams, X, output_grad):
    """Per-layer augmented inputs a_{l-1} and dL/dy_l for a caller-chosen dL/dlogits.

    output_grad maps the (m, C) softmax probabilities to an (m, C) output gradient."""
    X = _as_batch(params.spec, X)
    weights = params.layer_weights()
    logits, cache = _forward(params.spec, weights, X)
    g_out = output_grad(softmax(logits, axis=1))
    return cache.inputs, _preactivation_grads(params.spec, weights, cache, g_out)


def pseudo_preactivation_grads(params: ModelParams, X, rng: np.random.Generator):
    """Per-layer (augmented inputs, pre-activation pseudo-gradients) with labels
    drawn from the model's own predictive distribution"""
    C = params.spec.num_classes
    return layer_backprop(params, X, lambda probs: probs - _one_hot(sample_labels(probs, rng), C))


def class_preactivation_grads(params: ModelParams, X, label: int):
    """Like pseudo_preactivation_grads but with every row labelled `label`;
    also returns the probability of that label per row"""
    C = params.spec.num_classes
    seen = {}

    def output_grad(probs):
        seen["p"] = probs[:, label].copy()
        return probs - _one_hot(np.full(probs.shape[0], label, dtype=np.int64), C)

    inputs, gs = layer_backprop(params, X, output_grad)
    return inputs, gs, seen["p"]


def sample_pseudo_gradient(params: ModelParams, x, seed: int) -> np.ndarray:
    """Cross-entropy gradient at a label sampled from softmax(f(x)); deterministic in seed"""
    X = _as_batch(params.spec, x)
    logits, _ = forward_batch(params, X)
    label = sample_labels(softmax(logits, axis=1), np.random.default_rng(seed))
    return _risk_grad(params.spec, params.theta, params.l2_penalty, X, label, 1.0)


# -------- TRAINING --------

def _newton_polish(spec, theta, l2, dataset, normalizer, steps, grad_tol):
    """Damped Newton iterations with backtracking on the full empirical risk"""
    X, labels = dataset.features, dataset.labels

    def risk(t):
        p = ModelParams(t, spec, l2)
        return empirical_risk(p, dataset, normalizer)

    for step in range(steps):
        g = _risk_grad(spec, theta, l2, X, labels, normalizer)
        gnorm = float(np.linalg.norm(g))
        if gnorm < grad_tol:
            logger.debug("Newton polish converged after %d steps (|g| = %.3e)", step, gnorm)
            break
        current = ModelParams(theta, spec, l2)
        H = dense_hessian(current, dataset, normalizer=normalizer)
        H = 0.5 * (H + H.T)
        shift = 0.0
        while True:
            try:
                factor = scipy.linalg.cho_factor(H + shift * np.eye(H.shape[0]))
                break
            except np.linalg.LinAlgError:
                shift = max(2.0 * shift, 1e-8 * max(1.0, float(np.abs(np.diag(H)).max())))
        direction = -scipy.linalg.cho_solve(factor, g)
        f0 = risk(theta)
        slope = float(g @ direction)
        t = 1.0
        for _ in range(40):
            candidate = theta + t * direction
            if risk(candidate) <= f0 + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            logger.debug("Newton line search stalled at step %d", step)
            break
        theta = candidate
    return theta


def train(spec: MlpSpec, dataset: Dataset, config: TrainConfig,
          normalizer: Optional[float] = None) -> ModelParams:
    """Mini-batch SGD on (1/normalizer) * sum_i L_i with seeded per-epoch shuffles,
    optionally followed by Newton polishing.

    normalizer defaults to n; leave-one-out retrains pass the original n."""
    if dataset.d != spec.input_dim:
        raise DataFormatError(f"dataset has d = {dataset.d}, model expects {spec.input_dim}")
    if dataset.labels.max() >= spec.num_classes:
        raise DataFormatError("dataset labels exceed model output width")
    n = dataset.n
    normalizer = float(normalizer or n)
    if normalizer < n:
        raise ConfigError("normalizer must be at least the number of training rows")

    params = init_params(spec, config.seed, config.l2_penalty)
    theta = params.theta.copy()
    X, labels = dataset.features, dataset.labels
    shuffle_rng = np.random.default_rng([config.seed, 1])
    scale = n / normalizer
    started = time.time()
    final_risk = None

    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            order = shuffle_rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                g = _risk_grad(spec, theta, config.l2_penalty, X[idx], labels[idx], idx.size)
                theta = theta - config.learning_rate * scale * g
            if not np.all(np.isfinite(theta)):
                raise TrainingDivergence(epoch, float("nan"))
            final_risk = empirical_risk(ModelParams(theta, spec, config.l2_penalty), dataset, normalizer)
            if not math.isfinite(final_risk):
                raise TrainingDivergence(epoch, final_risk)
            logger.debug("epoch %d risk %.6f", epoch, final_risk)

    if config.newton_steps:
        theta = _newton_polish(spec, theta, config.l2_penalty, dataset, normalizer,
                               config.newton_steps, config.grad_tol)
    if not np.all(np.isfinite(theta)):
        raise TrainingDivergence(config.epochs, float("nan"))

    if config.epochs or config.newton_steps:
        final_risk = empirical_risk(ModelParams(theta, spec, config.l2_penalty), dataset, normalizer)
    provenance = {
        "init_seed": int(config.seed),
        "train_config": config.to_dict(),
        "normalizer": normalizer,
        "n_train": n,
        "final_risk": final_risk,
    }
    logger.debug("Trained %s on %d rows in %.2fs (risk %s)",
                 list(spec.layer_dims), n, time.time() - started, final_risk)
    return ModelParams(theta, spec, config.l2_penalty, provenance)
