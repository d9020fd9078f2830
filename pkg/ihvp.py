#!/usr/bin/env python3
"""
ihvp.py
Damped inverse-curvature-vector products (G + lambda I)^-1 v: exact dense
solve, LiSSA recursion, K-FAC and EK-FAC, plus the approximation-error bounds.

vec() is column-major throughout: the layer block v_l reshapes to
V_l = v_l.reshape((p_l, d_l + 1), order="F"), and
(A kron Y) vec(V) = vec(Y V A) for symmetric A.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg

import model_core
from config import (
    EIGEN_JITTER, FISHER_TYPES, LISSA_DEFAULT_ITERATIONS, LISSA_STEP_FRACTION, POWER_ITERATIONS,
    SOLVER_NAMES,
)
from data_io import read_container, write_container
from data_models import (
    ConfigError, Dataset, ModelParams, SolverConfig, SolverFailure,
    SpectralConditionError, UsageError,
)
from logger_setup import get_logger
from utils import iter_chunks

logger = get_logger("ihvp")


def _check_damping(damping):
    if not damping > 0:
        raise ConfigError(f"damping must be positive, got {damping}")
    return float(damping)


# -------- EXACT DENSE --------

def solve_dense(G, damping, v) -> np.ndarray:
    """(G + damping * I)^-1 v via Cholesky; v may be a vector or a (p, k) block"""
    damping = _check_damping(damping)
    G = np.asarray(G, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ConfigError(f"curvature must be square, got {G.shape}")
    if not (np.all(np.isfinite(G)) and np.all(np.isfinite(v))):
        raise SolverFailure("non-finite entries in curvature or vector")
    scale = max(1.0, float(np.abs(G).max()))
    if np.abs(G - G.T).max() > 1e-8 * scale:
        raise ConfigError("curvature matrix is not symmetric")
    try:
        factor = scipy.linalg.cho_factor(G + damping * np.eye(G.shape[0]))
    except np.linalg.LinAlgError as e:
        raise SolverFailure(f"damped curvature is not positive definite: {e}")
    return scipy.linalg.cho_solve(factor, v)


# -------- SPECTRAL ESTIMATES --------

def power_iteration(matvec, dim, iterations=POWER_ITERATIONS, seed=0) -> float:
    """Largest |eigenvalue| of a symmetric operator"""
    v = np.random.default_rng(seed).standard_normal(dim)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(iterations):
        w = matvec(v)
        estimate = float(np.linalg.norm(w))
        if estimate == 0.0:
            return 0.0
        v = w / estimate
    return estimate


def top_gnh_eigenvalue(params: ModelParams, dataset: Dataset, iterations=POWER_ITERATIONS, seed=0) -> float:
    return power_iteration(lambda u: model_core.gnh_vp(params, dataset, u), params.p, iterations, seed)


def lissa_operator_norm(params: ModelParams, dataset: Dataset, alpha, damping,
                        iterations=POWER_ITERATIONS, seed=0) -> float:
    """||I - alpha (G + damping I)||_2 by power iteration"""
    def matvec(u):
        return u - alpha * (model_core.gnh_vp(params, dataset, u) + damping * u)
    return power_iteration(matvec, params.p, iterations, seed)


# -------- LISSA --------

@dataclass(frozen=True)
class LissaConfig:
    damping: float
    iterations: int = LISSA_DEFAULT_ITERATIONS
    alpha: Optional[float] = None
    batch_size: Optional[int] = None
    seed: int = 0
    repeats: int = 1
    power_iterations: int = POWER_ITERATIONS

    def __post_init__(self):
        _check_damping(self.damping)
        if self.iterations < 0:
            raise ConfigError("LiSSA iterations must be non-negative")
        if self.alpha is not None and not self.alpha > 0:
            raise ConfigError("LiSSA step size must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("LiSSA batch size must be positive")
        if self.repeats < 1:
            raise ConfigError("LiSSA repeats must be at least 1")


def _batch_stream(n, batch_size, rng):
    """Seeded batches without replacement, reshuffling after every full pass"""
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


def neumann_recursion(matvec, v, alpha, damping, iterations) -> np.ndarray:
    """alpha * r_J with r_0 = v, r_j = v + (I - alpha (G + damping I)) r_{j-1}; matvec(r) = G r"""
    v = np.asarray(v, dtype=np.float64)
    r = v.copy()
    for j in range(iterations):
        r = v + r - alpha * (matvec(r) + damping * r)
        if not np.all(np.isfinite(r)):
            raise SolverFailure(f"non-finite LiSSA iterate at iteration {j + 1}; step size too large")
    return alpha * r


def check_lissa_step(alpha, damping, lam_max):
    if alpha * (lam_max + damping) >= 1.0:
        raise SpectralConditionError(
            f"alpha * (lambda_max + damping) = {alpha * (lam_max + damping):.4f} >= 1")


def lissa_solve(params: ModelParams, dataset: Dataset, v, cfg: LissaConfig,
                lam_max: Optional[float] = None) -> np.ndarray:
    """Stochastic Neumann recursion with G~ the GNH of a mini-batch (full batch by default).

    lam_max is the top GNH eigenvalue for the step-size check; power iteration
    estimates it when not given."""
    v = np.asarray(v, dtype=np.float64)
    if lam_max is None:
        lam_max = top_gnh_eigenvalue(params, dataset, cfg.power_iterations, cfg.seed)
    alpha = cfg.alpha if cfg.alpha is not None else LISSA_STEP_FRACTION / (lam_max + cfg.damping)
    check_lissa_step(alpha, cfg.damping, lam_max)

    full = cfg.batch_size is None or cfg.batch_size >= dataset.n
    chains = []
    for repeat in range(cfg.repeats):
        if full:
            def matvec(r):
                return model_core.gnh_vp(params, dataset, r)
        else:
            stream = _batch_stream(dataset.n, cfg.batch_size, np.random.default_rng([cfg.seed, repeat]))

            def matvec(r, stream=stream):
                return model_core.gnh_vp(params, dataset, r, indices=next(stream))
        chains.append(neumann_recursion(matvec, v, alpha, cfg.damping, cfg.iterations))
    return chains[0] if cfg.repeats == 1 else np.mean(chains, axis=0)


def lissa_error_bound(alpha, damping, opnorm_M, J, vnorm) -> float:
    """alpha * ||M||^(J+1) / (1 - ||M||) * ||v|| for M = I - alpha (G + damping I)"""
    _check_damping(damping)
    if opnorm_M >= 1.0:
        raise SpectralConditionError(f"||I - alpha(G + lambda I)|| = {opnorm_M} >= 1, bound is void")
    return float(alpha * opnorm_M ** (J + 1) / (1.0 - opnorm_M) * vnorm)


# -------- K-FAC / EK-FAC --------

@dataclass
class KfacState:
    """Per layer: A (input covariance, (d+1)^2) and Y (pre-activation pseudo-gradient covariance, p^2)"""
    A: List[np.ndarray]
    Y: List[np.ndarray]
    num_samples: int
    fisher_type: str = "mc"

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        return [(Y.shape[0], A.shape[0]) for A, Y in zip(self.A, self.Y)]


@dataclass
class EkfacState:
    """Per layer: eigenbases Q_A, Q_Y and fitted eigenvalues Lambda stored as a
    (p_l, d_l + 1) matrix, Lambda[i, j] belonging to Q_Y[:, i] kron Q_A[:, j]"""
    Q_A: List[np.ndarray]
    Q_Y: List[np.ndarray]
    eigenvalues: List[np.ndarray]
    num_samples: int
    fisher_type: str = "mc"
    kfac: Optional[KfacState] = field(default=None, repr=False)

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        return [lam.shape for lam in self.eigenvalues]


def _check_fisher_type(fisher_type):
    if fisher_type not in FISHER_TYPES:
        raise ConfigError(f"unknown fisher_type {fisher_type!r}; choose from {FISHER_TYPES}")


def _layer_samples(params, X, fisher_type, rng):
    """Yield (inputs, grads) per layer for one chunk; for type-2 the grads of each
    class are weighted by sqrt(p_c) so Gram matrices carry the exact expectation"""
    if fisher_type == "mc":
        inputs, gs = model_core.pseudo_preactivation_grads(params, X, rng)
        yield inputs, gs
        return
    for c in range(params.spec.num_classes):
        inputs, gs, pc = model_core.class_preactivation_grads(params, X, c)
        w = np.sqrt(pc)[:, None]
        yield inputs, [g * w for g in gs]


def fit_kfac(params: ModelParams, dataset: Dataset, seed: int, fisher_type="mc") -> KfacState:
    """Uncentered covariances E[a a^T] and E[Dy Dy^T] per layer, accumulated in index order"""
    _check_fisher_type(fisher_type)
    started = time.time()
    rng = np.random.default_rng(seed)
    A = [np.zeros((d, d)) for _, d in params.spec.layer_shapes]
    Y = [np.zeros((p, p)) for p, _ in params.spec.layer_shapes]
    for start, stop in iter_chunks(dataset.n):
        X = dataset.features[start:stop]
        first = True
        for inputs, gs in _layer_samples(params, X, fisher_type, rng):
            for l, (a, g) in enumerate(zip(inputs, gs)):
                if first:
                    A[l] += a.T @ a
                Y[l] += g.T @ g
            first = False
    n = dataset.n
    A = [0.5 * (M + M.T) / n for M in A]
    Y = [0.5 * (M + M.T) / n for M in Y]
    logger.debug("Fitted K-FAC factors (%s) in %.2fs", fisher_type, time.time() - started)
    return KfacState(A, Y, n, fisher_type)


def _eigh_jittered(M):
    """Eigendecomposition with 1e-12 * trace/dim added to the diagonal"""
    jitter = EIGEN_JITTER * max(float(np.trace(M)), 0.0) / M.shape[0]
    try:
        vals, vecs = scipy.linalg.eigh(M + jitter * np.eye(M.shape[0]))
    except (np.linalg.LinAlgError, ValueError) as e:
        raise SolverFailure(f"eigendecomposition failed: {e}")
    return vals, vecs


def fit_ekfac(params: ModelParams, dataset: Dataset, seed: int, fisher_type="mc",
              kfac_state: Optional[KfacState] = None) -> EkfacState:
    """Eigenbases of the K-FAC factors plus eigenvalues refitted as the mean squared
    projection of per-sample pseudo-gradients onto the Kronecker eigenbasis"""
    _check_fisher_type(fisher_type)
    started = time.time()
    kfac = kfac_state or fit_kfac(params, dataset, seed, fisher_type)
    Q_A = [_eigh_jittered(A)[1] for A in kfac.A]
    Q_Y = [_eigh_jittered(Y)[1] for Y in kfac.Y]
    lam = [np.zeros(shape) for shape in params.spec.layer_shapes]

    rng = np.random.default_rng([seed, 1])
    for start, stop in iter_chunks(dataset.n):
        X = dataset.features[start:stop]
        for inputs, gs in _layer_samples(params, X, fisher_type, rng):
            for l, (a, g) in enumerate(zip(inputs, gs)):
                # Dy a^T projected: (Q_Y^T Dy)(Q_A^T a)^T, squared entrywise
                lam[l] += ((g @ Q_Y[l]) ** 2).T @ ((a @ Q_A[l]) ** 2)
    lam = [L / dataset.n for L in lam]
    logger.debug("Fitted EK-FAC eigenvalues (%s) in %.2fs", fisher_type, time.time() - started)
    return EkfacState(Q_A, Q_Y, lam, dataset.n, fisher_type, kfac)


def _split_layers(shapes, v):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    total = sum(p * d for p, d in shapes)
    if v.shape[0] != total:
        raise ConfigError(f"vector has length {v.shape[0]}, curvature state expects {total}")
    out, offset = [], 0
    for p, d in shapes:
        out.append(v[offset:offset + p * d].reshape((p, d), order="F"))
        offset += p * d
    return out


def _join_layers(mats):
    return np.concatenate([M.reshape(-1, order="F") for M in mats])


def kfac_damped_factors(state: KfacState, damping) -> List[Tuple]:
    """Per layer Cholesky factors of (A + sqrt(lambda) I) and (Y + sqrt(lambda) I)"""
    root = np.sqrt(_check_damping(damping))
    factors = []
    try:
        for A, Y in zip(state.A, state.Y):
            factors.append((scipy.linalg.cho_factor(A + root * np.eye(A.shape[0])),
                            scipy.linalg.cho_factor(Y + root * np.eye(Y.shape[0]))))
    except np.linalg.LinAlgError as e:
        raise SolverFailure(f"damped K-FAC factor is not positive definite: {e}")
    return factors


def apply_kfac_inverse(state: KfacState, damping, v, factors=None) -> np.ndarray:
    """Per layer vec((Y + sqrt(lambda) I)^-1 V (A + sqrt(lambda) I)^-1); pass factors
    from kfac_damped_factors to skip refactorizing"""
    if factors is None:
        factors = kfac_damped_factors(state, damping)
    out = []
    for (cho_A, cho_Y), V in zip(factors, _split_layers(state.layer_shapes, v)):
        left = scipy.linalg.cho_solve(cho_Y, V)
        out.append(scipy.linalg.cho_solve(cho_A, left.T).T)
    return _join_layers(out)


def apply_ekfac_inverse(state: EkfacState, damping, v) -> np.ndarray:
    """(Q_A kron Q_Y)(Lambda + lambda I)^-1 (Q_A kron Q_Y)^T v without forming the Kronecker product"""
    damping = _check_damping(damping)
    out = []
    for QA, QY, lam, V in zip(state.Q_A, state.Q_Y, state.eigenvalues,
                              _split_layers(state.layer_shapes, v)):
        projected = QY.T @ V @ QA
        out.append(QY @ (projected / (lam + damping)) @ QA.T)
    return _join_layers(out)


def kronecker_basis(state: EkfacState) -> np.ndarray:
    """Dense block-diagonal Q_A kron Q_Y (desk-scale reports and tests only)"""
    blocks = [np.kron(QA, QY) for QA, QY in zip(state.Q_A, state.Q_Y)]
    return scipy.linalg.block_diag(*blocks)


def eigen_spectrum_in_basis(G, Q) -> np.ndarray:
    """diag(Q^T G Q)"""
    return np.einsum("ij,ik,kj->j", Q, G, Q)


def ekfac_error_bound(lambda_true, lambda_ek, damping, vnorm) -> float:
    """max_i |1/(true_i + lambda) - 1/(ek_i + lambda)| * ||v||"""
    damping = _check_damping(damping)
    lambda_true = np.asarray(lambda_true, dtype=np.float64).reshape(-1)
    lambda_ek = np.asarray(lambda_ek, dtype=np.float64).reshape(-1)
    if lambda_true.shape != lambda_ek.shape:
        raise ConfigError(f"eigenvalue lengths differ: {lambda_true.size} vs {lambda_ek.size}")
    if lambda_true.size == 0:
        return 0.0
    if min(lambda_true.min(), lambda_ek.min()) < 0:
        raise ConfigError("eigenvalues must be non-negative")
    return float(np.max(np.abs(1.0 / (lambda_true + damping) - 1.0 / (lambda_ek + damping))) * vnorm)


# -------- SOLVERS --------

class CurvatureSolver:
    """Common interface: apply(v) ~ (G + damping I)^-1 v"""

    solver_id = "base"

    def __init__(self, damping, logger=logger):
        self.damping = _check_damping(damping)
        self.logger = logger

    def apply(self, v) -> np.ndarray:
        raise NotImplementedError

    def describe(self):
        return {"solver_id": self.solver_id, "damping": self.damping}


class ExactDenseSolver(CurvatureSolver):
    """Cholesky factor of the dense GNH plus damping (desk scale)"""

    solver_id = "exact"

    def __init__(self, G, damping, logger=logger):
        super().__init__(damping, logger)
        self.G = np.asarray(G, dtype=np.float64)
        solve_dense(self.G, self.damping, np.zeros(self.G.shape[0]))
        self._factor = scipy.linalg.cho_factor(self.G + self.damping * np.eye(self.G.shape[0]))

    @classmethod
    def fit(cls, params, dataset, damping, logger=logger):
        started = time.time()
        G = model_core.dense_gnh(params, dataset)
        logger.info("Assembled dense GNH (p = %d) in %.2fs", params.p, time.time() - started)
        return cls(G, damping, logger)

    def apply(self, v):
        return scipy.linalg.cho_solve(self._factor, np.asarray(v, dtype=np.float64))


class LissaSolver(CurvatureSolver):
    solver_id = "lissa"

    def __init__(self, params, dataset, cfg: LissaConfig, logger=logger):
        super().__init__(cfg.damping, logger)
        self.params = params
        self.dataset = dataset
        # estimated once per solver; apply reuses it
        self.lam_max = top_gnh_eigenvalue(params, dataset, cfg.power_iterations, cfg.seed)
        if cfg.alpha is None:
            cfg = replace(cfg, alpha=LISSA_STEP_FRACTION / (self.lam_max + cfg.damping))
            logger.info("LiSSA step size alpha = %.6g", cfg.alpha)
        check_lissa_step(cfg.alpha, cfg.damping, self.lam_max)
        self.cfg = cfg

    def apply(self, v):
        return lissa_solve(self.params, self.dataset, v, self.cfg, lam_max=self.lam_max)

    def describe(self):
        out = super().describe()
        out.update({"alpha": self.cfg.alpha, "iterations": self.cfg.iterations,
                    "batch_size": self.cfg.batch_size, "repeats": self.cfg.repeats})
        return out


class KfacSolver(CurvatureSolver):
    solver_id = "kfac"

    def __init__(self, state: KfacState, damping, logger=logger):
        super().__init__(damping, logger)
        self.state = state
        self._factors = kfac_damped_factors(state, self.damping)

    def apply(self, v):
        return apply_kfac_inverse(self.state, self.damping, v, self._factors)


class EkfacSolver(CurvatureSolver):
    solver_id = "ekfac"

    def __init__(self, state: EkfacState, damping, logger=logger):
        super().__init__(damping, logger)
        self.state = state

    def apply(self, v):
        return apply_ekfac_inverse(self.state, self.damping, v)


def build_solver(params: ModelParams, dataset: Dataset, cfg: SolverConfig, logger=logger,
                 state_path: Optional[str] = None) -> CurvatureSolver:
    """Fit (or load from state_path, when it exists) the solver named in cfg"""
    name = cfg.name
    if name not in SOLVER_NAMES:
        raise UsageError(f"unknown solver {name!r}; choose exact, lissa, kfac or ekfac")
    started = time.time()
    if name == "lissa":
        solver = LissaSolver(params, dataset, LissaConfig(
            cfg.damping, cfg.lissa_iterations, cfg.lissa_alpha, cfg.lissa_batch_size,
            cfg.seed, cfg.lissa_repeats), logger)
    elif state_path is not None and os.path.exists(state_path):
        solver = load_solver_state(state_path, cfg.damping, logger)
        if solver.solver_id != name:
            raise UsageError(f"{state_path} holds a {solver.solver_id} state, not {name}")
        logger.info("Loaded %s state from %s", name, state_path)
    else:
        if name == "exact":
            solver = ExactDenseSolver.fit(params, dataset, cfg.damping, logger)
        elif name == "kfac":
            solver = KfacSolver(fit_kfac(params, dataset, cfg.seed, cfg.fisher_type), cfg.damping, logger)
        else:
            solver = EkfacSolver(fit_ekfac(params, dataset, cfg.seed, cfg.fisher_type), cfg.damping, logger)
        if state_path is not None:
            save_solver_state(state_path, solver)
    logger.info("Solver %s ready in %.2fs (damping %g)", name, time.time() - started, cfg.damping)
    return solver


# -------- STATE PERSISTENCE --------

def save_solver_state(path, solver: CurvatureSolver):
    """Fitted curvature in the versioned checkpoint container"""
    if isinstance(solver, ExactDenseSolver):
        write_container(path, "exact", {}, {"G": solver.G})
    elif isinstance(solver, KfacSolver):
        s = solver.state
        arrays = {f"A.{l}": A for l, A in enumerate(s.A)}
        arrays.update({f"Y.{l}": Y for l, Y in enumerate(s.Y)})
        write_container(path, "kfac", {"layers": len(s.A), "num_samples": s.num_samples,
                                       "fisher_type": s.fisher_type}, arrays)
    elif isinstance(solver, EkfacSolver):
        s = solver.state
        arrays = {}
        for l in range(len(s.Q_A)):
            arrays[f"QA.{l}"] = s.Q_A[l]
            arrays[f"QY.{l}"] = s.Q_Y[l]
            arrays[f"Lambda.{l}"] = s.eigenvalues[l]
        write_container(path, "ekfac", {"layers": len(s.Q_A), "num_samples": s.num_samples,
                                        "fisher_type": s.fisher_type}, arrays)
    else:
        raise UsageError(f"{solver.solver_id} solver has no persistent state")


def load_solver_state(path, damping, logger=logger) -> CurvatureSolver:
    header, arrays = read_container(path)
    kind, meta = header["kind"], header["meta"]
    if kind == "exact":
        return ExactDenseSolver(arrays["G"], damping, logger)
    layers = range(int(meta.get("layers", 0)))
    if kind == "kfac":
        state = KfacState([arrays[f"A.{l}"] for l in layers], [arrays[f"Y.{l}"] for l in layers],
                          int(meta["num_samples"]), meta["fisher_type"])
        return KfacSolver(state, damping, logger)
    if kind == "ekfac":
        state = EkfacState([arrays[f"QA.{l}"] for l in layers], [arrays[f"QY.{l}"] for l in layers],
                           [arrays[f"Lambda.{l}"] for l in layers], int(meta["num_samples"]),
                           meta["fisher_type"])
        return EkfacSolver(state, damping, logger)
    raise UsageError(f"{path} is a {kind!r} container, not a solver state")
