#!/usr/bin/env python3
"""
data_models.py
Domain types and error hierarchy for the influence toolkit
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import (
    CORRUPTION_FRACTION, DEFAULT_ACTIVATION, DEFAULT_BATCH_SIZE, DEFAULT_DAMPING,
    DEFAULT_EPOCHS, DEFAULT_FISHER_TYPE, DEFAULT_GRAD_TOL, DEFAULT_L2_PENALTY,
    DEFAULT_LEARNING_RATE, DEFAULT_SEED, DEFAULT_SOLVER, DEFAULT_TOP_K,
    DETECTION_BUDGETS, EXIT_DATA, EXIT_NUMERICAL, EXIT_USAGE, LDS_ALPHA,
    LDS_SUBSETS, LDS_TEST_POINTS, LISSA_DEFAULT_ITERATIONS,
)

ACTIVATIONS = ("relu", "tanh")


# -------- ERRORS --------

class InfluenceToolkitError(Exception):
    """Base error; `exit_code` is what the CLI returns"""
    exit_code = EXIT_USAGE


class UsageError(InfluenceToolkitError):
    exit_code = EXIT_USAGE


class ConfigError(InfluenceToolkitError):
    exit_code = EXIT_USAGE


class DataFormatError(InfluenceToolkitError):
    """Malformed input file; carries a positional diagnostic"""
    exit_code = EXIT_DATA

    def __init__(self, message, path=None, line=None, offset=None):
        self.path = path
        self.line = line
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)


class NumericalError(InfluenceToolkitError):
    exit_code = EXIT_NUMERICAL


class TrainingDivergence(NumericalError):
    def __init__(self, epoch, value):
        self.epoch = epoch
        self.value = value
        super().__init__(f"training diverged at epoch {epoch}: loss = {value}")


class SpectralConditionError(NumericalError):
    pass


class SolverFailure(NumericalError):
    pass


class SizeGuardError(NumericalError):
    pass


# -------- DATA --------

@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int


@dataclass
class Dataset:
    """Ordered labeled examples stored as a (n, d) float64 matrix plus labels"""
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataFormatError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataFormatError(
                f"{self.labels.shape[0] if self.labels.ndim else 0} labels for "
                f"{self.features.shape[0]} examples")
        if self.features.shape[0] < 1:
            raise DataFormatError("dataset is empty")
        if self.num_classes < 1:
            raise DataFormatError("num_classes must be positive")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def __len__(self):
        return self.n

    def __getitem__(self, index) -> Example:
        return Example(self.features[index], int(self.labels[index]))

    @property
    def examples(self) -> List[Example]:
        return [self[i] for i in range(self.n)]

    def subset(self, selector) -> "Dataset":
        """Subset by boolean mask or index list, keeping the original order of the selector"""
        selector = np.asarray(selector)
        if selector.dtype == bool:
            selector = np.flatnonzero(selector)
        return Dataset(self.features[selector], self.labels[selector], self.num_classes)

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.features.copy(), np.asarray(labels).copy(), self.num_classes)


@dataclass(frozen=True)
class DatasetSource:
    """Where a dataset comes from: kind is 'idx', 'delimited' or 'synthetic'"""
    kind: str
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    path: Optional[str] = None
    label_column: Optional[str] = None
    generator: Optional[str] = None
    n: int = 0
    d: int = 0
    num_classes: int = 0
    seed: int = DEFAULT_SEED
    limit: Optional[int] = None


# -------- MODEL --------

@dataclass(frozen=True)
class MlpSpec:
    """Layer widths [d, h1, ..., C]; biases live in an appended constant-1 input column"""
    layer_dims: Tuple[int, ...]
    activation: str = DEFAULT_ACTIVATION

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(x) for x in self.layer_dims))
        if len(self.layer_dims) < 2:
            raise ConfigError("layer_dims needs at least an input and an output width")
        if any(x < 1 for x in self.layer_dims):
            raise ConfigError(f"layer widths must be positive: {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def num_layers(self):
        return len(self.layer_dims) - 1

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def num_classes(self):
        return self.layer_dims[-1]

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        """(outputs, inputs + 1) for each weight matrix"""
        return [(self.layer_dims[i + 1], self.layer_dims[i] + 1) for i in range(self.num_layers)]

    @property
    def num_params(self):
        return sum(p * d for p, d in self.layer_shapes)

    def to_dict(self):
        return {"layer_dims": list(self.layer_dims), "activation": self.activation}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["layer_dims"]), d.get("activation", DEFAULT_ACTIVATION))


@dataclass(frozen=True)
class ModelParams:
    """Flat float64 parameter vector; layer l occupies theta[offsets[l]:offsets[l+1]]
    as the column-major flattening of its (p_l, d_l + 1) weight matrix."""
    theta: np.ndarray
    spec: MlpSpec
    l2_penalty: float = 0.0
    provenance: Dict = field(default_factory=dict)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64, copy=True).reshape(-1)
        if theta.shape[0] != self.spec.num_params:
            raise ConfigError(
                f"theta has {theta.shape[0]} entries, spec needs {self.spec.num_params}")
        if not np.all(np.isfinite(theta)):
            raise NumericalError("parameters contain non-finite entries")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    @property
    def p(self):
        return self.theta.shape[0]

    @property
    def offsets(self) -> List[int]:
        out = [0]
        for p_l, d_l in self.spec.layer_shapes:
            out.append(out[-1] + p_l * d_l)
        return out

    def layer_weights(self) -> List[np.ndarray]:
        offs = self.offsets
        return [self.theta[offs[i]:offs[i + 1]].reshape(shape, order="F")
                for i, shape in enumerate(self.spec.layer_shapes)]

    def with_theta(self, theta, **provenance) -> "ModelParams":
        prov = dict(self.provenance)
        prov.update(provenance)
        return ModelParams(theta, self.spec, self.l2_penalty, prov)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = DEFAULT_LEARNING_RATE
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    seed: int = DEFAULT_SEED
    l2_penalty: float = DEFAULT_L2_PENALTY
    newton_steps: int = 0
    grad_tol: float = DEFAULT_GRAD_TOL

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.l2_penalty < 0:
            raise ConfigError("l2_penalty must be non-negative")
        if self.newton_steps < 0:
            raise ConfigError("newton_steps must be non-negative")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class ForwardCache:
    """Per-layer augmented inputs a_{l-1} (with trailing 1) and pre-activations y_l"""
    inputs: List[np.ndarray]
    preactivations: List[np.ndarray]


# -------- ATTRIBUTION --------

@dataclass(frozen=True)
class InfluenceRecord:
    train_index: int
    test_index: Optional[int]
    score: float
    solver_id: str
    damping: float

    @property
    def is_self(self):
        return self.test_index is None


@dataclass(frozen=True)
class ParamInfluence:
    train_index: int
    direction: np.ndarray


# -------- EVALUATION --------

@dataclass
class SubsetRun:
    index: int
    mask: np.ndarray
    seed: int
    losses: np.ndarray
    params: Optional[ModelParams] = None


@dataclass(frozen=True)
class LdsConfig:
    num_subsets: int = LDS_SUBSETS
    alpha: float = LDS_ALPHA
    seed: int = DEFAULT_SEED
    test_sample_count: int = LDS_TEST_POINTS
    test_seed: int = DEFAULT_SEED + 1

    def __post_init__(self):
        if self.num_subsets < 2:
            raise ConfigError("LDS needs at least 2 subsets")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("subsampling rate must lie in (0, 1)")
        if self.test_sample_count < 1:
            raise ConfigError("test_sample_count must be positive")


@dataclass
class LdsResult:
    mean: float
    per_point: np.ndarray
    test_indices: np.ndarray


@dataclass(frozen=True)
class CorruptionSpec:
    fraction: float
    seed: int
    flips: Dict[int, Tuple[int, int]]

    @property
    def corrupted_indices(self) -> np.ndarray:
        return np.array(sorted(self.flips), dtype=np.int64)


@dataclass(frozen=True)
class ForgetSet:
    """Indices to remove, or index -> corrected label pairs for label repair"""
    indices: Tuple[int, ...] = ()
    relabels: Dict[int, int] = field(default_factory=dict)

    def validate(self, dataset: Dataset, mode: str):
        if mode == "remove":
            idx = list(self.indices)
            if not idx:
                raise UsageError("forget set is empty")
        elif mode == "relabel":
            idx = list(self.relabels)
            if not idx:
                raise UsageError("forget set has no repair pairs")
            for i, new in self.relabels.items():
                if not 0 <= new < dataset.num_classes:
                    raise UsageError(f"corrected label {new} for index {i} out of range")
                if 0 <= i < dataset.n and int(dataset.labels[i]) == new:
                    raise UsageError(f"corrected label for index {i} equals the original label {new}")
        else:
            raise UsageError(f"unknown unlearning mode {mode!r}")
        if len(set(idx)) != len(idx):
            raise UsageError("forget indices must be distinct")
        bad = [i for i in idx if not 0 <= i < dataset.n]
        if bad:
            raise UsageError(f"forget indices out of range: {bad[:5]}")


# -------- CLI --------

@dataclass
class RunManifest:
    command: str
    config: Dict
    seeds: Dict
    input_hashes: Dict[str, str]
    outputs: Dict[str, str]
    argv: Sequence[str] = ()
    wall_clock_seconds: float = 0.0
    toolkit_version: str = ""


# -------- RUN CONFIGURATION --------

@dataclass(frozen=True)
class SolverConfig:
    name: str = DEFAULT_SOLVER
    damping: float = DEFAULT_DAMPING
    fisher_type: str = DEFAULT_FISHER_TYPE
    seed: int = DEFAULT_SEED
    lissa_iterations: int = LISSA_DEFAULT_ITERATIONS
    lissa_batch_size: Optional[int] = None
    lissa_alpha: Optional[float] = None
    lissa_repeats: int = 1

    def __post_init__(self):
        if not self.damping > 0:
            raise ConfigError("damping must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    lds: LdsConfig = field(default_factory=LdsConfig)
    corruption_fraction: float = CORRUPTION_FRACTION
    corruption_seed: int = DEFAULT_SEED
    budgets: Tuple[float, ...] = DETECTION_BUDGETS
    top_k: int = DEFAULT_TOP_K
    test_indices: Tuple[int, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    source: DatasetSource
    hidden: Tuple[int, ...] = ()
    activation: str = DEFAULT_ACTIVATION
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    holdout: int = 0
    holdout_seed: int = DEFAULT_SEED
    test_source: Optional[DatasetSource] = None
    output_dir: str = "runs"

    def mlp_spec(self, input_dim, num_classes) -> MlpSpec:
        return MlpSpec((input_dim, *self.hidden, num_classes), self.activation)
