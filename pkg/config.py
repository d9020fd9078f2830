#!/usr/bin/env python3
"""
config.py
Configuration defaults for the influence toolkit
"""

import os

TOOLKIT_VERSION = "0.3.0"

# -------- FORMAT VERSIONS --------
CHECKPOINT_MAGIC = b"IFTK"
CHECKPOINT_VERSION = 1
SCORES_VERSION = 1
MANIFEST_VERSION = 1
SUBSET_RUN_VERSION = 1

# -------- LOGGING --------
LOGGER_NAME = "influence"
RUN_LOG_NAME = "run.log"

# -------- DATA --------
DATA_DIR_ENV = "INFLUENCE_DATA_DIR"
SYNTHETIC_GENERATORS = ("gaussian_blobs", "two_moons_2class")
BLOB_SEPARATION = 4.0
MOONS_NOISE = 0.1

# -------- MODEL / TRAINING --------
DEFAULT_ACTIVATION = "relu"
DEFAULT_LEARNING_RATE = 0.1
DEFAULT_EPOCHS = 20
DEFAULT_BATCH_SIZE = 32
DEFAULT_SEED = 0
DEFAULT_L2_PENALTY = 0.0
DEFAULT_GRAD_TOL = 1e-10
DENSE_SIZE_GUARD = 5000
# rows per block when accumulating per-sample quantities
CHUNK_SIZE = 512

# -------- SOLVERS --------
SOLVER_NAMES = ("exact", "lissa", "kfac", "ekfac")
DEFAULT_SOLVER = "ekfac"
DEFAULT_DAMPING = 1e-3
DEFAULT_FISHER_TYPE = "mc"
FISHER_TYPES = ("mc", "type-2")
LISSA_DEFAULT_ITERATIONS = 1000
LISSA_STEP_FRACTION = 0.9
POWER_ITERATIONS = 50
EIGEN_JITTER = 1e-12

# -------- EXPERIMENTS --------
LDS_SUBSETS = 100
LDS_ALPHA = 0.5
LDS_TEST_POINTS = 64
DETECTION_BUDGETS = (0.1, 0.2, 0.3, 0.4, 0.5)
CORRUPTION_FRACTION = 0.1
DEFAULT_TOP_K = 10

# -------- EXIT CODES --------
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def default_data_dir():
    """Directory used to resolve relative data paths"""
    return os.environ.get(DATA_DIR_ENV, os.getcwd())


def ensure_dir(path):
    """Create a directory if needed and return it"""
    os.makedirs(path, exist_ok=True)
    return path
