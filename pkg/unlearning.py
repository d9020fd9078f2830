#!/usr/bin/env python3
"""
unlearning.py
One-shot Newton-step unlearning with the damped curvature solver: removal of
training points and label repair.

n in the 1/n factor is always the original training-set size.
"""

from typing import Dict, Optional

import numpy as np

import model_core
from data_models import Dataset, Example, ForgetSet, MlpSpec, ModelParams, TrainConfig
from logger_setup import get_logger

logger = get_logger("unlearning")


def _summed_grads(params: ModelParams, dataset: Dataset, indices, labels) -> np.ndarray:
    total = np.zeros(params.p)
    for i, y in zip(indices, labels):
        total += model_core.grad(params, Example(dataset.features[i], int(y)))
    return total


def unlearn_remove(solver, params: ModelParams, dataset: Dataset, forget: ForgetSet,
                   logger=logger) -> ModelParams:
    """theta + (1/n) * sum_{z in forget} (G + lambda I)^-1 grad L(z, theta)"""
    forget.validate(dataset, "remove")
    indices = list(forget.indices)
    g = _summed_grads(params, dataset, indices, dataset.labels[indices])
    theta = params.theta + solver.apply(g) / dataset.n
    logger.info("Removed %d points with %s (damping %g)", len(indices), solver.solver_id, solver.damping)
    return params.with_theta(theta, unlearning={
        "mode": "remove", "indices": indices,
        "solver": solver.solver_id, "damping": solver.damping, "n": dataset.n,
    })


def unlearn_relabel(solver, params: ModelParams, dataset: Dataset, forget: ForgetSet,
                    logger=logger) -> ModelParams:
    """theta + (1/n) * sum (G + lambda I)^-1 (grad L(z) - grad L(z~)), the Newton step
    replacing each L(z) in the risk by L(z~)"""
    forget.validate(dataset, "relabel")
    indices = sorted(forget.relabels)
    old = _summed_grads(params, dataset, indices, dataset.labels[indices])
    new = _summed_grads(params, dataset, indices, [forget.relabels[i] for i in indices])
    theta = params.theta + solver.apply(old - new) / dataset.n
    logger.info("Repaired %d labels with %s (damping %g)", len(indices), solver.solver_id, solver.damping)
    return params.with_theta(theta, unlearning={
        "mode": "relabel", "relabels": [[i, forget.relabels[i]] for i in indices],
        "solver": solver.solver_id, "damping": solver.damping, "n": dataset.n,
    })


def evaluate_unlearning(spec: MlpSpec, dataset: Dataset, config: TrainConfig, params: ModelParams,
                        updated: ModelParams, forget: ForgetSet, mode: str,
                        heldout: Optional[Dataset] = None, logger=logger) -> Dict:
    """Compare an unlearned model with the exact retrain it approximates.

    remove: retrain on the remaining rows with the original n as normalizer;
    relabel: retrain on the repaired dataset."""
    forget.validate(dataset, mode)
    if mode == "remove":
        keep = np.ones(dataset.n, dtype=bool)
        keep[list(forget.indices)] = False
        retrained = model_core.train(spec, dataset.subset(keep), config, normalizer=dataset.n)
    else:
        labels = dataset.labels.copy()
        for i, y in forget.relabels.items():
            labels[i] = y
        retrained = model_core.train(spec, dataset.with_labels(labels), config)
    before = float(np.linalg.norm(params.theta - retrained.theta))
    after = float(np.linalg.norm(updated.theta - retrained.theta))
    report = {
        "mode": mode,
        "distance_before": before,
        "distance_after": after,
        "fraction_closed": 1.0 - after / before if before > 0 else 0.0,
    }
    if heldout is not None:
        report["heldout_loss_before"] = model_core.empirical_risk(params, heldout)
        report["heldout_loss_after"] = model_core.empirical_risk(updated, heldout)
        report["heldout_loss_retrained"] = model_core.empirical_risk(retrained, heldout)
    logger.info("Unlearning (%s) closed %.1f%% of the distance to the exact retrain",
                mode, 100.0 * report["fraction_closed"])
    return report
