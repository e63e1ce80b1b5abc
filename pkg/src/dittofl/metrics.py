"""Per-device evaluation and fairness summaries over benign devices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import Population
from .models import LossKind, accuracy, loss

TARGETS = ("test", "ground_truth")


@dataclass(frozen=True)
class EvalReport:
    """Per-device metric values; aggregates are over benign devices only.

    ``metric`` is ``"accuracy"`` for classifiers on the test split, ``"loss"``
    for regression test loss, and ``"sq_error"`` (``||v_k - w_k||^2``) when
    evaluating against the generating parameters. Spread is the population
    standard deviation (ddof=0).
    """

    metric: str
    values: np.ndarray
    benign: np.ndarray

    @property
    def benign_values(self) -> np.ndarray:
        return self.values[self.benign]

    @property
    def mean(self) -> float:
        return float(np.mean(self.benign_values))

    @property
    def std(self) -> float:
        return float(np.std(self.benign_values))

    @property
    def variance(self) -> float:
        return float(np.var(self.benign_values))

    @property
    def worst(self) -> float:
        v = self.benign_values
        return float(v.min() if self.higher_is_better else v.max())

    @property
    def higher_is_better(self) -> bool:
        return self.metric == "accuracy"


def evaluate(models, population: Population, task: LossKind, target: str = "test") -> EvalReport:
    """Evaluate one model per device (shape ``(K, d)``), or one shared model (shape ``(d,)``)."""
    models = np.asarray(models, dtype=np.float64)
    if models.ndim == 1:
        models = np.broadcast_to(models, (population.K, models.shape[0]))
    if models.shape != (population.K, population.dim):
        raise ValueError(f"expected models of shape {(population.K, population.dim)}, got {models.shape}")
    if not population.benign_mask.any():
        raise ValueError("no benign devices to evaluate")
    if target == "ground_truth":
        if population.ground_truth is None:
            raise ValueError("population has no generating parameters to compare against")
        err = np.sum((models - population.ground_truth) ** 2, axis=1)
        return EvalReport("sq_error", err, population.benign_mask)
    if target != "test":
        raise ValueError(f"unknown evaluation target {target!r}")
    vals = np.empty(population.K)
    for k, dev in enumerate(population.devices):
        if len(dev.test) == 0:
            if dev.byzantine:
                vals[k] = np.nan
                continue
            raise ValueError(f"benign device {dev.id} has no test data")
        if task.is_classifier:
            vals[k] = accuracy(task, models[k], dev.test)
        else:
            vals[k] = loss(task, models[k], dev.test)
    return EvalReport("accuracy" if task.is_classifier else "loss", vals, population.benign_mask)


@dataclass(frozen=True)
class FairnessComparison:
    mean_delta: float  # b.mean - a.mean, signed so positive means b is better
    std_delta: float  # a.std - b.std, positive means b is more uniform
    b_better_mean: bool
    b_fairer: bool
    fairer: str  # "a", "b" or "tie"


def compare_fairness(a: EvalReport, b: EvalReport) -> FairnessComparison:
    """Compare report ``b`` against reference ``a`` on benign mean and spread."""
    if a.metric != b.metric:
        raise ValueError("reports use different metrics")
    sign = 1.0 if a.higher_is_better else -1.0
    md = sign * (b.mean - a.mean)
    sd = a.std - b.std
    fairer = "b" if sd > 0 else "a" if sd < 0 else "tie"
    return FairnessComparison(md, sd, md > 0, sd > 0, fairer)
