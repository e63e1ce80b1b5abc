"""Convex per-device losses with exact gradients.

Every function accepts either a single parameter vector of shape ``(d,)`` or
a stack of them with shape ``(L, d)``; the stacked form is used to advance
several personalized models (one per candidate lambda) in a single pass.

Loss conventions:

* point estimation: ``0.5 * ||v - mean(x)||^2`` where the observations are
  the rows of ``features``; a mini-batch gradient uses the batch mean.
* linear regression: ``(1 / 2n) * ||X w - y||^2``.
* hinge SVM: ``mean(max(0, 1 - s * x.w)) + reg/2 ||w||^2`` with ``s = 2y - 1``.
* logistic: ``mean(log(1 + exp(-s * x.w))) + reg/2 ||w||^2``.

Binary labels are stored as {0, 1}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionError, LocalDataset

KINDS = ("point_estimation", "linreg", "hinge", "logistic")


class NoClosedForm(ValueError):
    """The loss has no closed-form minimizer; use an iterative solver."""


class SingularDesign(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class LossKind:
    kind: str
    reg: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.reg < 0:
            raise ValueError("regularization must be >= 0")
        if self.kind in ("point_estimation", "linreg") and self.reg != 0:
            raise ValueError(f"{self.kind} takes no regularization")

    @property
    def is_classifier(self) -> bool:
        return self.kind in ("hinge", "logistic")


def PointEstimation() -> LossKind:
    return LossKind("point_estimation")


def LinReg() -> LossKind:
    return LossKind("linreg")


def HingeSVM(reg: float = 0.0) -> LossKind:
    return LossKind("hinge", reg)


def Logistic(reg: float = 0.0) -> LossKind:
    return LossKind("logistic", reg)


def _prep(params, data: LocalDataset, idx):
    p = np.asarray(params, dtype=np.float64)
    single = p.ndim == 1
    P = p.reshape(1, -1) if single else p
    if P.shape[1] != data.dim:
        raise DimensionError(f"params have dimension {P.shape[1]}, data has {data.dim}")
    X = data.features if idx is None else data.features[idx]
    y = data.labels if idx is None else data.labels[idx]
    if X.shape[0] == 0:
        raise ValueError("loss over an empty dataset")
    return P, single, X, y


def _signs(y):
    return 2.0 * y - 1.0


def _log1pexp(z):
    # log(1 + exp(z)) without overflow
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss(kind: LossKind, params, data: LocalDataset, idx=None):
    P, single, X, y = _prep(params, data, idx)
    k = kind.kind
    if k == "point_estimation":
        diff = P - X.sum(axis=0) / X.shape[0]
        out = 0.5 * np.sum(diff * diff, axis=1)
    elif k == "linreg":
        r = X @ P.T - y[:, None]
        out = 0.5 * np.mean(r * r, axis=0)
    else:
        margins = _signs(y)[:, None] * (X @ P.T)
        if k == "hinge":
            out = np.mean(np.maximum(0.0, 1.0 - margins), axis=0)
        else:
            out = np.mean(_log1pexp(-margins), axis=0)
        if kind.reg:
            out = out + 0.5 * kind.reg * np.sum(P * P, axis=1)
    return float(out[0]) if single else out


def grad(kind: LossKind, params, data: LocalDataset, idx=None) -> np.ndarray:
    P, single, X, y = _prep(params, data, idx)
    n = X.shape[0]
    k = kind.kind
    if k == "point_estimation":
        g = P - X.sum(axis=0) / n
    elif k == "linreg":
        r = X @ P.T - y[:, None]
        g = (r.T @ X) / n
    else:
        s = _signs(y)[:, None]
        margins = s * (X @ P.T)
        if k == "hinge":
            # subgradient 0 at margin exactly 1
            coef = np.where(margins < 1.0, -s, 0.0)
        else:
            coef = -s * _sigmoid(-margins)
        g = (coef.T @ X) / n
        if kind.reg:
            g = g + kind.reg * P
    return g[0] if single else g


def smoothness(kind: LossKind, data: LocalDataset) -> float:
    """Upper bound on the Lipschitz constant of the gradient (hinge: of the smooth part plus 1)."""
    X = data.features
    n = X.shape[0]
    k = kind.kind
    if k == "point_estimation":
        return 1.0
    top = float(np.linalg.norm(X, 2) ** 2) / n
    if k == "linreg":
        return top
    if k == "logistic":
        return 0.25 * top + kind.reg
    return top + kind.reg


def local_minimizer(kind: LossKind, data: LocalDataset) -> np.ndarray:
    """Exact minimizer of the local loss, when one exists in closed form."""
    if kind.kind == "point_estimation":
        return data.features.mean(axis=0)
    if kind.kind == "linreg":
        X, y = data.features, data.labels
        gram = X.T @ X
        if np.linalg.matrix_rank(gram) < gram.shape[0]:
            raise SingularDesign("X^T X is singular; no unique least-squares solution")
        return np.linalg.solve(gram, X.T @ y)
    raise NoClosedForm(f"{kind.kind} has no closed-form minimizer; solve it iteratively")


def predict(kind: LossKind, params, features) -> np.ndarray:
    """Predicted labels: {0,1} for classifiers, real values for regression."""
    scores = np.asarray(features) @ np.asarray(params)
    if kind.is_classifier:
        # sign rule for the SVM; for logistic sigmoid(z) >= 0.5 iff z >= 0
        return (scores >= 0).astype(np.float64)
    return scores


def accuracy(kind: LossKind, params, data: LocalDataset) -> float:
    if not kind.is_classifier:
        raise ValueError("accuracy is only defined for classifiers")
    return float(np.mean(predict(kind, params, data.features) == data.labels))
