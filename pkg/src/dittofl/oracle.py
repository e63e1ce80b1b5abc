"""Closed-form theory for federated point estimation and linear regression.

Both problems share one structure: each device's local estimate is a noisy
Gaussian observation of its own parameter ``w_k``, with observation variance
``sigma^2 / n`` for point estimation and ``sigma^2 / beta`` for regression
under ``X^T X = beta I``. Everything below is a function of that variance,
the relatedness ``tau``, and the adversarial spread ``tau_a``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class _UseGlobal:
    """Optimal lambda is infinite: the global model is the best estimator."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UseGlobal"

    def __reduce__(self):
        return (_UseGlobal, ())


UseGlobal = _UseGlobal()


@dataclass(frozen=True)
class TheoryInputs:
    K: int
    n: int
    sigma: float
    tau: float
    K_a: int = 0
    tau_a: float | None = None
    d: int = 1
    beta: float | None = None  # None: point estimation

    def __post_init__(self):
        if self.tau_a is None:
            object.__setattr__(self, "tau_a", self.tau)
        if self.K < 2:
            raise ValueError("closed forms need K >= 2")
        if not 0 <= self.K_a < self.K:
            raise ValueError("need 0 <= K_a < K")
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be positive")
        if self.sigma < 0 or self.tau < 0 or self.tau_a < self.tau:
            raise ValueError("need sigma >= 0, tau >= 0, tau_a >= tau")
        if self.beta is not None and self.beta <= 0:
            raise ValueError("beta must be > 0")

    @property
    def observation_var(self) -> float:
        """Variance of a device's local estimate around its own parameter."""
        if self.beta is None:
            return self.sigma**2 / self.n
        return self.sigma**2 / self.beta

    @property
    def adversarial_excess(self) -> float:
        return self.K_a / (self.K - 1) * (self.tau_a**2 - self.tau**2)


@dataclass(frozen=True)
class TheoryAssumptions:
    mu: float
    G1: float
    M: float

    def __post_init__(self):
        if min(self.mu, self.G1, self.M) <= 0:
            raise ValueError("mu, G1 and M must all be > 0")


def lambda_star_clean(inputs: TheoryInputs):
    if inputs.tau == 0:
        return UseGlobal
    return inputs.sigma**2 / (inputs.n * inputs.tau**2)


def lambda_star_adversarial(inputs: TheoryInputs):
    K = inputs.K
    denom = K * inputs.tau**2 + inputs.adversarial_excess
    if denom < 0:
        raise ValueError("non-positive denominator in the optimal lambda")
    if denom == 0:
        return UseGlobal
    return inputs.sigma**2 / inputs.n * K / denom


def personalized_minimizer_pe(lam, w_star, w_hat_k):
    """Minimizer of ``0.5 (v - w_hat_k)^2 + lam/2 (v - w_star)^2``."""
    w_star = np.asarray(w_star, dtype=np.float64)
    w_hat_k = np.asarray(w_hat_k, dtype=np.float64)
    if lam is UseGlobal:
        return w_star + 0.0 * w_hat_k
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return lam / (1.0 + lam) * w_star + 1.0 / (1.0 + lam) * w_hat_k


def global_minimizer_lr(grams, moments) -> np.ndarray:
    """Minimizer of the equal-weight average of least-squares losses.

    ``grams[i] = X_i^T X_i / n_i`` and ``moments[i] = X_i^T y_i / n_i``.
    """
    A = np.sum(grams, axis=0)
    b = np.sum(moments, axis=0)
    return np.linalg.solve(A, b)


def personalized_minimizer_lr(lam, features, labels, w_star) -> np.ndarray:
    """``((1/n) X^T X + lam I)^{-1} ((1/n) X^T y + lam w*)``."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n, d = X.shape
    w_star = np.asarray(w_star, dtype=np.float64)
    if lam is UseGlobal:
        return w_star.copy()
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    A = X.T @ X / n + lam * np.eye(d)
    if lam == 0 and np.linalg.matrix_rank(A) < d:
        raise np.linalg.LinAlgError("singular design at lambda = 0")
    return np.linalg.solve(A, X.T @ y / n + lam * w_star)


def personalized_minimizer_lr_scaled(lam, n: int, beta: float, w_hat_k, w_hat_others_sum, K: int):
    """The same minimizer written out for ``X^T X = beta I`` designs."""
    w_hat_k = np.asarray(w_hat_k, dtype=np.float64)
    s = np.asarray(w_hat_others_sum, dtype=np.float64)
    return n / (beta + n * lam) * ((beta / n + lam / K) * w_hat_k + lam / K * s)


def posterior_variance(inputs: TheoryInputs) -> float:
    """Posterior variance of a benign ``w_k`` given its own and the others' mean estimate."""
    s2 = inputs.observation_var
    K = inputs.K
    if s2 == 0:
        return 0.0
    rest = K * inputs.tau**2 + s2 + inputs.adversarial_excess
    return 1.0 / (1.0 / s2 + (K - 1) / rest)


def bayes_weights(inputs: TheoryInputs) -> tuple[float, float]:
    """Posterior-mean coefficients on (own estimate, mean of the others' estimates)."""
    s2 = inputs.observation_var
    K = inputs.K
    rest = K * inputs.tau**2 + s2 + inputs.adversarial_excess
    if s2 == 0:
        return 1.0, 0.0
    if rest == 0:
        return 0.0, 1.0
    var = posterior_variance(inputs)
    return var / s2, (K - 1) * var / rest


def bayes_posterior_pe(inputs: TheoryInputs, w_hat_k, w_hat_rest_mean):
    """Posterior (mean, variance) of a benign device's parameter."""
    a, b = bayes_weights(inputs)
    mean = a * np.asarray(w_hat_k, dtype=np.float64) + b * np.asarray(w_hat_rest_mean, dtype=np.float64)
    return mean, posterior_variance(inputs)


# regression under X^T X = beta I has the same posterior with sigma^2/beta noise
bayes_posterior_lr = bayes_posterior_pe


def predicted_error_and_variance(inputs: TheoryInputs) -> tuple[float, float]:
    """Expected benign test error and its variance at the optimal lambda."""
    var = posterior_variance(inputs)
    return inputs.d * var, 2.0 * inputs.d * var**2


@dataclass
class MMSEReport:
    lam: float
    max_gap: float
    trials: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_gap <= self.tolerance


def mmse_equivalence_check(
    inputs: TheoryInputs,
    rng: np.random.Generator,
    trials: int = 1000,
    lam=None,
    tolerance: float = 1e-10,
) -> MMSEReport:
    """Compare Ditto's personalized minimizer at ``lam`` with the Bayes posterior mean.

    ``lam`` defaults to the optimal value. For point estimation the
    comparison runs on random local estimates; for regression each trial
    builds ``X^T X = beta I`` designs with random labels and goes through the
    general matrix solve, not the scalar shortcut.
    """
    from .datagen import orthogonal_design

    if lam is None:
        lam = lambda_star_adversarial(inputs)
    K, d, n = inputs.K, inputs.d, inputs.n
    if inputs.beta is not None and n < d:
        raise ValueError("regression check needs n >= d")
    gap = 0.0
    for _ in range(trials):
        if inputs.beta is None:
            w_hat = rng.normal(0.0, 3.0, size=(K, d))
            ditto = personalized_minimizer_pe(lam, w_hat.mean(axis=0), w_hat)
        else:
            designs = [orthogonal_design(n, d, inputs.beta, rng) for _ in range(K)]
            labels = [rng.normal(0.0, 3.0, size=n) for _ in range(K)]
            w_hat = np.stack([np.linalg.solve(X.T @ X, X.T @ y) for X, y in zip(designs, labels)])
            w_star = global_minimizer_lr(
                [X.T @ X / n for X in designs],
                [X.T @ y / n for X, y in zip(designs, labels)],
            )
            ditto = np.stack(
                [personalized_minimizer_lr(lam, designs[k], labels[k], w_star) for k in range(K)]
            )
        rest = (w_hat.sum(axis=0)[None, :] - w_hat) / (K - 1)
        bayes, _ = bayes_posterior_pe(inputs, w_hat, rest)
        gap = max(gap, float(np.max(np.abs(ditto - bayes))))
    return MMSEReport(float("inf") if lam is UseGlobal else float(lam), gap, trials, tolerance)
