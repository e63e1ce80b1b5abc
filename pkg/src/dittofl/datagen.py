"""Synthetic federated populations and CSV ingestion.

Both generators follow the same hierarchy: a shared center theta, per-device
parameters ``w_k = theta + N(0, tau^2)`` (``tau_a`` for byzantine devices),
and noisy local observations of ``w_k``. Each device draws from its own
derived stream, so device ``k``'s data does not depend on how many other
devices exist or in what order they are generated.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Device, LocalDataset, derive_rng

DEFAULT_SPLIT = (0.72, 0.08, 0.20)


@dataclass(frozen=True)
class ThetaPolicy:
    kind: str = "fixed"  # "fixed" | "uniform"
    value: float = 0.0
    bound: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform"):
            raise ValueError(f"unknown theta policy {self.kind!r}")
        if self.kind == "uniform" and self.bound <= 0:
            raise ValueError("uniform theta needs a positive bound")

    def draw(self, d: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(d, float(self.value))
        return rng.uniform(-self.bound, self.bound, size=d)


@dataclass(frozen=True)
class PointEstimationSpec:
    K: int
    n: int
    sigma: float
    tau: float
    K_a: int = 0
    tau_a: float | None = None
    theta: ThetaPolicy = field(default_factory=ThetaPolicy)
    d: int = 1
    split: tuple[float, float, float] = DEFAULT_SPLIT

    def __post_init__(self):
        if self.tau_a is None:
            object.__setattr__(self, "tau_a", self.tau)
        _validate_common(self)

    @property
    def K_b(self) -> int:
        return self.K - self.K_a


@dataclass(frozen=True)
class LinRegSpec:
    K: int
    n: int
    d: int
    sigma: float
    tau: float
    beta: float = 1.0
    K_a: int = 0
    tau_a: float | None = None
    theta: ThetaPolicy = field(default_factory=ThetaPolicy)
    design: str = "orthogonal_scaled"  # or "gaussian"
    split: tuple[float, float, float] = DEFAULT_SPLIT

    def __post_init__(self):
        if self.tau_a is None:
            object.__setattr__(self, "tau_a", self.tau)
        _validate_common(self)
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.design not in ("orthogonal_scaled", "gaussian"):
            raise ValueError(f"unknown design {self.design!r}")
        n_train = split_counts(self.n, self.split)[0]
        if self.design == "orthogonal_scaled" and n_train < self.d:
            raise ValueError(
                f"orthogonal_scaled design needs at least d={self.d} training rows, got {n_train}"
            )

    @property
    def K_b(self) -> int:
        return self.K - self.K_a


def _validate_common(spec):
    if spec.K < 1 or spec.n < 1 or spec.d < 1:
        raise ValueError("K, n and d must be positive")
    if not 0 <= spec.K_a < spec.K:
        raise ValueError(f"need 0 <= K_a < K, got K_a={spec.K_a}, K={spec.K}")
    if spec.sigma < 0 or spec.tau < 0:
        raise ValueError("sigma and tau must be >= 0")
    if spec.tau_a < spec.tau:
        raise ValueError("tau_a must be >= tau")
    _validate_split(spec.split)


def _validate_split(split):
    if len(split) != 3 or any(f < 0 for f in split) or not math.isclose(sum(split), 1.0):
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1: {split}")


@dataclass
class Population:
    devices: list[Device]
    ground_truth: np.ndarray | None  # (K, d); for metrics only
    theta: np.ndarray | None

    @property
    def K(self) -> int:
        return len(self.devices)

    @property
    def dim(self) -> int:
        return self.devices[0].train.dim

    @property
    def byzantine_mask(self) -> np.ndarray:
        return np.array([dev.byzantine for dev in self.devices], dtype=bool)

    @property
    def benign_mask(self) -> np.ndarray:
        return ~self.byzantine_mask

    @property
    def K_a(self) -> int:
        return int(self.byzantine_mask.sum())


def split_counts(n: int, fractions=DEFAULT_SPLIT) -> tuple[int, int, int]:
    """Largest-remainder rounding of ``n * fractions``; the counts sum to ``n``."""
    _validate_split(fractions)
    raw = [n * f for f in fractions]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


def byzantine_flags(K: int, K_a: int, seed: int) -> np.ndarray:
    """Exactly ``K_a`` flags set: the last ``K_a`` indices, then shuffled."""
    flags = np.zeros(K, dtype=bool)
    flags[K - K_a:] = True
    derive_rng(seed, "byzantine-shuffle").shuffle(flags)
    return flags


def _draw_centers(spec, seed):
    theta = spec.theta.draw(spec.d, derive_rng(seed, "theta"))
    flags = byzantine_flags(spec.K, spec.K_a, seed)
    w = np.empty((spec.K, spec.d))
    for k in range(spec.K):
        rng = derive_rng(seed, "device-model", 0, k)
        scale = spec.tau_a if flags[k] else spec.tau
        w[k] = theta + scale * rng.standard_normal(spec.d)
    return theta, flags, w


def _split_rows(X, y, counts):
    a, b, _ = counts
    parts = (slice(0, a), slice(a, a + b), slice(a + b, None))
    return [LocalDataset(X[s], y[s]) for s in parts]


def gen_point_estimation(spec: PointEstimationSpec, seed: int) -> Population:
    theta, flags, w = _draw_centers(spec, seed)
    counts = split_counts(spec.n, spec.split)
    devices = []
    for k in range(spec.K):
        rng = derive_rng(seed, "device-data", 0, k)
        x = w[k] + spec.sigma * rng.standard_normal((spec.n, spec.d))
        train, val, test = _split_rows(x, np.zeros(spec.n), counts)
        devices.append(Device(k, train, val, test, byzantine=bool(flags[k])))
    return Population(devices, w, theta)


def orthogonal_design(n: int, d: int, beta: float, rng: np.random.Generator) -> np.ndarray:
    """An ``n x d`` matrix with ``X^T X = beta * I``."""
    q, r = np.linalg.qr(rng.standard_normal((n, d)))
    q = q * np.sign(np.diag(r))
    return math.sqrt(beta) * q


def gen_linear_regression(spec: LinRegSpec, seed: int) -> Population:
    """Linear-regression population.

    With the orthogonal design, the training block of every device satisfies
    ``X^T X = beta * I`` exactly. Validation and test rows are Gaussian with
    the same per-row second moment, ``beta / n_train``.
    """
    theta, flags, w = _draw_centers(spec, seed)
    counts = split_counts(spec.n, spec.split)
    n_train = counts[0]
    row_scale = math.sqrt(spec.beta / max(n_train, 1))
    devices = []
    for k in range(spec.K):
        rng = derive_rng(seed, "device-data", 0, k)
        if spec.design == "orthogonal_scaled":
            x_train = orthogonal_design(n_train, spec.d, spec.beta, rng)
        else:
            x_train = row_scale * rng.standard_normal((n_train, spec.d))
        x_rest = row_scale * rng.standard_normal((spec.n - n_train, spec.d))
        X = np.vstack([x_train, x_rest])
        y = X @ w[k] + spec.sigma * rng.standard_normal(spec.n)
        train, val, test = _split_rows(X, y, counts)
        devices.append(Device(k, train, val, test, byzantine=bool(flags[k])))
    return Population(devices, w, theta)


# CSV ingestion ----------------------------------------------------------------


class CSVFormatError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True)
class CSVSchema:
    label: str
    features: tuple[str, ...] | None = None  # None: every other column except the partition column
    bias: bool = False  # append a constant-1 feature


@dataclass(frozen=True)
class Partition:
    kind: str  # "by_column" | "dirichlet" | "classes_per_device" | "power_law"
    column: str | None = None
    num_devices: int | None = None
    alpha: float | None = None
    classes: int | None = None
    exponent: float | None = None

    def __post_init__(self):
        k = self.kind
        if k == "by_column":
            if not self.column:
                raise ValueError("by_column partition needs a column name")
        elif k in ("dirichlet", "classes_per_device", "power_law"):
            if not self.num_devices or self.num_devices < 1:
                raise ValueError(f"{k} partition needs num_devices >= 1")
            if k == "dirichlet" and not (self.alpha and self.alpha > 0):
                raise ValueError("dirichlet partition needs alpha > 0")
            if k == "classes_per_device" and not (self.classes and self.classes >= 1):
                raise ValueError("classes_per_device partition needs classes >= 1")
            if k == "power_law" and self.exponent is None:
                raise ValueError("power_law partition needs an exponent")
        else:
            raise ValueError(f"unknown partition {k!r}")


def read_csv(path, schema: CSVSchema, partition_column: str | None = None):
    """Parse a headed CSV into a feature matrix, label vector and optional group column."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(1, "missing header row") from None
        header = [h.strip() for h in header]
        if schema.label not in header:
            raise CSVFormatError(1, f"label column {schema.label!r} not in header")
        if partition_column is not None and partition_column not in header:
            raise CSVFormatError(1, f"partition column {partition_column!r} not in header")
        if schema.features is None:
            feat_cols = [h for h in header if h not in (schema.label, partition_column)]
        else:
            missing = [c for c in schema.features if c not in header]
            if missing:
                raise CSVFormatError(1, f"feature columns missing from header: {missing}")
            feat_cols = list(schema.features)
        fidx = [header.index(c) for c in feat_cols]
        lidx = header.index(schema.label)
        gidx = header.index(partition_column) if partition_column else None
        rows, labels, groups = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CSVFormatError(lineno, f"expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(row[i]) for i in fidx])
                labels.append(float(row[lidx]))
            except ValueError as exc:
                raise CSVFormatError(lineno, str(exc)) from None
            if gidx is not None:
                groups.append(row[gidx].strip())
    if not rows:
        raise CSVFormatError(2, "no data rows")
    X = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(fidx))
    if schema.bias:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
    return X, np.asarray(labels), (groups if gidx is not None else None)


def _assign_rows(y, groups, partition: Partition, rng) -> list[np.ndarray]:
    n = y.shape[0]
    if partition.kind == "by_column":
        keys = sorted(set(groups))
        g = np.asarray(groups)
        return [np.flatnonzero(g == key) for key in keys]
    K = partition.num_devices
    classes = np.unique(y)
    if partition.kind == "power_law":
        weights = (np.arange(1, K + 1, dtype=np.float64)) ** (-partition.exponent)
        sizes = np.floor(weights / weights.sum() * n).astype(int)
        sizes[: n - sizes.sum()] += 1
        perm = rng.permutation(n)
        return np.split(perm, np.cumsum(sizes)[:-1])
    buckets = [[] for _ in range(K)]
    if partition.kind == "dirichlet":
        for c in classes:
            idx = rng.permutation(np.flatnonzero(y == c))
            props = rng.dirichlet(np.full(K, partition.alpha))
            cuts = np.floor(np.cumsum(props) * len(idx)).astype(int)[:-1]
            for k, part in enumerate(np.split(idx, cuts)):
                buckets[k].extend(part.tolist())
    else:  # classes_per_device
        m = min(partition.classes, len(classes))
        order = rng.permutation(len(classes))
        holders = {c: [] for c in range(len(classes))}
        for k in range(K):
            for j in range(m):
                holders[int(order[(k * m + j) % len(classes)])].append(k)
        for ci, c in enumerate(classes):
            owners = holders[ci]
            if not owners:
                continue
            idx = rng.permutation(np.flatnonzero(y == c))
            for j, part in enumerate(np.array_split(idx, len(owners))):
                buckets[owners[j]].extend(part.tolist())
    return [np.sort(np.asarray(b, dtype=int)) for b in buckets]


def load_csv_population(
    path,
    schema: CSVSchema,
    partition: Partition,
    seed: int,
    split=DEFAULT_SPLIT,
    K_a: int = 0,
) -> Population:
    X, y, groups = read_csv(path, schema, partition.column if partition.kind == "by_column" else None)
    rng = derive_rng(seed, "csv-partition")
    assignment = _assign_rows(y, groups, partition, rng)
    K = len(assignment)
    if not 0 <= K_a < K:
        raise ValueError(f"need 0 <= K_a < K, got K_a={K_a}, K={K}")
    flags = byzantine_flags(K, K_a, seed)
    devices = []
    for k, rows in enumerate(assignment):
        if len(rows) == 0:
            raise ValueError(f"partition left device {k} empty")
        rows = derive_rng(seed, "csv-split", 0, k).permutation(rows)
        counts = split_counts(len(rows), split)
        if counts[0] == 0:
            raise ValueError(f"device {k} has no training rows after the split")
        train, val, test = _split_rows(X[rows], y[rows], counts)
        devices.append(Device(k, train, val, test, byzantine=bool(flags[k])))
    return Population(devices, None, None)
