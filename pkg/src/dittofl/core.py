"""Shared numeric and protocol types.

Model parameters are plain 1-D float64 numpy arrays. The helpers here
enforce the two invariants every other module relies on: matching
dimensions and finite entries.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

ModelParams = np.ndarray


class DimensionError(ValueError):
    """Two parameter vectors (or a vector and a dataset) disagree in size."""


class NonFiniteError(ValueError):
    """A NaN or Inf reached a place where only finite values are admitted."""


class DivergenceError(RuntimeError):
    def __init__(self, round_index: int, device_id: int | None, what: str = "parameters"):
        self.round_index = round_index
        self.device_id = device_id
        who = "server" if device_id is None else f"device {device_id}"
        super().__init__(f"non-finite {what} at round {round_index} ({who})")


def as_params(values, dim: int | None = None) -> ModelParams:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise DimensionError(f"model parameters must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionError(f"expected dimension {dim}, got {arr.shape[0]}")
    return arr


def check_finite(values: np.ndarray, what: str = "parameters") -> np.ndarray:
    if not np.isfinite(values).all():
        raise NonFiniteError(f"non-finite {what}")
    return values


def vec_axpy(a: float, x, y) -> ModelParams:
    """Return ``a * x + y``."""
    x = as_params(x)
    y = as_params(y)
    if x.shape != y.shape:
        raise DimensionError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    return a * x + y


@dataclass(frozen=True)
class LocalDataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        # private copies, so freezing them never touches the caller's arrays
        feats = np.array(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1)
        labels = np.array(self.labels, dtype=np.float64).reshape(-1)
        if feats.ndim != 2 or feats.shape[0] != labels.shape[0]:
            raise DimensionError(
                f"features {feats.shape} and labels {labels.shape} disagree in row count"
            )
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LocalDataset":
        return LocalDataset(self.features[idx], self.labels[idx])

    def with_labels(self, labels) -> "LocalDataset":
        return LocalDataset(self.features, labels)

    @classmethod
    def empty(cls, dim: int) -> "LocalDataset":
        return cls(np.zeros((0, dim)), np.zeros(0))


@dataclass(eq=False)
class Device:
    """One participant.

    ``personalized`` is the device's own state v_k; ``byzantine`` is fixed at
    construction. Validation and test splits are never read by training code.
    """

    id: int
    train: LocalDataset
    validation: LocalDataset
    test: LocalDataset
    byzantine: bool = False
    p_k: float = 1.0
    personalized: ModelParams | None = None

    def __post_init__(self):
        if len(self.train) < 1:
            raise ValueError(f"device {self.id} has no training data")
        if not 0.0 < self.p_k <= 1.0:
            raise ValueError(f"selection probability must be in (0, 1], got {self.p_k}")
        self._byzantine = bool(self.byzantine)
        self._frozen = True
        if self.personalized is None:
            self.personalized = np.zeros(self.train.dim)

    def __setattr__(self, name, value):
        if name == "byzantine" and getattr(self, "_frozen", False):
            raise AttributeError("byzantine flag is immutable")
        super().__setattr__(name, value)

    @property
    def n_train(self) -> int:
        return len(self.train)

    def replace_train(self, train: LocalDataset) -> "Device":
        return Device(
            id=self.id,
            train=train,
            validation=self.validation,
            test=self.test,
            byzantine=self._byzantine,
            p_k=self.p_k,
            personalized=None if self.personalized is None else self.personalized.copy(),
        )


@dataclass(frozen=True)
class RoundUpdate:
    device_id: int
    delta: ModelParams
    train_loss: float
    norm: float = field(default=-1.0)

    def __post_init__(self):
        delta = as_params(self.delta)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "norm", math.sqrt(float(delta @ delta)))
        if not self.train_loss >= 0.0:
            raise ValueError(f"train_loss must be >= 0, got {self.train_loss}")


# Random streams -------------------------------------------------------------


@lru_cache(maxsize=4096)
def _philox_key(master_seed: int, purpose: str) -> np.ndarray:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(master_seed).to_bytes(16, "little", signed=True))
    h.update(purpose.encode("utf-8"))
    key = np.frombuffer(h.digest(), dtype="<u8").astype(np.uint64)
    key.setflags(write=False)
    return key


def _philox(master_seed: int, purpose: str, round: int, device: int) -> np.random.Generator:
    if round < 0 or device < 0:
        raise ValueError("round and device indices must be non-negative")
    counter = np.array([0, 0, round, device], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=_philox_key(master_seed, purpose), counter=counter))


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by (seed, purpose, round, device).

    The key is a hash of (seed, purpose); round and device occupy the two
    high words of the Philox counter, so streams never overlap and can be
    created in any order.
    """

    master_seed: int
    purpose: str
    round: int = 0
    device: int = 0

    def generator(self) -> np.random.Generator:
        return _philox(self.master_seed, self.purpose, self.round, self.device)

    def child_seed(self) -> int:
        """A 63-bit integer seed drawn from this stream."""
        return int(self.generator().integers(0, 2**63 - 1))


def derive_stream(master: int, purpose: str, round: int = 0, device: int = 0) -> RngStream:
    return RngStream(int(master), purpose, int(round), int(device))


def derive_rng(master: int, purpose: str, round: int = 0, device: int = 0) -> np.random.Generator:
    """Shortcut for ``derive_stream(...).generator()``."""
    return _philox(int(master), purpose, int(round), int(device))
