"""Training-time attacks.

* A1 label poisoning acts once, on the training split of byzantine devices.
* A2 random updates replace a byzantine device's round update.
* A3 model replacement scales a byzantine device's update (by default one
  computed on its A1-poisoned data) so it dominates the aggregate.

For point estimation there are no labels; the adversarial spread ``tau_a``
chosen at generation time plays the role of label corruption, and A1 leaves
the data as is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LocalDataset, RoundUpdate, derive_rng
from .datagen import Population
from .models import LossKind

KINDS = ("none", "label_poison", "random_update", "model_replacement")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    adversary_fraction: float = 0.0
    sigma_attack: float = 1.0
    boost: str | float = "num_selected"
    poison_data: bool = True  # A3: train the malicious delta on A1-poisoned data
    lie_about_loss: bool = False
    reported_loss: float = 0.0  # used when lie_about_loss is set
    label_alphabet: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack {self.kind!r}")
        if not 0.0 <= self.adversary_fraction < 1.0:
            raise ValueError("adversary_fraction must be in [0, 1)")
        if self.kind == "random_update" and self.sigma_attack <= 0:
            raise ValueError("sigma_attack must be > 0")
        if self.boost != "num_selected":
            if not isinstance(self.boost, (int, float)) or isinstance(self.boost, bool):
                raise ValueError("boost must be 'num_selected' or a number")

    @property
    def poisons_data(self) -> bool:
        return self.kind == "label_poison" or (self.kind == "model_replacement" and self.poison_data)

    def num_adversaries(self, K: int) -> int:
        return int(np.floor(self.adversary_fraction * K + 0.5))


NO_ATTACK = AttackSpec()


def poison_labels(
    data: LocalDataset,
    task: LossKind,
    rng: np.random.Generator,
    byzantine: bool = True,
    alphabet=None,
) -> LocalDataset:
    """Flip binary labels, or redraw labels uniformly over the label alphabet.

    Classifier tasks flip {0,1}. With an explicit ``alphabet`` labels are
    redrawn uniformly from it. Real-valued regression labels are redrawn
    uniformly over the observed ``[min, max]`` label range of the device.
    """
    if not byzantine or task.kind == "point_estimation":
        return data
    y = data.labels
    if alphabet is not None:
        alphabet = np.asarray(alphabet, dtype=np.float64)
        if alphabet.size == 2 and task.is_classifier:
            new = np.where(y == alphabet[0], alphabet[1], alphabet[0])
        else:
            new = alphabet[rng.integers(0, alphabet.size, size=y.shape[0])]
    elif task.is_classifier:
        new = 1.0 - y
    else:
        lo, hi = float(y.min()), float(y.max())
        new = rng.uniform(lo, hi, size=y.shape[0]) if hi > lo else y.copy()
    return data.with_labels(new)


def random_update(
    dim: int,
    sigma_attack: float,
    rng: np.random.Generator,
    device_id: int = 0,
    train_loss: float = 0.0,
) -> RoundUpdate:
    delta = sigma_attack * rng.standard_normal(dim)
    return RoundUpdate(device_id, delta, train_loss)


def scale_replacement(delta_mal, num_selected: int, boost="num_selected") -> np.ndarray:
    factor = float(num_selected) if boost == "num_selected" else float(boost)
    return factor * np.asarray(delta_mal, dtype=np.float64)


def poison_population(population, attack: AttackSpec, task: LossKind, seed: int):
    """Copy of ``population`` with A1 applied to byzantine training splits."""
    if not attack.poisons_data:
        return population
    devices = []
    for dev in population.devices:
        if dev.byzantine:
            rng = derive_rng(seed, "poison", 0, dev.id)
            dev = dev.replace_train(
                poison_labels(dev.train, task, rng, True, attack.label_alphabet)
            )
        devices.append(dev)
    return Population(devices, population.ground_truth, population.theta)
