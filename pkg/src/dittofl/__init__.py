"""Fair and robust federated learning through personalization (Ditto)."""

from .aggregate import AggregatorSpec, aggregate
from .attacks import NO_ATTACK, AttackSpec
from .core import Device, DivergenceError, LocalDataset, RoundUpdate, derive_rng
from .datagen import LinRegSpec, PointEstimationSpec, Population, ThetaPolicy
from .ditto import Dynamic, Fixed, LambdaPolicy, SolverConfig, Sweep, run_joint
from .metrics import EvalReport, evaluate
from .models import HingeSVM, LinReg, Logistic, LossKind, PointEstimation

__version__ = "0.1.0"
