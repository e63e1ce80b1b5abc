"""Declarative experiment configs (JSON), validated before anything runs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .aggregate import AggregatorSpec
from .attacks import AttackSpec
from .datagen import CSVSchema, LinRegSpec, Partition, PointEstimationSpec, ThetaPolicy
from .ditto import LambdaPolicy, SolverConfig
from .models import LossKind

METHODS = ("global", "local", "ditto_joint", "ditto_finetune", "tilted")
TOP_KEYS = {
    "data", "task", "attack", "aggregator", "solver", "lambda", "methods",
    "finetune_epochs", "tilt", "evaluation", "trials", "master_seed", "output", "timing",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CSVDataSpec:
    path: str
    schema: CSVSchema
    partition: Partition
    split: tuple[float, float, float] = (0.72, 0.08, 0.20)
    K_a: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    data: PointEstimationSpec | LinRegSpec | CSVDataSpec
    task: LossKind
    attack: AttackSpec = field(default_factory=AttackSpec)
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    methods: tuple[str, ...] = ("global", "local", "ditto_joint")
    finetune_epochs: int = 1
    tilt: float = 1.0
    evaluation: str = "test"
    trials: int = 1
    master_seed: int = 0
    output: str = "results.csv"
    timing: bool = False

    @property
    def K(self) -> int | None:
        return getattr(self.data, "K", None)


def _build(cls, raw, where: str, renames=None, convert=None):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    renames = renames or {}
    kwargs = {}
    for key, value in raw.items():
        name = renames.get(key, key)
        if name not in names:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if convert and name in convert:
            value = convert[name](value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _tuple(v):
    return tuple(v) if isinstance(v, list) else v


def _parse_data(raw, K_a_from_attack):
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ConfigError("data: expected an object with a 'kind'")
    raw = dict(raw)
    kind = raw.pop("kind")
    conv = {
        "theta": lambda v: _build(ThetaPolicy, v, "data.theta"),
        "split": _tuple,
    }
    if kind == "csv":
        conv = {
            "schema": lambda v: _build(CSVSchema, v, "data.schema", convert={"features": _tuple}),
            "partition": lambda v: _build(Partition, v, "data.partition", convert={"classes": _tuple}),
            "split": _tuple,
        }
        cls = CSVDataSpec
    elif kind == "point_estimation":
        cls = PointEstimationSpec
    elif kind == "linreg":
        cls = LinRegSpec
    else:
        raise ConfigError(f"data.kind: unknown {kind!r}")
    if "K_a" not in raw and K_a_from_attack is not None:
        raw["K_a"] = K_a_from_attack(raw)
    return _build(cls, raw, "data", convert=conv)


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if "data" not in raw:
        raise ConfigError("missing 'data' section")

    attack = _build(AttackSpec, raw.get("attack", {}), "attack", convert={"label_alphabet": _tuple})

    def attack_K_a(data_raw):
        K = data_raw.get("K", data_raw.get("partition", {}).get("num_devices"))
        return attack.num_adversaries(K) if isinstance(K, int) else None

    data = _parse_data(raw["data"], attack_K_a)
    K = data.K if hasattr(data, "K") else data.partition.num_devices
    if (
        isinstance(data.K_a, int)
        and isinstance(K, int)
        and "K_a" in raw["data"]
        and "adversary_fraction" in raw.get("attack", {})
        and data.K_a != attack.num_adversaries(K)
    ):
        raise ConfigError(
            f"data.K_a={data.K_a} disagrees with attack.adversary_fraction "
            f"({attack.num_adversaries(K)} of {K} devices)"
        )

    default_task = {"point_estimation": {"kind": "point_estimation"}, "linreg": {"kind": "linreg"}}
    data_kind = raw["data"]["kind"]
    if "task" not in raw and data_kind not in default_task:
        raise ConfigError("csv data needs an explicit 'task'")
    task = _build(LossKind, raw.get("task", default_task.get(data_kind)), "task")
    if data_kind == "point_estimation" and task.kind != "point_estimation":
        raise ConfigError("point-estimation data needs the point_estimation task")

    aggregator = _build(AggregatorSpec, raw.get("aggregator", {}), "aggregator")
    lam_raw = raw.get("lambda", {"kind": "fixed", "value": 1.0})
    policy = _build(LambdaPolicy, lam_raw, "lambda", convert={"grid": _tuple})
    solver_raw = raw.get("solver", {})
    if isinstance(solver_raw, dict) and "lambda_policy" in solver_raw:
        raise ConfigError("solver: set lambda in the top-level 'lambda' section")
    solver = _build(SolverConfig, {**solver_raw, "lambda_policy": policy}, "solver")

    methods = tuple(raw.get("methods", ("global", "local", "ditto_joint")))
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods or len(set(methods)) != len(methods):
        raise ConfigError(f"methods must be distinct values from {METHODS}, got {list(methods)}")

    evaluation = raw.get("evaluation", "test")
    if evaluation not in ("test", "ground_truth"):
        raise ConfigError(f"evaluation: unknown target {evaluation!r}")
    if evaluation == "ground_truth" and data_kind == "csv":
        raise ConfigError("evaluation: csv data has no generating parameters")

    cfg = {}
    for key, typ, lo in (("trials", int, 1), ("finetune_epochs", int, 0), ("master_seed", int, 0)):
        v = raw.get(key, ExperimentConfig.__dataclass_fields__[key].default)
        if not isinstance(v, typ) or isinstance(v, bool) or v < lo:
            raise ConfigError(f"{key}: expected an integer >= {lo}")
        cfg[key] = v
    if cfg["master_seed"] >= 2**64:
        raise ConfigError("master_seed must fit in 64 bits")
    tilt = raw.get("tilt", 1.0)
    if not isinstance(tilt, (int, float)) or not tilt > 0:
        raise ConfigError("tilt must be a positive number")
    output = raw.get("output", "results.csv")
    if not isinstance(output, str):
        raise ConfigError("output must be a path string")
    return ExperimentConfig(
        data=data,
        task=task,
        attack=attack,
        aggregator=aggregator,
        solver=solver,
        methods=methods,
        tilt=float(tilt),
        evaluation=evaluation,
        output=output,
        timing=bool(raw.get("timing", False)),
        **cfg,
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(raw)
