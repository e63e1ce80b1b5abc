"""Monte Carlo experiment execution and tidy CSV output."""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from .aggregate import AggregatorSpec
from .attacks import NO_ATTACK
from .config import CSVDataSpec, ExperimentConfig
from .core import derive_stream
from .datagen import PointEstimationSpec, gen_linear_regression, gen_point_estimation, load_csv_population
from .ditto import Sweep, run_finetune, run_global_only, run_joint, run_local_only
from .metrics import EvalReport, evaluate
from .models import loss

WORKERS_ENV = "DITTOFL_WORKERS"


@dataclass(frozen=True)
class ResultRow:
    trial: int
    lam: float | str | None  # float, "dynamic", or None for baselines
    attack: str
    aggregator: str
    method: str
    benign_mean_loss: float
    benign_std_loss: float
    benign_mean_acc: float | None
    benign_std_acc: float | None
    wall_time_ms: float | None
    seed: int

    def sort_key(self):
        if self.lam is None:
            lam_key = (0, 0.0)
        elif isinstance(self.lam, str):
            lam_key = (2, 0.0)
        else:
            lam_key = (1, float(self.lam))
        return (self.trial, lam_key, self.method)


CSV_HEADER = [
    "trial", "lambda", "attack", "aggregator", "method",
    "benign_mean_loss", "benign_std_loss", "benign_mean_acc", "benign_std_acc",
    "wall_time_ms", "seed",
]


def trial_seed(master_seed: int, trial: int) -> int:
    return derive_stream(master_seed, "trial", trial).child_seed()


def build_population(cfg: ExperimentConfig, seed: int):
    data = cfg.data
    if isinstance(data, CSVDataSpec):
        K_a = data.K_a
        if K_a is None:
            probe = load_csv_population(data.path, data.schema, data.partition, seed, data.split, 0)
            K_a = cfg.attack.num_adversaries(probe.K)
        return load_csv_population(data.path, data.schema, data.partition, seed, data.split, K_a)
    if isinstance(data, PointEstimationSpec):
        return gen_point_estimation(data, seed)
    return gen_linear_regression(data, seed)


def run_trial(cfg: ExperimentConfig, trial: int) -> list[ResultRow]:
    """All requested methods on one freshly generated population."""
    seed = trial_seed(cfg.master_seed, trial)
    pop = build_population(cfg, seed)
    task, attack, solver = cfg.task, cfg.attack, cfg.solver
    policy = solver.lambda_policy
    rows = []

    def emit(method, lam, models, aggregator_label, elapsed):
        loss_rep = evaluate(models, pop, task, cfg.evaluation)
        acc_mean = acc_std = None
        if task.is_classifier and cfg.evaluation == "test":
            acc_mean, acc_std = loss_rep.mean, loss_rep.std
            loss_rep = _test_losses(models, pop, task)
        rows.append(
            ResultRow(
                trial, lam, attack.kind, aggregator_label, method,
                loss_rep.mean, loss_rep.std, acc_mean, acc_std,
                elapsed if cfg.timing else None, seed,
            )
        )

    for method in cfg.methods:
        t0 = time.perf_counter()
        if method in ("global", "tilted"):
            aggregator = cfg.aggregator if method == "global" else AggregatorSpec("tilted", t=cfg.tilt)
            res = run_global_only(pop, attack, aggregator, solver, seed, task)
            ms = (time.perf_counter() - t0) * 1e3
            emit(method, None, res.models(), aggregator.label, ms)
        elif method == "local":
            res = run_local_only(pop, attack, solver, seed, task)
            ms = (time.perf_counter() - t0) * 1e3
            emit(method, None, res.models(), "none", ms)
        else:
            if method == "ditto_joint":
                res = run_joint(pop, attack, cfg.aggregator, solver, seed, task)
            else:
                res = run_finetune(pop, attack, cfg.aggregator, solver, seed, task, cfg.finetune_epochs)
            ms = (time.perf_counter() - t0) * 1e3
            if policy.kind == "dynamic":
                emit(method, "dynamic", res.models(), cfg.aggregator.label, ms)
            else:
                for lam in policy.values():
                    emit(method, float(lam), res.models(lam), cfg.aggregator.label, ms)
    return rows


def _test_losses(models, pop, task):
    vals = np.array(
        [loss(task, models[k], dev.test) if len(dev.test) else np.nan for k, dev in enumerate(pop.devices)]
    )
    return EvalReport("loss", vals, pop.benign_mask)


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _trial_star(args):
    return run_trial(*args)


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> list[ResultRow]:
    """Run every trial; rows come back sorted so worker count never changes the output."""
    workers = _workers() if workers is None else workers
    jobs = [(cfg, t) for t in range(cfg.trials)]
    if workers > 1 and cfg.trials > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_trial_star, jobs))
    else:
        chunks = [_trial_star(j) for j in jobs]
    rows = [r for chunk in chunks for r in chunk]
    return sorted(rows, key=ResultRow.sort_key)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def emit_csv(rows, path) -> None:
    """Write rows with a fixed header; floats carry 17 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow(
                [_fmt(getattr(r, f.name)) for f in fields(ResultRow)]
            )


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# lambda sweeps --------------------------------------------------------------------


SWEEP_HEADER = ["variant", "lambda", "mean_error", "mean_std", "sd_mean_error", "trials"]


@dataclass(frozen=True)
class SweepRow:
    variant: str  # "clean" | "attacked"
    lam: float
    mean_error: float  # Monte Carlo mean of the benign mean error
    mean_std: float  # Monte Carlo mean of the per-trial benign std
    sd_mean_error: float  # Monte Carlo spread of the benign mean error
    trials: int


def clean_variant(cfg: ExperimentConfig) -> ExperimentConfig:
    return replace(cfg, data=replace(cfg.data, K_a=0), attack=NO_ATTACK)


def sweep_lambda(cfg: ExperimentConfig, grid, workers: int | None = None) -> list[SweepRow]:
    """Per-lambda Monte Carlo summary of joint Ditto, clean and attacked."""
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("lambda grid is empty")
    base = replace(cfg, methods=("ditto_joint",), solver=replace(cfg.solver, lambda_policy=Sweep(grid)))
    variants = [("clean", clean_variant(base))]
    if base.attack.kind != "none" or getattr(base.data, "K_a", 0):
        variants.append(("attacked", base))
    out = []
    for name, vcfg in variants:
        rows = run_experiment(vcfg, workers)
        for lam in sorted(set(grid)):
            sel = [r for r in rows if r.lam == lam]
            means = np.array([r.benign_mean_loss for r in sel])
            stds = np.array([r.benign_std_loss for r in sel])
            out.append(
                SweepRow(name, lam, float(means.mean()), float(stds.mean()), float(means.std()), len(sel))
            )
    return out


def emit_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(SWEEP_HEADER)
        for r in rows:
            writer.writerow([_fmt(getattr(r, f.name)) for f in fields(SweepRow)])


def expected_row_count(cfg: ExperimentConfig) -> int:
    per_trial = 0
    n_lam = 1 if cfg.solver.lambda_policy.kind == "dynamic" else len(cfg.solver.lambda_policy.values())
    for m in cfg.methods:
        per_trial += n_lam if m.startswith("ditto") else 1
    return per_trial * cfg.trials

