"""The Ditto solver: alternating global and personalized updates.

Each round the server samples devices; every selected device (i) runs local
SGD on its own loss starting from the current global model and reports the
resulting delta, and (ii) takes a few steps on its personalized objective
``F_k(v) + lam/2 ||v - w^t||^2``. Aggregation of the deltas is pluggable.

The global trajectory never reads a personalized model, so personalized
models for several lambdas (a sweep, or the candidate set of the dynamic
lambda rule) are carried side by side as an ``(L, K, d)`` stack. Each row
sees exactly the mini-batches a single-lambda run would see.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .aggregate import AggregatorSpec, aggregate
from .attacks import NO_ATTACK, AttackSpec, poison_population, random_update, scale_replacement
from .core import DivergenceError, RoundUpdate, derive_rng
from .datagen import Population
from .models import LossKind, accuracy, grad, loss, smoothness

STRONG_CANDIDATES = (0.05, 0.1, 0.2)
WEAK_CANDIDATES = (0.1, 1.0, 2.0)
STRONG_FALLBACK = 0.1
WEAK_FALLBACK = 1.0
# devices with fewer validation points than this use the fallback lambda
MIN_VALIDATION = 5

SCHEDULES = ("constant", "decaying", "inverse_smoothness")


@dataclass(frozen=True)
class LambdaPolicy:
    kind: str = "fixed"  # "fixed" | "dynamic" | "sweep"
    value: float = 1.0
    grid: tuple[float, ...] = ()
    strong_attack: bool = False

    def __post_init__(self):
        if self.kind not in ("fixed", "dynamic", "sweep"):
            raise ValueError(f"unknown lambda policy {self.kind!r}")
        if self.kind == "fixed" and not self.value >= 0:
            raise ValueError("lambda must be >= 0")
        if self.kind == "sweep":
            if not self.grid:
                raise ValueError("lambda sweep grid is empty")
            if any(not g >= 0 for g in self.grid):
                raise ValueError("lambda grid values must be >= 0")

    @property
    def candidates(self) -> tuple[float, ...]:
        return STRONG_CANDIDATES if self.strong_attack else WEAK_CANDIDATES

    @property
    def fallback(self) -> float:
        return STRONG_FALLBACK if self.strong_attack else WEAK_FALLBACK

    def values(self) -> tuple[float, ...]:
        if self.kind == "fixed":
            return (float(self.value),)
        if self.kind == "sweep":
            return tuple(float(g) for g in self.grid)
        return self.candidates


def Fixed(value: float) -> LambdaPolicy:
    return LambdaPolicy("fixed", value=value)


def Dynamic(strong_attack: bool = False) -> LambdaPolicy:
    return LambdaPolicy("dynamic", strong_attack=strong_attack)


def Sweep(grid) -> LambdaPolicy:
    return LambdaPolicy("sweep", grid=tuple(grid))


@dataclass(frozen=True)
class SolverConfig:
    """Solver hyperparameters.

    ``local_iters`` (r) and ``personal_iters`` (s) count mini-batch steps;
    ``None`` means one pass over the local training data. ``batch_size``
    ``None`` is full batch. ``eta_personal`` defaults to ``eta_global``.

    Step schedules:

    * ``constant``: the two fixed rates.
    * ``decaying``: personal rate ``2 / ((t+1)(mu+lam) p_k)`` and global rate
      ``2 / ((t+1) mu)`` at round ``t``.
    * ``inverse_smoothness``: personal ``1 / (L_k + lam)``, global ``1 / L_k``
      with ``L_k`` the gradient Lipschitz constant of the device's loss. For
      isotropic quadratics a single full-batch step is an exact solve.

    ``tol`` enables early stopping once both the global model and every
    personalized model move by at most ``tol`` in a round.
    """

    rounds: int = 100
    sample_fraction: float = 1.0
    local_iters: int | None = None
    personal_iters: int | None = None
    eta_global: float = 0.1
    eta_personal: float | None = None
    schedule: str = "constant"
    mu: float = 1.0
    batch_size: int | None = None
    lambda_policy: LambdaPolicy = field(default_factory=LambdaPolicy)
    tol: float | None = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must be in (0, 1]")
        for name in ("local_iters", "personal_iters", "batch_size"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.eta_global > 0:
            raise ValueError("eta_global must be > 0")
        if self.eta_personal is not None and not self.eta_personal > 0:
            raise ValueError("eta_personal must be > 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown step schedule {self.schedule!r}")
        if self.schedule == "decaying" and not self.mu > 0:
            raise ValueError("decaying schedule needs mu > 0")

    @property
    def personal_rate(self) -> float:
        return self.eta_global if self.eta_personal is None else self.eta_personal

    def num_selected(self, K: int) -> int:
        return max(1, min(K, math.ceil(self.sample_fraction * K - 1e-12)))


@dataclass
class DittoState:
    round: int
    w: np.ndarray
    V: np.ndarray  # (L, K, d)
    lambdas: np.ndarray  # (L,)
    history: list[dict] = field(default_factory=list)
    converged: bool = False


@dataclass
class RunResult:
    global_model: np.ndarray
    personal: np.ndarray  # (L, K, d); for baselines L = 1
    lambdas: tuple[float, ...]
    chosen: np.ndarray | None  # per-device lambda under the dynamic policy
    history: list[dict]
    rounds_run: int

    def models(self, lam: float | None = None) -> np.ndarray:
        """Per-device models for one lambda row; the dynamic choice when ``lam`` is None."""
        if lam is None:
            if self.chosen is not None:
                idx = [self.lambdas.index(float(c)) for c in self.chosen]
                return np.stack([self.personal[i, k] for k, i in enumerate(idx)])
            if len(self.lambdas) != 1:
                raise ValueError("several lambdas were solved; pick one")
            return self.personal[0]
        return self.personal[self.lambdas.index(float(lam))]


# step helpers -----------------------------------------------------------------


def _steps_per_epoch(n: int, batch_size: int | None) -> int:
    if batch_size is None or batch_size >= n:
        return 1
    return math.ceil(n / batch_size)


def batch_plan(n: int, batch_size: int | None, steps: int, rng_factory) -> list:
    """Index arrays for ``steps`` mini-batch steps, reshuffled every epoch.

    ``rng_factory`` is only called when a shuffle is needed, so full-batch
    runs never touch a random stream.
    """
    if batch_size is None or batch_size >= n:
        return [None] * steps
    rng = rng_factory()
    per_epoch = math.ceil(n / batch_size)
    plan: list = []
    while len(plan) < steps:
        perm = rng.permutation(n)
        take = min(per_epoch, steps - len(plan))
        plan.extend(perm[i * batch_size:(i + 1) * batch_size] for i in range(take))
    return plan


def _global_rate(config: SolverConfig, t: int, L_k: float) -> float:
    if config.schedule == "decaying":
        return 2.0 / ((t + 1) * config.mu)
    if config.schedule == "inverse_smoothness":
        return 1.0 / L_k
    return config.eta_global


def _personal_rates(config: SolverConfig, t: int, lambdas, L_k: float, p_k: float) -> np.ndarray:
    if config.schedule == "decaying":
        return 2.0 / ((t + 1) * (config.mu + lambdas) * p_k)
    if config.schedule == "inverse_smoothness":
        return 1.0 / (L_k + lambdas)
    return np.full(lambdas.shape, config.personal_rate)


def local_sgd(task: LossKind, data, w, steps: int, eta: float, plan) -> np.ndarray:
    """Run ``steps`` SGD steps on the local loss from ``w``; return the delta."""
    wk = np.array(w, dtype=np.float64)
    for idx in plan[:steps]:
        wk -= eta * grad(task, wk, data, idx)
    return wk - w


def personal_steps(task: LossKind, data, V, w, lambdas, etas, plan) -> np.ndarray:
    """Steps of ``v <- v - eta (grad F(v) + lam (v - w))`` for a stack of models."""
    V = np.array(V, dtype=np.float64)
    if task.kind == "point_estimation":
        # elementwise gradient, so stacking cannot change the arithmetic
        lam = lambdas[:, None]
        eta = etas[:, None]
        for idx in plan:
            V -= eta * (grad(task, V, data, idx) + lam * (V - w))
        return V
    # row by row: a stacked matmul may sum in a different order, and a sweep
    # must reproduce the corresponding single-lambda runs bit for bit
    plan = list(plan)
    for j in range(V.shape[0]):
        v, lam, eta = V[j], lambdas[j], etas[j]
        for idx in plan:
            v -= eta * (grad(task, v, data, idx) + lam * (v - w))
    return V


def sample_devices(K: int, m: int, seed: int, t: int) -> np.ndarray:
    if m >= K:
        return np.arange(K)
    return np.sort(derive_rng(seed, "select", t).choice(K, size=m, replace=False))


# one round ---------------------------------------------------------------------


def device_update(
    task: LossKind,
    device,
    w: np.ndarray,
    t: int,
    num_selected: int,
    attack: AttackSpec,
    config: SolverConfig,
    seed: int,
) -> RoundUpdate:
    """The bytes a device sends to the server: a function of (w, local data, seed) only."""
    data = device.train
    honest = loss(task, w, data)
    reported = attack.reported_loss if (device.byzantine and attack.lie_about_loss) else honest
    if device.byzantine and attack.kind == "random_update":
        return random_update(
            w.shape[0], attack.sigma_attack, derive_rng(seed, "attack", t, device.id), device.id, reported
        )
    r = config.local_iters or _steps_per_epoch(len(data), config.batch_size)
    plan = batch_plan(len(data), config.batch_size, r, lambda: derive_rng(seed, "local", t, device.id))
    L_k = smoothness(task, data) if config.schedule == "inverse_smoothness" else 1.0
    delta = local_sgd(task, data, w, r, _global_rate(config, t, L_k), plan)
    if device.byzantine and attack.kind == "model_replacement":
        delta = scale_replacement(delta, num_selected, attack.boost)
    return RoundUpdate(device.id, delta, reported)


def personalize_device(task, device, v_stack, w, t, lambdas, p_k, config, seed) -> np.ndarray:
    data = device.train
    s = config.personal_iters or _steps_per_epoch(len(data), config.batch_size)
    plan = batch_plan(len(data), config.batch_size, s, lambda: derive_rng(seed, "personal", t, device.id))
    L_k = smoothness(task, data) if config.schedule == "inverse_smoothness" else 1.0
    etas = _personal_rates(config, t, lambdas, L_k, p_k)
    return personal_steps(task, data, v_stack, w, lambdas, etas, plan)


def ditto_round(
    state: DittoState,
    population: Population,
    attack: AttackSpec,
    aggregator: AggregatorSpec,
    config: SolverConfig,
    seed: int,
    task: LossKind,
    personalize: bool = True,
    update_global: bool = True,
) -> DittoState:
    """Advance ``state`` by one round in place and return it."""
    t = state.round
    K = population.K
    m = config.num_selected(K)
    selected = sample_devices(K, m, seed, t)
    p_k = m / K
    w = state.w
    updates = []
    max_move = 0.0
    for k in selected:
        dev = population.devices[k]
        if update_global:
            up = device_update(task, dev, w, t, m, attack, config, seed)
            if not np.isfinite(up.delta).all():
                raise DivergenceError(t, dev.id, "update")
            updates.append(up)
        if personalize:
            new_v = personalize_device(task, dev, state.V[:, k], w, t, state.lambdas, p_k, config, seed)
            if not np.isfinite(new_v).all():
                raise DivergenceError(t, dev.id, "personalized model")
            if config.tol is not None:
                max_move = max(max_move, float(np.max(np.abs(new_v - state.V[:, k]))))
            state.V[:, k] = new_v
    record = {"round": t, "selected": int(m)}
    if update_global:
        fraction = population.K_a / K
        step = aggregate(aggregator, updates, fraction)
        w_next = w + step
        if not np.isfinite(w_next).all():
            raise DivergenceError(t, None, "global model")
        move = float(np.linalg.norm(step))
        record.update(
            mean_loss=sum(u.train_loss for u in updates) / len(updates),
            mean_norm=sum(u.norm for u in updates) / len(updates),
            global_step=move,
        )
        state.w = w_next
    else:
        move = 0.0
    state.history.append(record)
    if config.tol is not None:
        state.converged = move <= config.tol and max_move <= config.tol
    state.round = t + 1
    return state


# runs ----------------------------------------------------------------------------


def _init_state(population: Population, lambdas) -> DittoState:
    d = population.dim
    lam = np.asarray(lambdas, dtype=np.float64)
    return DittoState(0, np.zeros(d), np.zeros((lam.shape[0], population.K, d)), lam)


def _loop(state, population, attack, aggregator, config, seed, task, callback, **kw):
    for _ in range(config.rounds):
        ditto_round(state, population, attack, aggregator, config, seed, task, **kw)
        if callback is not None:
            callback(state)
        if state.converged:
            break
    return state


def select_lambda(validation, candidates, strong_attack: bool, train_fn, task: LossKind) -> float:
    """Pick a device's lambda from its validation data.

    Too few validation points: a fixed fallback (small under strong attacks).
    Otherwise the candidate whose model ``train_fn(lam)`` scores best on the
    validation split; ties go to the smaller lambda.
    """
    if len(validation) < MIN_VALIDATION:
        return STRONG_FALLBACK if strong_attack else WEAK_FALLBACK
    best_lam, best_score = None, None
    for lam in sorted(candidates):
        model = train_fn(lam)
        if task.is_classifier:
            score = -accuracy(task, model, validation)
        else:
            score = loss(task, model, validation)
        if best_score is None or score < best_score:
            best_lam, best_score = lam, score
    return float(best_lam)


def _choose(population, result_lambdas, V, policy: LambdaPolicy, task) -> np.ndarray | None:
    if policy.kind != "dynamic":
        return None
    lams = list(result_lambdas)
    chosen = []
    for k, dev in enumerate(population.devices):
        lam = select_lambda(
            dev.validation,
            policy.candidates,
            policy.strong_attack,
            lambda l, k=k: V[lams.index(l), k],
            task,
        )
        chosen.append(lam)
    return np.asarray(chosen)


def _with_fallback(lambdas, policy: LambdaPolicy) -> tuple[float, ...]:
    if policy.kind == "dynamic" and policy.fallback not in lambdas:
        return tuple(lambdas) + (policy.fallback,)
    return tuple(lambdas)


def run_joint(
    population: Population,
    attack: AttackSpec,
    aggregator: AggregatorSpec,
    config: SolverConfig,
    seed: int,
    task: LossKind,
    callback=None,
) -> RunResult:
    """Joint optimization of the global model and all personalized models."""
    pop = poison_population(population, attack, task, seed)
    lambdas = _with_fallback(config.lambda_policy.values(), config.lambda_policy)
    state = _init_state(pop, lambdas)
    _loop(state, pop, attack, aggregator, config, seed, task, callback)
    chosen = _choose(pop, lambdas, state.V, config.lambda_policy, task)
    return RunResult(state.w, state.V, lambdas, chosen, state.history, state.round)


def run_global_phase(population, attack, aggregator, config, seed, task, callback=None) -> DittoState:
    pop = poison_population(population, attack, task, seed)
    state = _init_state(pop, (0.0,))
    return _loop(state, pop, attack, aggregator, config, seed, task, callback, personalize=False)


def run_global_only(population, attack, aggregator, config, seed, task) -> RunResult:
    state = run_global_phase(population, attack, aggregator, config, seed, task)
    models = np.broadcast_to(state.w, (1, population.K, population.dim)).copy()
    return RunResult(state.w, models, (math.inf,), None, state.history, state.round)


def run_local_only(population, attack, config, seed, task) -> RunResult:
    """Local training only: the personalized recursion at lambda 0, no server."""
    pop = poison_population(population, attack, task, seed)
    state = _init_state(pop, (0.0,))
    _loop(state, pop, attack, AggregatorSpec(), config, seed, task, None, update_global=False)
    return RunResult(state.w, state.V, (0.0,), None, state.history, state.round)


def run_finetune(
    population: Population,
    attack: AttackSpec,
    aggregator: AggregatorSpec,
    config: SolverConfig,
    seed: int,
    task: LossKind,
    finetune_epochs: int = 1,
) -> RunResult:
    """Train the global model to completion, then solve each device's personalized objective from it."""
    if finetune_epochs < 0:
        raise ValueError("finetune_epochs must be >= 0")
    pop = poison_population(population, attack, task, seed)
    gstate = _init_state(pop, (0.0,))
    _loop(gstate, pop, attack, aggregator, config, seed, task, None, personalize=False)
    w = gstate.w
    lambdas = _with_fallback(config.lambda_policy.values(), config.lambda_policy)
    lam = np.asarray(lambdas)
    V = np.broadcast_to(w, (lam.shape[0], pop.K, pop.dim)).copy()
    for k, dev in enumerate(pop.devices):
        data = dev.train
        per_epoch = _steps_per_epoch(len(data), config.batch_size)
        L_k = smoothness(task, data) if config.schedule == "inverse_smoothness" else 1.0
        v = V[:, k]
        for e in range(finetune_epochs):
            plan = batch_plan(
                len(data), config.batch_size, per_epoch, lambda e=e: derive_rng(seed, "finetune", e, dev.id)
            )
            for j, idx in enumerate(plan):
                step_index = e * per_epoch + j
                etas = _personal_rates(config, step_index, lam, L_k, 1.0)
                v = personal_steps(task, data, v, w, lam, etas, [idx])
        if not np.isfinite(v).all():
            raise DivergenceError(gstate.round, dev.id, "finetuned model")
        V[:, k] = v
    chosen = _choose(pop, lambdas, V, config.lambda_policy, task)
    return RunResult(w, V, lambdas, chosen, gstate.history, gstate.round)


def run_fedavg_ditto(population, config: SolverConfig, seed: int, task: LossKind, callback=None) -> RunResult:
    """Ditto with plain FedAvg as the global solver, written out directly (no attacks)."""
    lambdas = np.asarray(config.lambda_policy.values(), dtype=np.float64)
    K, d = population.K, population.dim
    m = config.num_selected(K)
    w = np.zeros(d)
    V = np.zeros((lambdas.shape[0], K, d))
    history = []
    t = 0
    for t in range(config.rounds):
        selected = sample_devices(K, m, seed, t)
        deltas = []
        for k in selected:
            dev = population.devices[k]
            data = dev.train
            r = config.local_iters or _steps_per_epoch(len(data), config.batch_size)
            plan = batch_plan(len(data), config.batch_size, r, lambda: derive_rng(seed, "local", t, dev.id))
            L_k = smoothness(task, data) if config.schedule == "inverse_smoothness" else 1.0
            wk = w.copy()
            for idx in plan:
                wk -= _global_rate(config, t, L_k) * grad(task, wk, data, idx)
            V[:, k] = personalize_device(task, dev, V[:, k], w, t, lambdas, m / K, config, seed)
            deltas.append(wk - w)
        w = w + np.stack(deltas).sum(axis=0) / len(deltas)
        history.append({"round": t, "selected": int(m)})
        if callback is not None:
            callback(t, w, V)
    return RunResult(w, V, tuple(lambdas.tolist()), None, history, t + 1)
