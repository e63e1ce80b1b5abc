import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dittofl.aggregate import AggregatorSpec
from dittofl.attacks import NO_ATTACK, AttackSpec
from dittofl.core import DivergenceError, LocalDataset
from dittofl.datagen import LinRegSpec, PointEstimationSpec, ThetaPolicy, gen_linear_regression, gen_point_estimation
from dittofl.ditto import (
    STRONG_CANDIDATES,
    WEAK_CANDIDATES,
    Dynamic,
    Fixed,
    LambdaPolicy,
    SolverConfig,
    Sweep,
    personal_steps,
    run_fedavg_ditto,
    run_finetune,
    run_global_only,
    run_global_phase,
    run_joint,
    run_local_only,
    select_lambda,
)
from dittofl.models import LinReg, Logistic, PointEstimation, grad, local_minimizer, loss
from dittofl.oracle import personalized_minimizer_pe

PE = PointEstimation()
MEAN = AggregatorSpec()


def pe_pop(K=6, n=12, seed=0, **kw):
    return gen_point_estimation(PointEstimationSpec(K=K, n=n, sigma=1.0, tau=0.7, split=(1, 0, 0), **kw), seed)


def lr_pop(K=6, seed=0, **kw):
    spec = dict(K=K, n=40, d=3, sigma=0.5, tau=0.5, beta=29.0, theta=ThetaPolicy("fixed", 1.0))
    spec.update(kw)
    return gen_linear_regression(LinRegSpec(**spec), seed)


def test_single_personal_step_by_hand():
    data = LocalDataset(np.array([[1.0]]), np.zeros(1))  # F(v) = 1/2 (v - 1)^2
    out = personal_steps(PE, data, np.array([[0.0]]), np.array([2.0]), np.array([1.0]), np.array([0.1]), [None])
    assert out[0, 0] == pytest.approx(0.3, abs=1e-15)


def test_lambda_zero_step_is_a_local_sgd_step():
    pop = lr_pop()
    data = pop.devices[0].train
    v = np.array([[0.3, -0.2, 0.9]])
    out = personal_steps(LinReg(), data, v, np.full(3, 50.0), np.array([0.0]), np.array([0.05]), [None])
    np.testing.assert_array_equal(out[0], v[0] - 0.05 * grad(LinReg(), v[0], data))


@pytest.mark.parametrize(
    "cfg",
    [
        SolverConfig(rounds=30, eta_global=0.3, lambda_policy=Fixed(0.5)),
        SolverConfig(rounds=30, eta_global=0.3, sample_fraction=0.5, batch_size=4, local_iters=3,
                     personal_iters=3, lambda_policy=Sweep([0.1, 2.0])),
        SolverConfig(rounds=40, schedule="decaying", sample_fraction=0.4, batch_size=1, local_iters=1,
                     personal_iters=1, lambda_policy=Fixed(1.0)),
    ],
)
def test_fedavg_specialization_is_trajectory_identical(cfg):
    pop = lr_pop()
    ws = []
    a = run_joint(pop, NO_ATTACK, MEAN, cfg, 11, LinReg(), callback=lambda s: ws.append(s.w.copy()))
    ws2 = []
    b = run_fedavg_ditto(pop, cfg, 11, LinReg(), callback=lambda t, w, V: ws2.append(w.copy()))
    np.testing.assert_array_equal(np.stack(ws), np.stack(ws2))
    np.testing.assert_array_equal(a.personal, b.personal)


def test_sweep_is_concatenation_of_single_runs():
    pop = lr_pop()
    base = SolverConfig(rounds=15, eta_global=0.3, sample_fraction=0.5, batch_size=5)
    grid = [0.0, 0.3, 3.0]
    swept = run_joint(pop, NO_ATTACK, MEAN, SolverConfig(**{**base.__dict__, "lambda_policy": Sweep(grid)}), 5, LinReg())
    for lam in grid:
        single = run_joint(pop, NO_ATTACK, MEAN, SolverConfig(**{**base.__dict__, "lambda_policy": Fixed(lam)}), 5, LinReg())
        np.testing.assert_array_equal(swept.models(lam), single.models())
        np.testing.assert_array_equal(swept.global_model, single.global_model)


def test_global_trajectory_never_reads_personal_models():
    pop = lr_pop(K_a=2)
    attack = AttackSpec("model_replacement", 2 / 6)
    cfg = SolverConfig(rounds=12, eta_global=0.2, sample_fraction=0.6, batch_size=7, lambda_policy=Fixed(0.7))
    a, b = [], []
    run_joint(pop, attack, MEAN, cfg, 3, LinReg(), callback=lambda s: a.append(s.w.copy()))
    run_global_phase(pop, attack, MEAN, cfg, 3, LinReg(), callback=lambda s: b.append(s.w.copy()))
    np.testing.assert_array_equal(np.stack(a), np.stack(b))


def test_unselected_devices_keep_their_personal_model():
    pop = pe_pop(K=10)
    cfg = SolverConfig(rounds=8, eta_global=0.5, sample_fraction=0.3, lambda_policy=Fixed(1.0))
    prev = [np.zeros((1, 10, 1))]
    moved_ok = []

    def cb(state):
        changed = np.any(state.V != prev[-1], axis=(0, 2))
        selected = state.history[-1]["selected"]
        moved_ok.append(changed.sum() <= selected)
        prev.append(state.V.copy())

    run_joint(pop, NO_ATTACK, MEAN, cfg, 2, PE, callback=cb)
    assert all(moved_ok)


def test_converges_to_closed_form_pe():
    pop = pe_pop()
    cfg = SolverConfig(rounds=5000, eta_global=0.5, lambda_policy=Fixed(0.8), tol=1e-12)
    res = run_joint(pop, NO_ATTACK, MEAN, cfg, 0, PE)
    w_hat = np.stack([d.train.features.mean(axis=0) for d in pop.devices])
    target = personalized_minimizer_pe(0.8, w_hat.mean(axis=0), w_hat)
    assert res.rounds_run < 5000
    assert np.max(np.abs(res.models() - target)) <= 1e-6


def test_reduction_limits():
    pop = lr_pop()
    cfg = SolverConfig(rounds=300, schedule="inverse_smoothness", lambda_policy=Sweep([0.0, 1e6]))
    res = run_joint(pop, NO_ATTACK, MEAN, cfg, 1, LinReg())
    local = np.stack([local_minimizer(LinReg(), d.train) for d in pop.devices])
    assert np.max(np.abs(res.models(0.0) - local)) <= 1e-6
    assert np.max(np.abs(res.models(1e6) - res.global_model)) <= 1e-3


def test_finetune_edge_cases():
    pop = lr_pop()
    cfg = SolverConfig(rounds=50, schedule="inverse_smoothness", lambda_policy=Fixed(0.0))
    zero = run_finetune(pop, NO_ATTACK, MEAN, cfg, 1, LinReg(), finetune_epochs=0)
    np.testing.assert_array_equal(zero.models(), np.broadcast_to(zero.global_model, zero.models().shape))
    local = np.stack([local_minimizer(LinReg(), d.train) for d in pop.devices])
    tuned = run_finetune(pop, NO_ATTACK, MEAN, cfg, 1, LinReg(), finetune_epochs=200)
    assert np.max(np.abs(tuned.models() - local)) <= 1e-8


def test_lambda_monotonicity_along_grid():
    pop = lr_pop(K=5)
    grid = [0.0, 0.1, 0.5, 1.0, 3.0, 10.0, 100.0]
    res = run_joint(pop, NO_ATTACK, MEAN, SolverConfig(rounds=200, schedule="inverse_smoothness",
                                                      lambda_policy=Sweep(grid)), 4, LinReg())
    for k, dev in enumerate(pop.devices):
        losses = [loss(LinReg(), res.models(l)[k], dev.train) for l in grid]
        dists = [np.linalg.norm(res.models(l)[k] - res.global_model) for l in grid]
        assert all(b >= a - 1e-10 for a, b in zip(losses, losses[1:]))
        assert all(b <= a + 1e-10 for a, b in zip(dists, dists[1:]))


def test_select_lambda_rules():
    small = LocalDataset(np.ones((3, 1)), np.zeros(3))
    assert select_lambda(small, STRONG_CANDIDATES, True, None, LinReg()) == 0.1
    assert select_lambda(small, WEAK_CANDIDATES, False, None, LinReg()) == 1.0
    rng = np.random.default_rng(0)
    val = LocalDataset(rng.standard_normal((10, 1)), rng.standard_normal(10))
    models = {0.1: np.array([5.0]), 1.0: np.array([0.0]), 2.0: np.array([0.0])}
    # 1 and 2 tie on validation loss, the smaller wins
    assert select_lambda(val, WEAK_CANDIDATES, False, models.__getitem__, LinReg()) == 1.0
    cls = LocalDataset(np.array([[1.0]] * 6), np.array([1.0] * 6))
    acc_models = {0.05: np.array([-1.0]), 0.1: np.array([1.0]), 0.2: np.array([1.0])}
    assert select_lambda(cls, STRONG_CANDIDATES, True, acc_models.__getitem__, Logistic()) == 0.1


def test_dynamic_policy_picks_from_candidates():
    pop = lr_pop(K=8, n=100)
    res = run_joint(pop, NO_ATTACK, MEAN, SolverConfig(rounds=5, schedule="inverse_smoothness",
                                                      lambda_policy=Dynamic(False)), 0, LinReg())
    assert set(res.chosen.tolist()) <= set(WEAK_CANDIDATES)
    assert res.models().shape == (8, 3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_the_round():
    with pytest.raises(DivergenceError, match="round"):
        run_joint(pe_pop(), NO_ATTACK, MEAN, SolverConfig(rounds=5000, eta_global=5.0, lambda_policy=Fixed(1.0)), 0, PE)


def test_model_replacement_displaces_global_by_malicious_delta():
    # benign devices sit exactly at the global optimum, so their deltas vanish
    spec = PointEstimationSpec(K=5, n=4, sigma=0.0, tau=0.0, K_a=1, tau_a=2.0, split=(1, 0, 0))
    pop = gen_point_estimation(spec, 8)
    attack = AttackSpec("model_replacement", 0.2, poison_data=False)
    cfg = SolverConfig(rounds=1, eta_global=0.5, lambda_policy=Fixed(1.0))
    res = run_global_only(pop, attack, MEAN, cfg, 0, PE)
    bad = int(np.flatnonzero(pop.byzantine_mask)[0])
    delta_mal = -0.5 * (0.0 - pop.devices[bad].train.features.mean(axis=0))
    assert np.max(np.abs(res.global_model - delta_mal)) <= 1e-12


def test_local_baseline_ignores_update_attacks():
    pop = lr_pop(K_a=2)
    cfg = SolverConfig(rounds=20, eta_global=0.3, sample_fraction=0.5, batch_size=5)
    clean = run_local_only(pop, NO_ATTACK, cfg, 1, LinReg()).models()
    benign = pop.benign_mask
    for attack in (AttackSpec("random_update", 2 / 6), AttackSpec("model_replacement", 2 / 6, poison_data=False)):
        attacked = run_local_only(pop, attack, cfg, 1, LinReg()).models()
        np.testing.assert_array_equal(attacked[benign], clean[benign])


def test_local_only_matches_joint_at_lambda_zero():
    pop = lr_pop()
    cfg = SolverConfig(rounds=10, eta_global=0.2, sample_fraction=0.5, batch_size=4, lambda_policy=Fixed(0.0))
    np.testing.assert_array_equal(
        run_local_only(pop, NO_ATTACK, cfg, 6, LinReg()).models(),
        run_joint(pop, NO_ATTACK, MEAN, cfg, 6, LinReg()).models(),
    )


def test_runs_are_deterministic():
    pop = lr_pop(K_a=2)
    attack = AttackSpec("random_update", 2 / 6)
    cfg = SolverConfig(rounds=10, eta_global=0.2, sample_fraction=0.5, batch_size=4, lambda_policy=Fixed(0.5))
    a = run_joint(pop, attack, AggregatorSpec("median"), cfg, 9, LinReg())
    b = run_joint(pop, attack, AggregatorSpec("median"), cfg, 9, LinReg())
    np.testing.assert_array_equal(a.personal, b.personal)
    np.testing.assert_array_equal(a.global_model, b.global_model)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 1.0), st.integers(1, 20))
def test_sampling_size(frac, K):
    cfg = SolverConfig(sample_fraction=frac)
    m = cfg.num_selected(K)
    assert m == min(K, max(1, int(np.ceil(frac * K - 1e-12))))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(rounds=0)
    with pytest.raises(ValueError):
        SolverConfig(sample_fraction=0.0)
    with pytest.raises(ValueError):
        SolverConfig(schedule="cosine")
    with pytest.raises(ValueError):
        LambdaPolicy("sweep", grid=())
    with pytest.raises(ValueError):
        Fixed(-1.0)
