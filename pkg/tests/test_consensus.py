import math

import numpy as np
import pytest

from eventadmm.consensus import (BoundViolation, ConsensusConfig, ConsensusProblem, _prop1_bound,
                                 ball_drop_bounds, check_prop1_bound, cor1_bound, nonconvex_metrics,
                                 run_consensus, sharing_run)
from eventadmm.events import DropModel, ThresholdSchedule, TriggerPolicy
from eventadmm.harness.data import gen_noniid_regression, local_minimizers
from eventadmm.objectives import QuadraticLocal, Regularizer, reference_solution

from oracles import plain_relaxed_admm, plain_sharing_admm


@pytest.fixture(scope="module")
def lasso():
    locs = gen_noniid_regression(12, 10, 6, seed=3)
    g = Regularizer.l1(0.05)
    return ConsensusProblem(locs, g), reference_solution(locs, g)


#%% reduction to plain ADMM

@pytest.mark.parametrize("alpha", [0.9, 1.0, 1.5])
@pytest.mark.parametrize("g", [Regularizer.zero(), Regularizer.l1(0.05), Regularizer.ball(0.3)])
def test_zero_threshold_equals_plain_admm(alpha, g):
    locs = gen_noniid_regression(8, 10, 5, seed=1)
    tr, clog, _ = run_consensus(ConsensusProblem(locs, g), ConsensusConfig(rho=1.3, alpha=alpha),
                                TriggerPolicy.vanilla(0.0), horizon=40)
    xs, zs, us = plain_relaxed_admm(locs, g, 1.3, alpha, 40)
    assert np.abs(tr.x - xs).max() < 1e-10
    assert np.abs(tr.z - zs).max() < 1e-10
    assert np.abs(tr.u - us).max() < 1e-10
    assert clog.dropped == 0


def test_converges_to_reference(lasso):
    prob, ref = lasso
    tr, _, _ = run_consensus(prob, ConsensusConfig(rho=1.0), TriggerPolicy.vanilla(0.0), horizon=600,
                             reference=ref)
    assert tr.z_err_sq[-1] < 1e-14
    assert tr.f_gap[-1] < 1e-10 * abs(ref.f_star) + 1e-12


#%% events and accounting

def test_vanilla_send_iff_gap_exceeds_threshold(lasso):
    prob, ref = lasso
    delta = 5e-3
    tr, clog, _ = run_consensus(prob, ConsensusConfig(), TriggerPolicy.vanilla(delta), horizon=60)
    assert np.array_equal(tr.sent_mask, tr.gaps > delta)
    assert clog.uploads_sent == tr.sent_mask.sum()


def test_decaying_schedule_is_recorded(lasso):
    prob, _ = lasso
    sched = ThresholdSchedule.power_decay(0.1, 1.0)
    tr, _, _ = run_consensus(prob, ConsensusConfig(), TriggerPolicy.vanilla(sched), horizon=10)
    assert np.allclose(tr.delta_k, 0.1 / np.arange(1, 11))


def test_threshold_saves_messages(lasso):
    prob, ref = lasso
    full = run_consensus(prob, ConsensusConfig(), TriggerPolicy.vanilla(0.0), horizon=50, reference=ref)[1]
    some = run_consensus(prob, ConsensusConfig(), TriggerPolicy.vanilla(1e-2), horizon=50, reference=ref)[1]
    assert some.sent < full.sent


def test_reset_costs_two_messages_per_agent(lasso):
    prob, _ = lasso
    _, clog, _ = run_consensus(prob, ConsensusConfig(T=5), TriggerPolicy.vanilla(1e-3), horizon=20)
    assert clog.reset_messages == 4 * 2 * prob.N


def test_reset_repairs_server_estimate(lasso):
    prob, _ = lasso
    drops = DropModel(0.5, ("up",))
    _, _, world = run_consensus(prob, ConsensusConfig(T=10, seed=2), TriggerPolicy.vanilla(1e-3), drops, 20)
    assert np.allclose(world.server.zeta_hat, world.d_current.mean(axis=0), atol=1e-14)


@pytest.mark.parametrize("T", [1, 5, 10])
def test_server_estimate_bound_under_drops(lasso, T):
    prob, _ = lasso
    tr, _, _ = run_consensus(prob, ConsensusConfig(T=T, seed=T), TriggerPolicy.vanilla(2e-3),
                             DropModel(0.3, ("up", "down")), 80)
    assert np.all(tr.zeta_err <= tr.zeta_bound * (1 + 1e-9) + 1e-12)
    assert np.all(np.isfinite(tr.zeta_bound))


def test_declared_drop_bound_formula():
    assert math.isclose(_prop1_bound(0.2, 10, DropModel(0.3, chi_bar=0.05), 0.0), 0.7)
    assert _prop1_bound(0.2, math.inf, DropModel(0.3), 0.01) == math.inf
    assert _prop1_bound(0.2, 5, DropModel(0.0), 0.0) == 0.2


def test_bound_violation_is_raised():
    check_prop1_bound(0, 0.1, 0.1)
    with pytest.raises(BoundViolation, match="iteration 3"):
        check_prop1_bound(3, 0.2, 0.1)


def test_linear_rate_plus_floor_for_constant_threshold():
    locs = gen_noniid_regression(5, 30, 4, seed=0)
    prob = ConsensusProblem(locs)
    ref = reference_solution(locs, prob.g)
    delta = 1e-3
    tr, _, _ = run_consensus(prob, ConsensusConfig(), TriggerPolicy.vanilla(delta), horizon=400, reference=ref)
    kappa = max(f.L for f in locs) / min(f.m for f in locs)
    k = np.arange(1, 401)
    bound = cor1_bound(k, kappa, 0.0, tr.D0, prob.N, prob.N * delta + delta)
    assert np.all(tr.z_err_sq[200:] <= bound[200:])


def test_determinism_byte_for_byte(lasso, tmp_path):
    prob, ref = lasso
    paths = []
    for name in ("a", "b"):
        tr, _, _ = run_consensus(prob, ConsensusConfig(T=5, seed=11), TriggerPolicy.randomized(1e-3, 0.2),
                                 DropModel(0.2, ("up", "down")), 30, ref)
        paths.append(tmp_path / f"{name}.csv")
        tr.to_csv(paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()
    header = paths[0].read_text().splitlines()[0]
    assert header == "k,f_gap,z_err_sq,V,zeta_err,delta_k,uploads,downloads,drops,resets,load"


@pytest.mark.parametrize("kw", [dict(rho=0.0), dict(alpha=2.0), dict(T=2.5), dict(T=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ConsensusConfig(**kw)


#%% derived quantities

def test_nonconvex_metric_is_running_average(lasso):
    prob, _ = lasso
    tr, _, _ = run_consensus(prob, ConsensusConfig(), TriggerPolicy.vanilla(0.0), horizon=30)
    m = nonconvex_metrics(tr)
    terms = (2 / 3) * tr.residual_sq + tr.grad_sq / (6 * prob.N)
    assert np.isclose(m[9], terms[:10].mean())
    assert m[-1] < m[0]


def test_ball_drop_bounds_use_regularized_minimizers():
    locs = gen_noniid_regression(4, 8, 3, seed=0)
    prob = ConsensusProblem(locs, Regularizer.ball(1.0))
    b = ball_drop_bounds(prob, ConsensusConfig(rho=2.0, alpha=1.5), 1.0)
    x_reg = np.linalg.solve(locs[0].H + 2.0 * np.eye(3), locs[0].h)
    assert np.isclose(b["x_reg"][0], np.linalg.norm(x_reg))
    assert np.isclose(b["d_stated"][0], 2.5 * (2 * (2.0 + locs[0].L) / 2.0 * np.linalg.norm(x_reg) + 2.0))
    assert b["z"] == 2.0


#%% sharing problem

def test_sharing_zero_threshold_matches_plain_sharing():
    locs = gen_noniid_regression(5, 10, 4, seed=2)
    g = Regularizer.quadratic(2.0, 0.3)
    tr, _ = sharing_run(ConsensusProblem(locs, g), ConsensusConfig(rho=1.0), TriggerPolicy.vanilla(0.0),
                        horizon=50)
    assert np.abs(tr.x - plain_sharing_admm(locs, g, 1.0, 50)).max() < 1e-10


def test_sharing_without_coupling_decouples():
    locs = gen_noniid_regression(4, 12, 3, seed=4)
    tr, _ = sharing_run(ConsensusProblem(locs), ConsensusConfig(rho=1.0), TriggerPolicy.vanilla(0.0),
                        horizon=300)
    assert np.abs(tr.h[-1]).max() < 1e-10
    assert np.allclose(tr.x[-1], local_minimizers(locs), atol=1e-8)


def test_sharing_with_stiff_penalty_matches_constrained_solve():
    rng = np.random.default_rng(0)
    locs = [QuadraticLocal(rng.standard_normal((6, 3)), rng.standard_normal(6)) for _ in range(2)]
    c = np.array([1.0, -0.5, 0.25])
    g = Regularizer.quadratic(1e7, c)
    tr, _ = sharing_run(ConsensusProblem(locs, g), ConsensusConfig(rho=5.0), TriggerPolicy.vanilla(0.0),
                        horizon=3000)
    # KKT system of min f_1(x_1) + f_2(x_2) s.t. x_1 + x_2 = c
    H1, H2, n = locs[0].H, locs[1].H, 3
    K = np.block([[H1, np.zeros((n, n)), np.eye(n)], [np.zeros((n, n)), H2, np.eye(n)],
                  [np.eye(n), np.eye(n), np.zeros((n, n))]])
    sol = np.linalg.solve(K, np.concatenate([locs[0].h, locs[1].h, c]))
    assert np.abs(tr.x[-1].ravel() - sol[:2 * n]).max() < 1e-6
