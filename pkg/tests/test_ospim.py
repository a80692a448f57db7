from __future__ import annotations

import math

import numpy as np
import pytest

from opsaddle.errors import InvalidInputError
from opsaddle.lagrangian import saddle_value_gradient
from opsaddle.linear import LinearProblem, compute_constants, onehot_features, probe_policies
from opsaddle.mdp import BehaviorDistribution, SoftmaxPolicy, TabularMdp, TransitionData, expected_return, random_mdp
from opsaddle.oracles import LeastSquareOracle, LsqConfig
from opsaddle.ospim import (
    OspimConfig,
    _seed_stream,
    actor_batch_gradient,
    behavior_greedy_policy,
    critic_shift_bound,
    critic_shift_check,
    envelope_range,
    model_mdp,
    ospim_init,
    ospim_step,
    run_ospim,
)
from opsaddle.trace import RunTrace

from conftest import contract_instance

EXACT = LeastSquareOracle(LsqConfig(None))


def _instance(lam=0.5):
    mdp = random_mdp(3, 2, 0.5, seed=7)
    problem = LinearProblem(TransitionData.exact(mdp, BehaviorDistribution.uniform(3, 2)), onehot_features(3, 2),
                            0.5, lam, lam)
    C = compute_constants(problem, probe_policies(3, 2, 16, seed=0))
    return mdp, problem, C


@pytest.fixture(scope="module")
def inst():
    return _instance()


def _config(problem, C, **kw):
    base = dict(T=10, eta_theta=1.0, batch_size_B=200)
    base.update(kw)
    return OspimConfig.from_constants(C, 0.25, envelope_range(problem, C, np.zeros(6)), **base)


def _twin_fresh(problem, state, seed, steps):
    """Recompute the batch gradients of ``steps`` outer steps from a second copy of the seed stream."""
    twin = _seed_stream(np.random.SeedSequence(seed))
    next(twin), next(twin)
    out = []
    for st in state:
        next(twin)
        pol = SoftmaxPolicy(st.theta, problem.n_actions)
        out.append(actor_batch_gradient(problem, pol, st.zeta, st.xi, 200, np.random.default_rng(next(twin))))
    return out[:steps]


@pytest.mark.parametrize("alpha", [1.0, 0.5, 0.2])
def test_momentum_recursion(inst, alpha):
    _, problem, C = inst
    cfg = _config(problem, C, alpha=alpha)
    seeds = _seed_stream(np.random.SeedSequence(3))
    states = [ospim_init(problem, cfg, C, EXACT, seeds)]
    for _ in range(4):
        states.append(ospim_step(states[-1], cfg, problem, C, EXACT, seeds))
    fresh = _twin_fresh(problem, states[1:], 3, 4)
    for prev, new, f in zip(states, states[1:], fresh):
        np.testing.assert_allclose(new.theta, prev.theta + cfg.eta_theta * prev.g_theta, atol=1e-15)
        np.testing.assert_allclose(new.g_theta, (1 - alpha) * prev.g_theta + alpha * f, atol=1e-14)
    # unrolled form: geometric weights on g_0 and on every fresh gradient
    unrolled = (1 - alpha) ** 4 * states[0].g_theta + sum(
        alpha * (1 - alpha) ** (3 - i) * f for i, f in enumerate(fresh))
    np.testing.assert_allclose(states[-1].g_theta, unrolled, atol=1e-13)


def test_frozen_actor_and_exact_critic(inst):
    mdp, problem, C = inst
    theta0 = np.random.default_rng(0).standard_normal(6)
    cfg = _config(problem, C, eta_theta=0.0, T=5)
    theta, trace = run_ospim(problem, cfg, 0, constants=C, mdp=mdp, theta0=theta0, oracle=EXACT)
    assert np.array_equal(theta, theta0)
    assert np.all(trace.column("critic_dist") <= 1e-10)
    assert np.all(trace.column("J_value") == expected_return(mdp, SoftmaxPolicy(theta0, 2)))


def test_frozen_actor_critic_converges_with_extragradient():
    problem, policy, C = contract_instance(0)
    cfg = OspimConfig.from_constants(C, 0.25, 1.0, "svreb", T=15, eta_theta=0.0, batch_size_B=10,
                                     oracle_K=600, oracle_batch=10 ** 7)
    _, trace = run_ospim(problem, cfg, 0, constants=C, theta0=policy.theta)
    dist = trace.column("critic_dist")
    assert dist[-1] <= 1e-2 * dist[0]


def test_zero_steps_and_determinism(inst):
    mdp, problem, C = inst
    cfg = _config(problem, C, T=0)
    theta0 = np.full(6, 0.3)
    theta, trace = run_ospim(problem, cfg, 1, constants=C, mdp=mdp, theta0=theta0)
    assert len(trace) == 1 and np.array_equal(theta, theta0)
    cfg = _config(problem, C, T=6)
    a = run_ospim(problem, cfg, 2, constants=C, mdp=mdp)
    b = run_ospim(problem, cfg, 2, constants=C, mdp=mdp)
    assert a[1].rows == b[1].rows and np.array_equal(a[0], b[0])


def test_sample_accounting(inst):
    mdp, problem, C = inst
    cfg = _config(problem, C, T=7, oracle_n_all=3000)
    _, trace = run_ospim(problem, cfg, 0, constants=C, mdp=mdp)
    assert trace.meta["final_samples"] == cfg.planned_samples() == 8 * (200 + 3000)
    assert list(trace.column("samples")) == [(t + 1) * 3200 for t in range(8)]


def test_saddle_shift_lipschitz_along_run(inst):
    mdp, problem, C = inst
    cfg = _config(problem, C, T=30, eta_theta=2.0)
    _, trace = run_ospim(problem, cfg, 0, constants=C, mdp=mdp, oracle=EXACT)
    shift, move = trace.column("critic_shift2")[1:], trace.column("theta_shift2")[1:]
    assert np.all(move > 0)
    assert np.all(shift <= C.C_zeta_xi * move)


def test_envelope_gradient_smoothness(inst):
    _, problem, C = inst
    rng = np.random.default_rng(4)
    for _ in range(200):
        t1 = rng.standard_normal(6)
        t2 = t1 + rng.standard_normal(6) * 10 ** rng.uniform(-3, 0)
        g1 = saddle_value_gradient(problem, SoftmaxPolicy(t1, 2)).grad_theta
        g2 = saddle_value_gradient(problem, SoftmaxPolicy(t2, 2)).grad_theta
        assert np.linalg.norm(g1 - g2) <= C.L_zeta_xi * np.linalg.norm(t1 - t2)


def test_critic_shift_check_cases(inst):
    _, problem, C = inst
    cfg = _config(problem, C)
    with pytest.raises(InvalidInputError):
        critic_shift_check([], cfg, C)
    tr = RunTrace(("iter", "g_norm", "critic_shift2"))
    for t in range(4):
        tr.append(iter=t, g_norm=1.0, critic_shift2=0.0)
    audit = critic_shift_check([tr, tr], cfg, C)
    assert audit.fraction_ok == 1.0 and audit.measured.size == 3
    bad = RunTrace(("iter", "g_norm", "critic_shift2"))
    for t in range(4):
        bad.append(iter=t, g_norm=0.0, critic_shift2=1e300)
    assert critic_shift_check([bad, bad], cfg, C).fraction_ok == 0.0


def test_critic_shift_bound_by_hand():
    cfg = OspimConfig(T=1, batch_size_B=1, alpha=0.5, beta=0.1, c=0.01, eta_theta=0.5, oracle_kind="least_square",
                      epsilon=0.1, d=2.0)
    got = critic_shift_bound(np.array([1.0, 4.0]), cfg, C=3.0)
    tail = 6 * 0.01 / 0.9
    expect0 = 6 * 0.1 * 4 + 6 * 0.25 * 3 * 1.0 + tail
    expect1 = 6 * 0.01 * 4 + 6 * 0.25 * 3 * (0.1 * 1.0 + 4.0) + tail
    np.testing.assert_allclose(got, [expect0, expect1], rtol=1e-14)


def test_config_validation(inst):
    _, problem, C = inst
    good = _config(problem, C)
    assert 0 <= good.beta <= (1 - good.alpha) ** 2 / 2
    assert good.mixing == pytest.approx(0.5)
    with pytest.raises(InvalidInputError, match="beta"):
        _config(problem, C, beta=0.2)
    with pytest.raises(InvalidInputError):
        _config(problem, C, alpha=0.0)
    with pytest.raises(InvalidInputError, match="unknown"):
        _config(problem, C, bogus=1)
    with pytest.raises(InvalidInputError):
        OspimConfig.from_constants(C, 0.25, 1.0, "sgd")
    with pytest.raises(InvalidInputError):
        _config(problem, C, eta_theta=-1.0)


def test_theorem_schedule_scalings(inst):
    _, problem, C = inst
    a = OspimConfig.from_constants(C, 0.5, 1.0)
    b = OspimConfig.from_constants(C, 0.25, 1.0)
    assert b.batch_size_B / a.batch_size_B == pytest.approx(4, rel=1e-3)
    assert b.c / a.c == pytest.approx(0.25)
    assert b.T >= a.T and b.T / a.T == pytest.approx(4, rel=1e-2)
    assert b.oracle_n_all / a.oracle_n_all == pytest.approx(4, rel=1e-3)


def test_model_mdp_round_trip(inst):
    mdp, problem, _ = inst
    m = model_mdp(problem.data, problem.gamma)
    np.testing.assert_allclose(m.transition, mdp.transition, atol=1e-15)
    np.testing.assert_allclose(m.reward_vector, mdp.reward_vector, atol=1e-15)


def test_behavior_greedy_on_bandit():
    # gamma = 0, one state: greedy is the best arm whatever the behavior
    mdp = TabularMdp(np.ones((1, 3, 1)), np.array([[0.2, 0.9, 0.5]]), 0.0, np.ones(1))
    pol = behavior_greedy_policy(mdp, BehaviorDistribution(np.array([0.7, 0.1, 0.2])))
    assert pol.probs[0].argmax() == 1 and pol.probs[0, 1] > 1 - 1e-12
    assert math.isclose(expected_return(mdp, pol), 0.9, rel_tol=1e-12)
