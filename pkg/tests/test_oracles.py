from __future__ import annotations

import math

import numpy as np
import pytest

from opsaddle.errors import InvalidInputError
from opsaddle.lagrangian import SaddleIterate, closed_form_saddle, grad_zeta_xi
from opsaddle.linear import DerivedMatrices, LinearProblem
from opsaddle.mdp import SoftmaxPolicy
from opsaddle.oracles import (
    LsqConfig,
    OracleContract,
    SvrebConfig,
    _category_tables,
    compare_oracles,
    least_square_oracle,
    oracle_budget,
    saddle_target,
    svreb,
    svreb_batch,
    svreb_noise_floor,
    svreb_rate,
    theorem_step_sizes,
)
from opsaddle.samples import _categories

from conftest import constants_for, contract_instance, random_instance, scalar_instance


def _scalar_problem():
    _, data, F = scalar_instance()
    problem = LinearProblem(data, F, 0.0, 1.0, 1.0)
    pol = SoftmaxPolicy.uniform(1, 1)
    return problem, pol, constants_for(problem, pol, count=0)


def test_contract_validation_and_bound():
    assert OracleContract(0.5, 0.1).bound(2.0) == pytest.approx(0.6)
    with pytest.raises(InvalidInputError):
        OracleContract(1.0, 0.1)
    with pytest.raises(InvalidInputError):
        OracleContract(0.5, -1.0)


def test_closed_form_unit_instance():
    dm = DerivedMatrices(np.eye(1), np.eye(1), np.eye(1), np.ones(1), np.zeros(1))
    z, x = closed_form_saddle(dm, 1.0, 1.0, 0.0)
    assert (z[0], x[0]) == pytest.approx((0.5, 0.5))
    zero = DerivedMatrices(np.eye(2), np.eye(2), np.eye(2), np.zeros(2), np.zeros(2))
    z, x = closed_form_saddle(zero, 1.0, 1.0, 0.5)
    assert np.all(z == 0) and np.all(x == 0)


def test_lsq_exact_scalar_by_hand():
    # K = M = u_R = u_nu = 1, gamma = 0, lambda = 1: 2 zeta = 2 and 2 xi = 0
    problem, pol, C = _scalar_problem()
    res = least_square_oracle(problem, pol, C, LsqConfig(None))
    assert (res.iterate.zeta[0], res.iterate.xi[0]) == pytest.approx((1.0, 0.0), abs=1e-15)
    assert res.samples == 0


def test_lsq_exact_residual():
    for seed in range(5):
        _, _, policy, problem = random_instance(seed, dim=4)
        C = constants_for(problem, policy)
        it = least_square_oracle(problem, policy, C, LsqConfig(None)).iterate
        gz, gx = grad_zeta_xi(problem.derived(policy), it.zeta, it.xi, problem.lambda_w, problem.lambda_q,
                              problem.gamma)
        assert np.linalg.norm(gz) + np.linalg.norm(gx) <= 1e-8


def test_lsq_empirical_two_budget_decay():
    _, _, policy, problem = random_instance(20, onehot=True, lam=1.0)
    C = constants_for(problem, policy)
    star = saddle_target(problem, policy)

    def rms(n):
        return math.sqrt(np.mean([least_square_oracle(problem, policy, C, LsqConfig(n), s).iterate.distance2(star)
                                  for s in range(30)]))

    small, large = rms(100_000), rms(400_000)
    assert small <= 5 * large
    assert 1.2 <= small / large <= 3.5


def test_lsq_deterministic_and_counts_samples():
    _, _, policy, problem = random_instance(21, dim=4)
    C = constants_for(problem, policy)
    a = least_square_oracle(problem, policy, C, LsqConfig(5000), 3)
    b = least_square_oracle(problem, policy, C, LsqConfig(5000), 3)
    assert np.array_equal(a.iterate.zeta, b.iterate.zeta) and a.samples == 5000


def test_svreb_sample_count_and_validation():
    assert SvrebConfig(0, 0.1, 0.1, 7).samples() == 0
    assert SvrebConfig(1, 0.1, 0.1, 7).samples() == 14
    assert SvrebConfig(5, 0.1, 0.1, 7).samples() == 7 * 18
    with pytest.raises(InvalidInputError):
        SvrebConfig(1, 0.0, 0.1, 1)
    problem, pol, C = _scalar_problem()
    ez, ex = theorem_step_sizes(C)
    with pytest.raises(InvalidInputError, match="exceed"):
        svreb(problem, pol, C, SvrebConfig(2, 2 * ez, ex, 1), SaddleIterate([0.0], [0.0]), 0)


def test_svreb_stays_at_saddle_without_noise():
    # one outcome and one start pair: every batch equals the data law
    problem, pol, C = _scalar_problem()
    ez, ex = theorem_step_sizes(C)
    star = saddle_target(problem, pol)
    res = svreb(problem, pol, C, SvrebConfig(50, ez, ex, 3), star, 0)
    assert res.iterate.distance2(star) <= 1e-18


def _reference_extragradient(F, w0, step, K):
    """Anchored extragradient with exact operators, written out step by step."""
    cur = np.array(w0, dtype=float)
    g0 = F(cur)
    prev, cur = cur, cur + step * g0
    m = g0
    for _ in range(K - 1):
        g = m + (F(cur) - F(prev))
        half = cur + step * g
        gh = m + (F(half) - F(prev))
        new = cur + step * gh
        m = F(cur)
        prev, cur = cur, new
    return cur


def test_svreb_hand_rolled_steps():
    problem, pol, C = _scalar_problem()
    eta = theorem_step_sizes(C)[0]

    def F(w):
        z, x = w
        return np.array([1 - x - z, -(1 - z + x)])

    # first step by hand: from the origin the field is (1, -1) in ascent/descent form
    one = svreb(problem, pol, C, SvrebConfig(1, eta, eta, 1), SaddleIterate([0.0], [0.0]), 0).iterate
    assert (one.zeta[0], one.xi[0]) == pytest.approx((eta, -eta), abs=1e-17)
    for K in (2, 5):
        it = svreb(problem, pol, C, SvrebConfig(K, eta, eta, 1), SaddleIterate([0.0], [0.0]), 0).iterate
        ref = _reference_extragradient(F, [0.0, 0.0], eta, K)
        np.testing.assert_allclose([it.zeta[0], it.xi[0]], ref, atol=1e-15)


def test_svreb_batch_matches_single_runs():
    problem, policy, C = contract_instance(1)
    cfg = SvrebConfig(30, *theorem_step_sizes(C), 50)
    init = SaddleIterate(np.zeros(2), np.zeros(2))
    batch = svreb_batch(problem, policy, C, cfg, [init] * 3, [4, 5, 6])
    for it, s in zip(batch, [4, 5, 6]):
        single = svreb(problem, policy, C, cfg, init, s).iterate
        np.testing.assert_array_equal(it.zeta, single.zeta)


def test_batch_operators_are_unbiased():
    _, _, policy, problem = random_instance(22, S=2, A=2, dim=3)
    Az, Ax, bz, bx = _category_tables(problem)
    (_, _, _, _, _, p), (_, _, p0) = _categories(problem.data, policy)
    dm = problem.derived(policy)
    lw, lq, g = problem.lambda_w, problem.lambda_q, problem.gamma
    Jz = (p @ Az).reshape(3, 6)
    Jx = (p @ Ax).reshape(3, 6)
    np.testing.assert_allclose(Jz, np.hstack([-lw * dm.K_w, -dm.M]), atol=1e-14)
    np.testing.assert_allclose(Jx, np.hstack([-dm.M.T, lq * dm.K_Q]), atol=1e-14)
    np.testing.assert_allclose(p @ bz, dm.u_R, atol=1e-14)
    np.testing.assert_allclose(p0 @ bx, (1 - g) * dm.u_nu, atol=1e-14)


def test_svreb_monte_carlo_theorem_bound():
    problem, policy, C = contract_instance(0)
    ez, ex = theorem_step_sizes(C)
    rho = svreb_rate(C, ez, ex)
    K = math.ceil(math.log(1e-3) / math.log1p(-rho))
    cfg = SvrebConfig(K, ez, ex, 10 ** 6)
    star = saddle_target(problem, policy)
    init = SaddleIterate(np.full(2, C.zeta_radius / 2), np.full(2, -C.xi_radius / 2))
    _, hist = svreb_batch(problem, policy, C, cfg, [init] * 30, list(range(30)), target=star)
    bound = 2.01 * (1 - rho) ** K * init.distance2(star) + svreb_noise_floor(C, ez, ex, cfg.batch_size)
    assert hist[-1].mean() <= 2 * bound


def test_oracle_budget_scalings():
    _, _, C = contract_instance(2)
    a, b = oracle_budget(0.5, 1e-3, C), oracle_budget(0.5, 5e-4, C)
    assert 1.99 <= b.batch_size / a.batch_size <= 2.01
    Ks = [oracle_budget(beta, 1e-12, C).K for beta in (1e-2, 1e-4, 1e-6)]
    assert abs((Ks[2] - Ks[1]) - (Ks[1] - Ks[0])) <= 1 and Ks[2] > Ks[1] > Ks[0]
    with pytest.raises(InvalidInputError):
        oracle_budget(1.0, 1e-3, C)
    with pytest.raises(InvalidInputError):
        oracle_budget(0.5, 0.0, C)
    assert oracle_budget(0.0, 1e-3, C, "least_square", lsq_multiplier=2.0).n_all == 2 * 4 * 1000


def test_compare_oracles_deterministic():
    _, _, policy, problem = random_instance(23, onehot=True, lam=1.0)
    C = constants_for(problem, policy)
    run = lambda: compare_oracles(problem, policy, C, [2000], [0, 1], timer=lambda: 0.0)
    a, b = run(), run()
    assert a == b
    assert [r.oracle for r in a] == ["least_square", "svreb"]
    assert all(r.wall_ms == 0.0 for r in a)
