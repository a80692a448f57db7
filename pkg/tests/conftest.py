from __future__ import annotations

import numpy as np
import pytest

from opsaddle.linear import FeatureMaps, LinearProblem, compute_constants, onehot_features, probe_policies, random_features
from opsaddle.mdp import BehaviorDistribution, TabularMdp, TransitionData, random_behavior, random_mdp, random_policy


def central_diff(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    out = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1e-12, float(np.max(np.abs(b)))))


def scalar_instance():
    """One pair, one state: K_w = K_Q = M = 1 (gamma = 0), u_R = 1, u_nu = 1."""
    mdp = TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), 0.0, np.ones(1))
    data = TransitionData.exact(mdp, BehaviorDistribution(np.ones(1)))
    return mdp, data, onehot_features(1, 1)


def random_instance(seed, S=3, A=2, gamma=0.6, lam=0.5, dim=None, onehot=False):
    """Random MDP, behavior and policy with one-hot or random features, exact data law."""
    rng = np.random.default_rng(seed)
    mdp = random_mdp(S, A, gamma, int(rng.integers(1 << 30)))
    behavior = random_behavior(S, A, rng)
    policy = random_policy(S, A, rng)
    if onehot:
        features = onehot_features(S, A)
    else:
        d = dim or max(1, S * A - 1)
        features = random_features(S, A, d, d, int(rng.integers(1 << 30)))
    problem = LinearProblem(TransitionData.exact(mdp, behavior), features, gamma, lam, lam)
    return mdp, behavior, policy, problem


def constants_for(problem, policy, count=8, seed=0, zeta_ball="R_zeta"):
    S, A = problem.n_states, problem.n_actions
    return compute_constants(problem, probe_policies(S, A, count, seed, include=(policy,)), zeta_ball=zeta_ball)


def spread_features(n, shift=0.0):
    """Unit vectors at evenly spaced angles; ``K = I/2`` under a uniform law on ``n >= 2`` rows."""
    ang = np.pi * (np.arange(n) + shift) / n
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


CONTRACT_SHAPES = ((3, 2), (2, 2), (2, 3), (4, 1), (3, 1))
CONTRACT_GAMMAS = (0.5, 0.6, 0.4, 0.5, 0.3)
CONTRACT_LAMBDAS = (4.0, 5.0, 4.0, 3.0, 4.0)


def contract_instance(i):
    """Strongly regularized instances with two-dimensional spread features.

    Large ``lambda`` and well-conditioned ``K`` keep the admissible extragradient
    rate high enough for theorem-sized budgets to run in seconds.
    """
    rng = np.random.default_rng(100 + i)
    S, A = CONTRACT_SHAPES[i]
    mdp = random_mdp(S, A, CONTRACT_GAMMAS[i], seed=10 + i)
    n = S * A
    F = FeatureMaps(spread_features(n), spread_features(n, 0.5)[rng.permutation(n)])
    lam = CONTRACT_LAMBDAS[i]
    problem = LinearProblem(TransitionData.exact(mdp, BehaviorDistribution.uniform(S, A)), F, mdp.gamma, lam, lam)
    policy = random_policy(S, A, rng)
    constants = compute_constants(problem, probe_policies(S, A, 8, i, include=(policy,)))
    return problem, policy, constants


@pytest.fixture
def scalar():
    return scalar_instance()


@pytest.fixture
def inst3():
    return random_instance(11)


__all__ = ["FeatureMaps", "central_diff", "rel_err", "scalar_instance", "random_instance", "constants_for",
           "spread_features", "contract_instance"]


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
