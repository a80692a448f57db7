from __future__ import annotations

import numpy as np
import pytest

from opsaddle.errors import AssumptionViolation, InvalidInputError
from opsaddle.lagrangian import closed_form_saddle, grad_zeta_xi
from opsaddle.linear import (
    DerivedMatrices,
    FeatureMaps,
    LinearProblem,
    build_derived,
    onehot_features,
    ospim_constants,
    radii,
    random_features,
    raw_variances,
    singular_floors,
    smoothness_constant,
    stochastic_smoothness,
    variance_constants,
)
from opsaddle.mdp import (
    BehaviorDistribution,
    OfflineDataset,
    SoftmaxPolicy,
    TransitionData,
    lift,
    policy_transition,
    random_behavior,
    random_mdp,
    random_policy,
)
from opsaddle.samples import SampleSet

from conftest import constants_for, random_instance, scalar_instance


def _dm(Kw, KQ=None, M=None):
    Kw = np.atleast_2d(Kw)
    KQ = Kw if KQ is None else np.atleast_2d(KQ)
    M = np.eye(Kw.shape[0]) if M is None else np.atleast_2d(M)
    return DerivedMatrices(Kw, KQ, M, np.zeros(Kw.shape[0]), np.zeros(KQ.shape[0]))


def test_build_derived_scalar():
    mdp, data, F = scalar_instance()
    dm = LinearProblem(data, F, 0.0, 1, 1).derived(SoftmaxPolicy.uniform(1, 1))
    for arr in (dm.K_w, dm.K_Q, dm.M, dm.u_R, dm.u_nu):
        np.testing.assert_array_equal(arr, [[1.0]] if arr.ndim == 2 else [1.0])
    assert dm.source == "exact"


def test_build_derived_gamma_zero_ignores_transitions():
    rng = np.random.default_rng(0)
    F = random_features(3, 2, 4, 3, seed=1)
    d = rng.dirichlet(np.ones(6))
    P1, P2 = rng.dirichlet(np.ones(6), size=6), rng.dirichlet(np.ones(6), size=6)
    a = build_derived(F, d, P1, rng.random(6), rng.dirichlet(np.ones(6)), 0.0)
    b = build_derived(F, d, P2, rng.random(6), rng.dirichlet(np.ones(6)), 0.0)
    np.testing.assert_array_equal(a.M, b.M)
    np.testing.assert_allclose(a.M, F.phi_w.T @ np.diag(d) @ F.phi_q, atol=1e-15)


def test_M_matches_triple_loop():
    S, A, gamma = 4, 2, 0.8
    mdp = random_mdp(S, A, gamma, 6)
    rng = np.random.default_rng(6)
    mu = random_behavior(S, A, rng)
    pi = random_policy(S, A, rng)
    F = FeatureMaps(0.7 * np.eye(S * A), 0.9 * np.eye(S * A)[:, ::-1])
    dm = LinearProblem(TransitionData.exact(mdp, mu), F, gamma, 1, 1).derived(pi)
    M = np.zeros((S * A, S * A))
    for s in range(S):
        for a in range(A):
            i = s * A + a
            nxt = np.zeros(S * A)
            for s2 in range(S):
                for a2 in range(A):
                    nxt += mdp.transition[s, a, s2] * pi.probs[s2, a2] * F.phi_q[s2 * A + a2]
            M += mu.mu[i] * np.outer(F.phi_w[i], F.phi_q[i] - gamma * nxt)
    np.testing.assert_allclose(dm.M, M, atol=1e-14)


def test_onehot_K_is_diag_d():
    _, _, policy, problem = random_instance(2, onehot=True)
    dm = problem.derived(policy)
    np.testing.assert_allclose(dm.K_w, np.diag(problem.data.d), atol=1e-15)


def test_derived_invariants_and_M_norm():
    rng = np.random.default_rng(3)
    for seed in range(5):
        _, _, policy, problem = random_instance(seed, dim=4)
        dm = problem.derived(policy)
        for K in (dm.K_w, dm.K_Q):
            assert np.allclose(K, K.T) and np.linalg.eigvalsh(K).min() >= -1e-14
        assert np.linalg.norm(dm.M, 2) <= 1 + problem.gamma + 1e-12
        assert np.linalg.norm(dm.u_R) <= 1 + 1e-12 and np.linalg.norm(dm.u_nu) <= 1 + 1e-12
        for _ in range(200):
            x = rng.standard_normal(4)
            bound = (1 + problem.gamma) * np.linalg.norm(x) + 1e-12
            assert np.linalg.norm(dm.M @ x) <= bound and np.linalg.norm(dm.M.T @ x) <= bound


def test_feature_row_norm_enforced():
    with pytest.raises(InvalidInputError, match="norm"):
        FeatureMaps(np.array([[1.0, 1e-5]]), np.array([[1.0]]))
    FeatureMaps(np.array([[1.0 + 1e-13]]), np.array([[1.0]]))


def test_hessians_and_strong_convexity():
    _, _, policy, problem = random_instance(4, dim=4)
    dm = problem.derived(policy)
    C = constants_for(problem, policy)
    lw, lq, g = problem.lambda_w, problem.lambda_q, problem.gamma
    zeta, xi = np.random.default_rng(0).standard_normal((2, 4))
    H = np.empty((4, 4))
    for j in range(4):
        e = np.eye(4)[j]
        H[:, j] = grad_zeta_xi(dm, zeta, xi + e, lw, lq, g)[1] - grad_zeta_xi(dm, zeta, xi, lw, lq, g)[1]
    np.testing.assert_allclose(H, lq * dm.K_Q, atol=1e-13)
    assert np.linalg.eigvalsh(lq * dm.K_Q).min() >= C.mu_xi - 1e-10
    assert np.linalg.eigvalsh(lw * dm.K_w).min() >= C.mu_zeta - 1e-10


def test_singular_floors_identity_and_diag():
    assert singular_floors(_dm(np.eye(3)))[0] == pytest.approx(1.0)
    assert singular_floors(_dm(np.diag([0.5, 0.1])))[0] == pytest.approx(0.1)


def test_singular_floors_svd_cross_check():
    _, _, policy, problem = random_instance(5, dim=4)
    probes = [policy, SoftmaxPolicy.uniform(3, 2)]
    dms = [problem.derived(p) for p in probes]
    v_w, v_q, v_m = singular_floors(dms)
    import scipy.linalg
    assert v_w == pytest.approx(scipy.linalg.svdvals(dms[0].K_w).min(), abs=1e-10)
    assert v_q == pytest.approx(scipy.linalg.svdvals(dms[0].K_Q).min(), abs=1e-10)
    assert v_m == pytest.approx(min(scipy.linalg.svdvals(d.M).min() for d in dms), abs=1e-10)


def test_singular_floors_violation_names_matrix():
    with pytest.raises(AssumptionViolation, match="K_w") as info:
        singular_floors(_dm(np.diag([1.0, 0.0])))
    assert info.value.assumption == "B" and info.value.exit_code == 3


def test_radii_substitution():
    r = radii(1, 1, 1, 1, 1, 0.0)
    assert r == pytest.approx((1.0, 1.0, 2.0, 16.0))


def test_radii_gamma_to_one():
    r = radii(0.5, 2.0, 0.3, 0.4, 0.2, 1.0 - 1e-12)
    assert r.R_zeta == pytest.approx(2.0 / (0.5 * 2.0 * 0.3 + 0.04), rel=1e-9)


def test_radii_rejects_nonpositive():
    with pytest.raises(InvalidInputError):
        radii(0, 1, 1, 1, 1, 0.5)


def test_radii_contain_saddles_over_fifty_policies():
    _, _, policy, problem = random_instance(7, dim=4)
    rng = np.random.default_rng(7)
    pols = [random_policy(3, 2, rng) for _ in range(50)]
    from opsaddle.linear import compute_constants
    C = compute_constants(problem, pols + [policy])
    for pi in pols:
        z, x = closed_form_saddle(problem.derived(pi), problem.lambda_w, problem.lambda_q, problem.gamma)
        assert np.linalg.norm(z) <= C.R_zeta and np.linalg.norm(x) <= C.R_xi


def test_smoothness_substitution_and_growth():
    assert smoothness_constant(1, 1, 1, 1, 1, 0.0, 1, 1) == 3
    vals = [smoothness_constant(0.1, 0.1, 0.1, 0.1, cq, 0.0, 1, 1) for cq in (10, 20, 40)]
    assert vals[1] - vals[0] == pytest.approx(0.1 * 10) and vals[2] - vals[1] == pytest.approx(0.1 * 20)


def test_smoothness_random_probing():
    _, _, policy, problem = random_instance(8, dim=4)
    C = constants_for(problem, policy)
    from opsaddle.lagrangian import grad_exact
    rng = np.random.default_rng(8)

    def ball(dim, r):
        x = rng.standard_normal(dim)
        return x * r * rng.random() / np.linalg.norm(x)

    worst = 0.0
    for _ in range(1000):
        pts = []
        for _ in range(2):
            th = rng.standard_normal(6)
            pts.append((th, ball(4, C.zeta_radius), ball(4, C.xi_radius)))
        (t1, z1, x1), (t2, z2, x2) = pts
        g1 = grad_exact(problem, SoftmaxPolicy(t1, 2), z1, x1)
        g2 = grad_exact(problem, SoftmaxPolicy(t2, 2), z2, x2)
        num = np.linalg.norm(np.concatenate([a - b for a, b in zip(g1, g2)]))
        den = np.linalg.norm(np.concatenate([t1 - t2, z1 - z2, x1 - x2]))
        worst = max(worst, num / den)
    assert worst <= C.L


def test_stochastic_smoothness_substitution():
    assert stochastic_smoothness(1, 1, 1, 1, 0.0) == (4.0, 4.0)
    assert stochastic_smoothness(1, 1, 1, 1, 1.0)[0] == pytest.approx(10.0)


def test_stochastic_smoothness_random_probe():
    # per-sample operators: ||A_N (w1 - w2)||^2 <= Lbar * <F(w1) - F(w2), w1 - w2> and ||A_N|| <= sqrt form
    _, _, policy, problem = random_instance(9, dim=3)
    C = constants_for(problem, policy)
    dm = problem.derived(policy)
    lw, lq = problem.lambda_w, problem.lambda_q
    J = np.block([[lw * dm.K_w, dm.M], [-dm.M.T, lq * dm.K_Q]])
    rng = np.random.default_rng(9)
    for _ in range(1000):
        d = rng.standard_normal(6)
        assert np.linalg.norm(J @ d) ** 2 <= C.L_bar_zeta * (d @ J @ d) + 1e-12
        assert np.linalg.norm(J @ d) <= np.sqrt(2 * max(lw, lq) ** 2 + 2 * (1 + problem.gamma) ** 2) * np.linalg.norm(d)


def test_ospim_constants_substitution():
    assert ospim_constants(1, 1, 1) == (8.0, 5.0)
    c1, _ = ospim_constants(1.5, 2.5, 1)
    c2, _ = ospim_constants(3.0, 5.0, 1)
    assert c2 < 16 * c1


def test_saddle_shift_lipschitz():
    _, _, policy, problem = random_instance(10, dim=4)
    rng = np.random.default_rng(10)
    C = constants_for(problem, policy)
    lw, lq, g = problem.lambda_w, problem.lambda_q, problem.gamma
    for _ in range(100):
        t1, t2 = rng.standard_normal((2, 6))
        z1, _ = closed_form_saddle(problem.derived(SoftmaxPolicy(t1, 2)), lw, lq, g)
        z2, _ = closed_form_saddle(problem.derived(SoftmaxPolicy(t2, 2)), lw, lq, g)
        assert np.linalg.norm(z1 - z2) <= C.kappa_zeta * (C.kappa_xi + 1) * np.linalg.norm(t1 - t2)


def test_variance_point_mass_is_zero():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = P[1, 0, 0] = 1.0
    ds = OfflineDataset([0], [0], [0.3], [1], 2, 1)
    problem = LinearProblem(TransitionData.from_dataset(ds), onehot_features(2, 1), 0.5, 1, 1)
    sK2, sM2, sR2, _ = raw_variances(problem, SoftmaxPolicy.uniform(2, 1))
    assert sK2 == sM2 == sR2 == 0.0


def test_variance_formulas_homogeneous():
    from opsaddle.linear import combine_variances
    v = combine_variances(0, 0, 0, 0, 3.0, 2.0, 1.4, 0.9, 0.5, 0.5)
    assert v.sigma_theta == v.sigma_zeta == v.sigma_xi == v.sigma == 0


def test_variances_match_enumeration():
    mdp = random_mdp(3, 2, 0.6, 12)
    ds = OfflineDataset(*_draw(mdp, 40, 12), 3, 2)
    data = TransitionData.from_dataset(ds)
    F = random_features(3, 2, 3, 4, 12)
    problem = LinearProblem(data, F, 0.6, 0.5, 0.5)
    pi = random_policy(3, 2, np.random.default_rng(12))
    dm = problem.derived(pi)
    A, g = 2, 0.6
    EM = ER = 0.0
    for i in range(data.n_outcomes):
        s, a, r, sn, p = int(data.s[i]), int(data.a[i]), float(data.r[i]), int(data.s_next[i]), float(data.prob[i])
        for an in range(A):
            w = p * pi.probs[sn, an]
            fw, fq, fqn = F.phi_w[s * A + a], F.phi_q[s * A + a], F.phi_q[sn * A + an]
            EM += w * np.linalg.norm(dm.M - np.outer(fw, fq - g * fqn), 2) ** 2
            ER += w * np.linalg.norm(dm.u_R - r * fw) ** 2
    EKw = sum(p * np.linalg.norm(dm.K_w - np.outer(F.phi_w[k], F.phi_w[k]), 2) ** 2
              for k, p in zip(data.pair, data.prob))
    EKq = sum(p * np.linalg.norm(dm.K_Q - np.outer(F.phi_q[k], F.phi_q[k]), 2) ** 2
              for k, p in zip(data.pair, data.prob))
    nu = lift(data.nu, pi)
    Enu = sum(nu[k] * np.linalg.norm(dm.u_nu - F.phi_q[k]) ** 2 for k in range(6))
    sK2, sM2, sR2, snu2 = raw_variances(problem, pi)
    assert (sK2, sM2, sR2, snu2) == pytest.approx((max(EKw, EKq), EM, ER, Enu), rel=1e-10)
    v = variance_constants(problem, pi, 2.0, 3.0)
    assert v.sigma_zeta ** 2 == pytest.approx(3 * ER + 3 * EM * 9 + 3 * 0.25 * sK2 * 4, rel=1e-12)


def _draw(mdp, n, seed):
    from opsaddle.mdp import sample_dataset
    ds = sample_dataset(mdp, BehaviorDistribution.uniform(mdp.n_states, mdp.n_actions), n, seed)
    return ds.s, ds.a, ds.r, ds.s_next


def test_policy_transition_shape():
    mdp = random_mdp(3, 2, 0.5, 0)
    P = policy_transition(mdp.transition_matrix, SoftmaxPolicy.uniform(3, 2))
    assert P.shape == (6, 6) and np.allclose(P.sum(axis=1), 1)


def test_enumerated_sample_set_reproduces_derived():
    _, _, policy, problem = random_instance(13, dim=3)
    from opsaddle.linear import batch_derived
    a = batch_derived(SampleSet.enumerate(problem.data, policy), problem.features, 2, problem.gamma)
    b = problem.derived(policy)
    for name in ("K_w", "K_Q", "M", "u_R", "u_nu"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), atol=1e-14)
