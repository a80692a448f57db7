"""Bias of the regularized surrogate: exact fixed points, bound terms and measured gaps.

Population quantities use ``Lam = diag(mu)``, ``P^pi`` on pairs and the
lifted start law ``nu0^pi``.  The unconstrained population objective is

    L(w, Q) = (1-gamma) nu0^pi.Q + w.Lam R - w.Lam (I - gamma P^pi) Q
              + (lambda_Q/2) Q.Lam Q - (lambda_w/2) w.Lam w.

At ``lambda = 0`` its saddle is ``(w^pi, Q^pi)`` and its value is
``(1-gamma) J``, so theta gradients of the surrogate are compared with
``grad J`` after dividing by ``1 - gamma``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError
from .lagrangian import constrained_saddle, grad_exact, loss
from .linear import FeatureMaps, LinearProblem, ProblemConstants
from .mdp import (
    BehaviorDistribution,
    SoftmaxPolicy,
    TabularMdp,
    concentrability,
    density_ratio,
    lift,
    policy_gradient,
    policy_transition,
    q_function,
)


class PopulationModel(NamedTuple):
    Lam: np.ndarray
    P: np.ndarray
    R: np.ndarray
    nu: np.ndarray
    gamma: float


def population_model(mdp: TabularMdp, behavior: BehaviorDistribution, policy: SoftmaxPolicy) -> PopulationModel:
    if np.any(behavior.mu <= 0):
        raise InvalidInputError("behavior support must cover every pair for Lam to be invertible")
    return PopulationModel(np.diag(behavior.mu), policy_transition(mdp.transition_matrix, policy),
                           mdp.reward_vector, lift(mdp.nu0, policy), mdp.gamma)


def regularized_fixed_points(mdp: TabularMdp, behavior: BehaviorDistribution, policy: SoftmaxPolicy,
                             lambda_w: float, lambda_q: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form saddle ``(w_L, Q_L)`` of the unconstrained population objective.

    ``w_L = w + (lw lq I + A Lam^-1 A^T Lam)^-1 (lq R - lq lw w)`` and
    ``Q_L = Q - (lw lq I + Lam^-1 A^T Lam A)^-1 (lw lq Q + lw (1-gamma) Lam^-1 nu)``
    with ``A = I - gamma P^pi`` and ``(w, Q) = (w^pi, Q^pi)``.
    """
    m = population_model(mdp, behavior, policy)
    n = m.R.size
    I = np.eye(n)
    A = I - m.gamma * m.P
    Li = np.diag(1.0 / np.diag(m.Lam))
    w_pi = density_ratio(mdp, behavior, policy)
    q_pi = q_function(mdp, policy).reshape(-1)
    lw, lq = lambda_w, lambda_q
    w_L = w_pi + np.linalg.solve(lw * lq * I + A @ Li @ A.T @ m.Lam, lq * m.R - lq * lw * w_pi)
    q_L = q_pi - np.linalg.solve(lw * lq * I + Li @ A.T @ m.Lam @ A,
                                 lw * lq * q_pi + lw * (1 - m.gamma) * Li @ m.nu)
    return w_L, q_L


def q_response(mdp: TabularMdp, behavior: BehaviorDistribution, policy: SoftmaxPolicy, w,
               lambda_q: float) -> np.ndarray:
    """Unconstrained minimizer over ``Q`` for fixed ``w``: ``Lam^-1 (A^T Lam w - (1-gamma) nu) / lambda_Q``."""
    if lambda_q <= 0:
        raise InvalidInputError("lambda_Q must be positive for a unique Q response")
    m = population_model(mdp, behavior, policy)
    A = np.eye(m.R.size) - m.gamma * m.P
    return (A.T @ m.Lam @ np.asarray(w, dtype=float) - (1 - m.gamma) * m.nu) / np.diag(m.Lam) / lambda_q


def kkt_fixed_points(mdp: TabularMdp, behavior: BehaviorDistribution, policy: SoftmaxPolicy,
                     lambda_w: float, lambda_q: float) -> tuple[np.ndarray, np.ndarray]:
    """The same saddle from the joint stationarity system in ``(w, Q)``."""
    m = population_model(mdp, behavior, policy)
    n = m.R.size
    A = np.eye(n) - m.gamma * m.P
    top = np.hstack([lambda_w * m.Lam, m.Lam @ A])
    bottom = np.hstack([-A.T @ m.Lam, lambda_q * m.Lam])
    sol = np.linalg.solve(np.vstack([top, bottom]), np.concatenate([m.Lam @ m.R, -(1 - m.gamma) * m.nu]))
    return sol[:n], sol[n:]


def weighted_norm(x, mu) -> float:
    return float(np.sqrt(np.sum(np.asarray(mu) * np.asarray(x) ** 2)))


class RegBiasRow(NamedTuple):
    lam: float
    w_err: float
    q_err: float
    w_bound: float
    q_bound: float


def reg_bias_bounds(lambda_w: float, lambda_q: float, C: float, gamma: float) -> tuple[float, float]:
    """Bounds on ``||w - w_L||_Lam`` and ``||Q - Q_L||_Lam`` (square roots of the squared bounds)."""
    w2 = C ** 2 * (lambda_q + lambda_q * lambda_w * C) ** 2 / (1 - gamma) ** 4
    q2 = C ** 2 / (1 - gamma) ** 2 * (lambda_w * lambda_q / (1 - gamma) + lambda_w) ** 2
    return math.sqrt(w2), math.sqrt(q2)


def reg_bias_vs_lambda(mdp: TabularMdp, behavior: BehaviorDistribution, policy: SoftmaxPolicy,
                       lambdas: Sequence[float], C: float) -> list[RegBiasRow]:
    """Measured regularization bias of the fixed points against the bounds, with ``lambda_w = lambda_Q``."""
    w_pi = density_ratio(mdp, behavior, policy)
    q_pi = q_function(mdp, policy).reshape(-1)
    rows = []
    for lam in lambdas:
        if lam < 0:
            raise InvalidInputError("lambdas must be non-negative")
        w_L, q_L = regularized_fixed_points(mdp, behavior, policy, lam, lam)
        wb, qb = reg_bias_bounds(lam, lam, C, mdp.gamma)
        rows.append(RegBiasRow(float(lam), weighted_norm(w_pi - w_L, behavior.mu),
                               weighted_norm(q_pi - q_L, behavior.mu), wb, qb))
    return rows


def weighted_residual2(Phi: np.ndarray, target: np.ndarray, mu: np.ndarray) -> float:
    """``min_theta ||Phi theta - target||^2_Lam`` by weighted least squares."""
    s = np.sqrt(mu)
    coef, *_ = np.linalg.lstsq(s[:, None] * Phi, s * target, rcond=None)
    r = Phi @ coef - target
    return float(np.sum(mu * r ** 2))


class Misspecification(NamedTuple):
    eps1: float
    eps2: float
    eps_W: float
    eps_Q: float
    n_policies: int
    n_w_params: int


def eps_w_q(eps1: float, eps2: float, lambda_w: float, lambda_q: float, mu_zeta: float) -> tuple[float, float]:
    lmax = max(lambda_w, lambda_q)
    eps_W = 4 * lmax ** 2 / (lambda_q * lambda_w) * eps1 + 2 * lmax / mu_zeta * eps2
    eps_Q = 8 * lmax ** 3 / (lambda_q ** 2 * lambda_w) * eps1 + (2 + 4 * lmax ** 2 / (lambda_q * mu_zeta)) * eps2
    return float(eps_W), float(eps_Q)


def misspecification(mdp: TabularMdp, behavior: BehaviorDistribution, features: FeatureMaps,
                     policies: Sequence[SoftmaxPolicy], w_params: Sequence[np.ndarray],
                     lambda_w: float, lambda_q: float, mu_zeta: float) -> Misspecification:
    """Probe-based ``eps1``, ``eps2`` and the assembled ``eps_W``, ``eps_Q``.

    ``eps1`` maximizes over ``policies`` the weighted least-squares residual
    of ``w_L`` in the span of ``Phi_w``; ``eps2`` maximizes over policies and
    the weights ``Phi_w zeta`` for ``zeta`` in ``w_params`` the residual of the
    unconstrained Q response in the span of ``Phi_Q``.
    """
    policies, w_params = list(policies), [np.asarray(z, dtype=float) for z in w_params]
    if not policies or not w_params:
        raise InvalidInputError("probe sets must be non-empty")
    mu = behavior.mu
    eps1 = eps2 = 0.0
    for pi in policies:
        w_L, _ = regularized_fixed_points(mdp, behavior, pi, lambda_w, lambda_q)
        eps1 = max(eps1, weighted_residual2(features.phi_w, w_L, mu))
        for z in w_params:
            q = q_response(mdp, behavior, pi, features.phi_w @ z, lambda_q)
            eps2 = max(eps2, weighted_residual2(features.phi_q, q, mu))
    eps_W, eps_Q = eps_w_q(eps1, eps2, lambda_w, lambda_q, mu_zeta)
    return Misspecification(eps1, eps2, eps_W, eps_Q, len(policies), len(w_params))


def bias_terms(G: float, C: float, gamma: float, C_W: float, C_Q: float, lambda_w: float, lambda_q: float,
               kappa_zeta: float, kappa_xi: float, eps_W: float, eps_Q: float,
               eps_data_bar: float) -> tuple[float, float, float]:
    """``(eps_reg, eps_func, eps_data)`` evaluated term by term."""
    if min(G, C, C_W, C_Q, lambda_w, lambda_q, kappa_zeta, kappa_xi, eps_W, eps_Q, eps_data_bar) < 0:
        raise InvalidInputError("bias inputs must be non-negative")
    g1 = 1 - gamma
    sq = math.sqrt
    eps_func = G / g1 * (sq(C * eps_Q) + C_W * sq(gamma * eps_Q * C / g1)
                         + sq(gamma * eps_Q * eps_W * C / g1) + gamma * C_Q * sq(eps_W))
    a = lambda_w * lambda_q / g1 + lambda_w
    b = lambda_q + lambda_q * lambda_w * C
    eps_reg = G / g1 * (C ** 2 / g1 * a + gamma * C * b / g1 ** 3 + C ** 2 * b / g1 ** 3 * a * sq(gamma * C / g1))
    eps_data = (2 * kappa_zeta * kappa_xi + 2 * kappa_zeta + 2 * kappa_xi + sq(2) / 2) * sq(2 * eps_data_bar)
    return float(eps_reg), float(eps_func), float(eps_data)


def bias_bounds(constants: ProblemConstants, C: float, gamma: float, eps_W: float, eps_Q: float,
                eps_data_probe: float) -> tuple[float, float, float]:
    return bias_terms(constants.G, C, gamma, constants.C_W, constants.C_Q, constants.lambda_w,
                      constants.lambda_Q, constants.kappa_zeta, constants.kappa_xi, eps_W, eps_Q, eps_data_probe)


def surrogate_gradient(problem: LinearProblem, policy: SoftmaxPolicy, zeta_radius: float = np.inf,
                       xi_radius: float = np.inf) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``grad_theta max_zeta min_xi L`` over the balls (Danskin at the constrained saddle)."""
    dm = problem.derived(policy)
    zeta, xi = constrained_saddle(dm, problem.lambda_w, problem.lambda_q, problem.gamma, zeta_radius, xi_radius)
    return grad_exact(problem, policy, zeta, xi, dm).g_theta, zeta, xi


def measured_gap(problem: LinearProblem, mdp: TabularMdp, policy: SoftmaxPolicy,
                 constants: ProblemConstants | None = None) -> float:
    """``||grad_theta L^D* / (1-gamma) - grad J||`` at the saddle over the constants' balls."""
    rz = np.inf if constants is None else constants.zeta_radius
    rx = np.inf if constants is None else constants.xi_radius
    g, _, _ = surrogate_gradient(problem, policy, rz, rx)
    return float(np.linalg.norm(g / (1 - problem.gamma) - policy_gradient(mdp, policy)))


class DataProbe(NamedTuple):
    """A probe lower bound on the generalization error, never its supremum."""

    value: float
    max_loss_dev: float
    max_grad_dev2: float
    n_points: int


def _ball_point(rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
    x = rng.standard_normal(dim)
    r = radius * rng.random() ** (1.0 / dim)
    return x * (r / max(np.linalg.norm(x), 1e-300))


def data_deviation_probe(exact: LinearProblem, empirical: LinearProblem, probe_points, *,
                         zeta_radius: float, xi_radius: float, policies: Sequence[SoftmaxPolicy] = (),
                         seed: int = 0) -> DataProbe:
    """Largest observed ``|L - L^D|`` and ``||grad_theta L - grad_theta L^D||^2``.

    ``probe_points`` is either a list of ``(policy, zeta, xi)`` triples or a
    count of random feasible points per policy in ``policies``.  Gradient
    deviations are taken at each probed policy's population saddle, loss
    deviations at the probe points and those saddles.
    """
    if exact.features is not empirical.features and not (
            np.array_equal(exact.features.phi_w, empirical.features.phi_w)
            and np.array_equal(exact.features.phi_q, empirical.features.phi_q)):
        raise InvalidInputError("exact and empirical problems must share features")
    counted = isinstance(probe_points, (int, np.integer))
    if counted:
        if not policies:
            raise InvalidInputError("a probe count needs probe policies")
        rng = np.random.default_rng(seed)
        dz, dx = exact.features.dim_z, exact.features.dim_xi
        points = [(pi, _ball_point(rng, dz, zeta_radius), _ball_point(rng, dx, xi_radius))
                  for pi in policies for _ in range(int(probe_points))]
        saddle_policies = list(policies)
    else:
        points = list(probe_points)
        if not points:
            raise InvalidInputError("no probe points")
        saddle_policies = list({id(pi): pi for pi, _, _ in points}.values())
    lw, lq, g = exact.lambda_w, exact.lambda_q, exact.gamma

    def loss_gap(pi, zeta, xi):
        return abs(loss(exact.derived(pi), zeta, xi, lw, lq, g) - loss(empirical.derived(pi), zeta, xi, lw, lq, g))

    loss_dev = max(loss_gap(*p) for p in points) if points else 0.0
    grad_dev2 = 0.0
    for pi in saddle_policies:
        dm = exact.derived(pi)
        zs, xs = constrained_saddle(dm, lw, lq, g, zeta_radius, xi_radius)
        gt = grad_exact(exact, pi, zs, xs, dm).g_theta - grad_exact(empirical, pi, zs, xs).g_theta
        grad_dev2 = max(grad_dev2, float(gt @ gt))
        if counted:
            loss_dev = max(loss_dev, loss_gap(pi, zs, xs))
    return DataProbe(max(loss_dev, grad_dev2), loss_dev, grad_dev2, len(points))


def formula_transform(mdp: TabularMdp, behavior: BehaviorDistribution, policy: SoftmaxPolicy,
                      f) -> tuple[float, float]:
    """Both sides of ``(1-gamma) E_{nu0,pi}[f] + gamma E_{mu,P,pi}[w^pi f'] = E_mu[w^pi f]``."""
    f = np.asarray(f, dtype=float).reshape(-1)
    w = density_ratio(mdp, behavior, policy)
    P = policy_transition(mdp.transition_matrix, policy)
    nu = lift(mdp.nu0, policy)
    lhs = (1 - mdp.gamma) * nu @ f + mdp.gamma * np.sum(behavior.mu * w * (P @ f))
    return float(lhs), float(np.sum(behavior.mu * w * f))


@dataclass(frozen=True)
class BiasReport:
    eps_reg: float
    eps_func: float
    eps_data_probe: float
    eps1: float
    eps2: float
    eps_W: float
    eps_Q: float
    exact_gap: float
    eps_data_bar_probe: float
    lambda_max: float
    concentrability: float
    n_probe_policies: int
    n_probe_points: int

    @property
    def bound(self) -> float:
        return self.eps_reg + self.eps_func + self.eps_data_probe

    @property
    def slack(self) -> float:
        """``bound - exact_gap``; negative slack is reported, never hidden."""
        return self.bound - self.exact_gap

    def as_dict(self) -> dict:
        out = asdict(self)
        out["bound"] = self.bound
        out["slack"] = self.slack
        return out


def bias_report(exact: LinearProblem, empirical: LinearProblem, mdp: TabularMdp, behavior: BehaviorDistribution,
                policy: SoftmaxPolicy, constants: ProblemConstants, probes: Sequence[SoftmaxPolicy], *,
                n_w_params: int = 8, probe_points: int = 4, C: float | None = None, seed: int = 0) -> BiasReport:
    """Every bias quantity for ``policy``; ``C`` defaults to the concentrability over the probes."""
    probes = list(probes)
    C = concentrability(mdp, behavior, probes + [policy]) if C is None else C
    rng = np.random.default_rng(seed)
    w_params = [_ball_point(rng, exact.features.dim_z, constants.zeta_radius) for _ in range(n_w_params)]
    mis = misspecification(mdp, behavior, exact.features, probes, w_params, exact.lambda_w, exact.lambda_q,
                           constants.mu_zeta)
    probe = data_deviation_probe(exact, empirical, probe_points, zeta_radius=constants.zeta_radius,
                                 xi_radius=constants.xi_radius, policies=probes, seed=seed + 1)
    eps_reg, eps_func, eps_data = bias_bounds(constants, C, mdp.gamma, mis.eps_W, mis.eps_Q, probe.value)
    gap = measured_gap(empirical, mdp, policy, constants)
    return BiasReport(eps_reg, eps_func, eps_data, mis.eps1, mis.eps2, mis.eps_W, mis.eps_Q, gap,
                      probe.value, constants.lambda_max, float(C), len(probes), probe.n_points)
