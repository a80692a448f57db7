"""The regularized objective in matrix form, its gradients and best responses.

For a fixed policy

    L(zeta, xi) = (1-gamma) u_nu.xi + zeta.u_R - zeta.M xi
                  + (lambda_Q/2) xi.K_Q xi - (lambda_w/2) zeta.K_w zeta,

maximized over ``zeta`` and minimized over ``xi``.  The library always works
with ``L`` itself; the projected descent method negates it in one place.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import InvalidInputError, NumericalFailure
from .linear import DerivedMatrices, FeatureMaps, LinearProblem, batch_derived
from .mdp import SoftmaxPolicy, lift, policy_transition
from .samples import SampleSet, SampleTuple, TransitionBatch


class GradientTriple(NamedTuple):
    g_theta: np.ndarray
    g_zeta: np.ndarray
    g_xi: np.ndarray


@dataclass(frozen=True)
class SaddleIterate:
    zeta: np.ndarray
    xi: np.ndarray
    z_radius: float = np.inf
    xi_radius: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "zeta", np.asarray(self.zeta, dtype=float))
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))

    def distance2(self, other: "SaddleIterate") -> float:
        return float(np.sum((self.zeta - other.zeta) ** 2) + np.sum((self.xi - other.xi) ** 2))


def _check_dims(dm: DerivedMatrices, zeta: np.ndarray, xi: np.ndarray) -> None:
    if zeta.shape != dm.u_R.shape or xi.shape != dm.u_nu.shape:
        raise InvalidInputError(
            f"dimension mismatch: zeta {zeta.shape} vs {dm.u_R.shape}, xi {xi.shape} vs {dm.u_nu.shape}")


def loss(dm: DerivedMatrices, zeta, xi, lambda_w: float, lambda_q: float, gamma: float) -> float:
    zeta, xi = np.asarray(zeta, dtype=float), np.asarray(xi, dtype=float)
    _check_dims(dm, zeta, xi)
    return float((1 - gamma) * dm.u_nu @ xi + zeta @ dm.u_R - zeta @ dm.M @ xi
                 + 0.5 * lambda_q * xi @ dm.K_Q @ xi - 0.5 * lambda_w * zeta @ dm.K_w @ zeta)


def grad_zeta_xi(dm: DerivedMatrices, zeta, xi, lambda_w: float, lambda_q: float,
                 gamma: float) -> tuple[np.ndarray, np.ndarray]:
    g_zeta = dm.u_R - dm.M @ xi - lambda_w * (dm.K_w @ zeta)
    g_xi = (1 - gamma) * dm.u_nu - dm.M.T @ zeta + lambda_q * (dm.K_Q @ xi)
    return g_zeta, g_xi


def _score_apply(policy: SoftmaxPolicy, table: np.ndarray) -> np.ndarray:
    """``sum_{s,a} T(s,a) grad log pi(a|s)`` for a table of weights already multiplied in."""
    T = table.reshape(policy.n_states, policy.n_actions)
    return (T - policy.probs * T.sum(axis=1, keepdims=True)).reshape(-1)


def _grad_theta(policy: SoftmaxPolicy, features: FeatureMaps, zeta, xi, start_weight: np.ndarray,
                next_weight: np.ndarray, gamma: float) -> np.ndarray:
    """Theta gradient from start weights and ``w_zeta``-weighted next-pair weights."""
    Q = features.phi_q @ xi
    return (1 - gamma) * _score_apply(policy, start_weight * Q) + gamma * _score_apply(policy, next_weight * Q)


def grad_exact(problem: LinearProblem, policy: SoftmaxPolicy, zeta, xi,
               derived: DerivedMatrices | None = None) -> GradientTriple:
    """Exact gradients under the data law; the theta part enumerates support and actions."""
    zeta, xi = np.asarray(zeta, dtype=float), np.asarray(xi, dtype=float)
    dm = problem.derived(policy) if derived is None else derived
    _check_dims(dm, zeta, xi)
    g_zeta, g_xi = grad_zeta_xi(dm, zeta, xi, problem.lambda_w, problem.lambda_q, problem.gamma)
    data = problem.data
    w = problem.features.phi_w @ zeta
    next_weight = (data.d * w) @ policy_transition(data.transitions, policy)
    g_theta = _grad_theta(policy, problem.features, zeta, xi, lift(data.nu, policy), next_weight, problem.gamma)
    return GradientTriple(g_theta, g_zeta, g_xi)


def grad_sample(t: SampleTuple, policy: SoftmaxPolicy, zeta, xi, lambda_w: float, lambda_q: float,
                gamma: float, features: FeatureMaps) -> GradientTriple:
    """Single-sample estimators, term by term."""
    A = policy.n_actions
    fw = features.phi_w[t.s * A + t.a]
    fq = features.phi_q[t.s * A + t.a]
    fq_next = features.phi_q[t.s_next * A + t.a_next]
    fq0 = features.phi_q[t.s0 * A + t.a0]
    w_sa = fw @ zeta
    q_sa, q_next, q0 = fq @ xi, fq_next @ xi, fq0 @ xi
    g_theta = ((1 - gamma) * q0 * policy.score(t.s0, t.a0)
               + gamma * w_sa * q_next * policy.score(t.s_next, t.a_next))
    g_zeta = (t.r + gamma * q_next - q_sa) * fw - lambda_w * w_sa * fw
    g_xi = (1 - gamma) * fq0 + w_sa * (gamma * fq_next - fq) + lambda_q * q_sa * fq
    return GradientTriple(g_theta, g_zeta, g_xi)


def _as_sample_set(batch) -> SampleSet:
    if isinstance(batch, SampleSet):
        return batch
    batch = list(batch)
    if not batch:
        raise InvalidInputError("empty batch")
    return SampleSet.from_tuples(batch)


def grad_batch(batch: SampleSet | Sequence[SampleTuple], problem: LinearProblem, policy: SoftmaxPolicy,
               zeta, xi) -> GradientTriple:
    """Weighted mean of the single-sample estimators over ``batch``.

    The zeta/xi parts are affine in the parameters, so the mean is computed
    from the batch-averaged matrices; the theta part aggregates weights
    per pair.  Both reductions run in a fixed order.
    """
    samples = _as_sample_set(batch)
    zeta, xi = np.asarray(zeta, dtype=float), np.asarray(xi, dtype=float)
    A = problem.n_actions
    dm = batch_derived(samples, problem.features, A, problem.gamma)
    _check_dims(dm, zeta, xi)
    g_zeta, g_xi = grad_zeta_xi(dm, zeta, xi, problem.lambda_w, problem.lambda_q, problem.gamma)
    n = problem.features.n_pairs
    start = np.bincount(samples.s0 * A + samples.a0, weights=samples.weight0, minlength=n)
    w = problem.features.phi_w[samples.s * A + samples.a] @ zeta
    nxt = np.bincount(samples.s_next * A + samples.a_next, weights=samples.weight * w, minlength=n)
    g_theta = _grad_theta(policy, problem.features, zeta, xi, start, nxt, problem.gamma)
    return GradientTriple(g_theta, g_zeta, g_xi)


def transition_batch_derived(batch: TransitionBatch, problem: LinearProblem,
                             policy: SoftmaxPolicy) -> tuple[DerivedMatrices, np.ndarray, np.ndarray]:
    """Derived matrices of ``batch`` under ``policy``, plus its pair-by-next-state mass and start pairs."""
    data, F = problem.data, problem.features
    S, A, n = data.n_states, data.n_actions, F.n_pairs
    pair = data.pair
    d = np.bincount(pair, weights=batch.weight, minlength=n)
    reward = np.bincount(pair, weights=batch.weight * data.r, minlength=n)
    T = np.bincount(pair * S + data.s_next, weights=batch.weight, minlength=n * S).reshape(n, S)
    pi_q = np.einsum("sa,sak->sk", policy.probs, F.phi_q.reshape(S, A, -1))
    start = lift(batch.weight0, policy)
    Pw, Pq = F.phi_w, F.phi_q
    dPw = d[:, None] * Pw
    dm = DerivedMatrices(Pw.T @ dPw, Pq.T @ (d[:, None] * Pq),
                         dPw.T @ Pq - problem.gamma * (Pw.T @ (T @ pi_q)),
                         Pw.T @ reward, Pq.T @ start, "batch")
    return dm, T, start


def grad_transition_batch(batch: TransitionBatch, problem: LinearProblem, policy: SoftmaxPolicy,
                          zeta, xi) -> GradientTriple:
    """Batch-mean gradients with the policy's actions integrated out exactly."""
    zeta, xi = np.asarray(zeta, dtype=float), np.asarray(xi, dtype=float)
    dm, T, start = transition_batch_derived(batch, problem, policy)
    _check_dims(dm, zeta, xi)
    g_zeta, g_xi = grad_zeta_xi(dm, zeta, xi, problem.lambda_w, problem.lambda_q, problem.gamma)
    w = problem.features.phi_w @ zeta
    nxt = lift(w @ T, policy)
    g_theta = _grad_theta(policy, problem.features, zeta, xi, start, nxt, problem.gamma)
    return GradientTriple(g_theta, g_zeta, g_xi)


def _solve(A: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    try:
        x = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"singular {what}") from exc
    if not np.all(np.isfinite(x)):
        raise NumericalFailure(f"non-finite solution for {what}")
    return x


def best_response_xi(dm: DerivedMatrices, zeta, lambda_q: float, gamma: float) -> np.ndarray:
    """Unconstrained minimizer over xi: ``K_Q^{-1}(M^T zeta - (1-gamma) u_nu) / lambda_Q``."""
    return _solve(dm.K_Q, dm.M.T @ np.asarray(zeta, dtype=float) - (1 - gamma) * dm.u_nu, "K_Q") / lambda_q


def best_response_zeta(dm: DerivedMatrices, xi, lambda_w: float) -> np.ndarray:
    """Unconstrained maximizer over zeta: ``K_w^{-1}(u_R - M xi) / lambda_w``."""
    return _solve(dm.K_w, dm.u_R - dm.M @ np.asarray(xi, dtype=float), "K_w") / lambda_w


def closed_form_saddle(dm: DerivedMatrices, lambda_w: float, lambda_q: float,
                       gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Saddle point from the two Schur-complement systems.

    zeta* solves ``(lw lq K_w + M K_Q^{-1} M^T) zeta = lq u_R + (1-gamma) M K_Q^{-1} u_nu`` and
    xi* solves ``(lw lq K_Q + M^T K_w^{-1} M) xi = M^T K_w^{-1} u_R - (1-gamma) lw u_nu``.
    """
    KQ_inv_MT = _solve(dm.K_Q, dm.M.T, "K_Q")
    KQ_inv_u = _solve(dm.K_Q, dm.u_nu, "K_Q")
    Kw_inv_M = _solve(dm.K_w, dm.M, "K_w")
    Kw_inv_u = _solve(dm.K_w, dm.u_R, "K_w")
    zeta = _solve(lambda_w * lambda_q * dm.K_w + dm.M @ KQ_inv_MT,
                  lambda_q * dm.u_R + (1 - gamma) * dm.M @ KQ_inv_u, "zeta system")
    xi = _solve(lambda_w * lambda_q * dm.K_Q + dm.M.T @ Kw_inv_M,
                dm.M.T @ Kw_inv_u - (1 - gamma) * lambda_w * dm.u_nu, "xi system")
    return zeta, xi


def xi_from_zeta_star(dm: DerivedMatrices, zeta_star, lambda_q: float, gamma: float) -> np.ndarray:
    """The second form of xi*: the best response evaluated at zeta*."""
    return best_response_xi(dm, zeta_star, lambda_q, gamma)


def kkt_saddle(dm: DerivedMatrices, lambda_w: float, lambda_q: float,
               gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Saddle point from the joint block-linear stationarity system."""
    dz = dm.u_R.size
    top = np.hstack([lambda_w * dm.K_w, dm.M])
    bottom = np.hstack([-dm.M.T, lambda_q * dm.K_Q])
    rhs = np.concatenate([dm.u_R, -(1 - gamma) * dm.u_nu])
    sol = _solve(np.vstack([top, bottom]), rhs, "KKT system")
    return sol[:dz], sol[dz:]


def project_ball(x, radius: float) -> np.ndarray:
    """Euclidean projection onto ``{||x|| <= radius}``."""
    if radius <= 0:
        raise InvalidInputError("radius must be positive")
    x = np.asarray(x, dtype=float)
    norm = float(np.linalg.norm(x))
    if norm <= radius:
        return x.copy()
    return x * (radius / norm)


class Envelope(NamedTuple):
    value: float
    grad_zeta: np.ndarray
    xi: np.ndarray
    projected: bool


def ball_argmin_quadratic(H: np.ndarray, b: np.ndarray, radius: float) -> tuple[np.ndarray, bool]:
    """Minimizer of ``x.H x / 2 + b.x`` over ``{||x|| <= radius}`` for positive definite ``H``.

    When the unconstrained minimizer lies outside the ball the solution is
    ``-(H + nu I)^{-1} b`` with the multiplier ``nu > 0`` fixing the norm at
    ``radius``; ``nu`` is found by bracketing on the eigenbasis of ``H``.
    """
    evals, evecs = np.linalg.eigh(0.5 * (H + H.T))
    if evals[0] <= 0:
        raise NumericalFailure("quadratic is not positive definite")
    c = evecs.T @ np.asarray(b, dtype=float)
    x = -evecs @ (c / evals)
    if not np.isfinite(radius) or np.linalg.norm(x) <= radius:
        return x, False

    def excess(nu):
        return float(np.linalg.norm(c / (evals + nu))) - radius

    hi = max(float(np.linalg.norm(c)) / radius, 1.0)
    while excess(hi) > 0:
        hi *= 2
    nu = brentq(excess, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    x = -evecs @ (c / (evals + nu))
    return x * min(1.0, radius / float(np.linalg.norm(x))), True


def constrained_best_response_xi(dm: DerivedMatrices, zeta, lambda_q: float, gamma: float,
                                 xi_radius: float = np.inf) -> tuple[np.ndarray, bool]:
    """Minimizer over the xi ball and whether the ball constraint is active."""
    zeta = np.asarray(zeta, dtype=float)
    return ball_argmin_quadratic(lambda_q * dm.K_Q, (1 - gamma) * dm.u_nu - dm.M.T @ zeta, xi_radius)


def envelope_gradient(dm: DerivedMatrices, zeta, lambda_w: float, lambda_q: float, gamma: float,
                      xi_radius: float = np.inf) -> Envelope:
    """``Phi(zeta) = min_xi L`` over the xi ball and its Danskin gradient ``grad_zeta L(zeta, xi(zeta))``.

    ``projected`` reports whether the ball constraint binds at the minimizer.
    """
    zeta = np.asarray(zeta, dtype=float)
    xi, projected = constrained_best_response_xi(dm, zeta, lambda_q, gamma, xi_radius)
    value = loss(dm, zeta, xi, lambda_w, lambda_q, gamma)
    g_zeta = dm.u_R - dm.M @ xi - lambda_w * (dm.K_w @ zeta)
    return Envelope(value, g_zeta, xi, projected)


def envelope_full_gradient(problem: LinearProblem, policy: SoftmaxPolicy, zeta,
                           xi_radius: float = np.inf) -> tuple[np.ndarray, np.ndarray, Envelope]:
    """``(grad_theta Phi, grad_zeta Phi, envelope)`` of ``Phi(theta, zeta) = min_xi L``."""
    dm = problem.derived(policy)
    env = envelope_gradient(dm, zeta, problem.lambda_w, problem.lambda_q, problem.gamma, xi_radius)
    g = grad_exact(problem, policy, zeta, env.xi, dm)
    return g.g_theta, env.grad_zeta, env


class SaddleGradient(NamedTuple):
    grad_theta: np.ndarray
    zeta: np.ndarray
    xi: np.ndarray
    value: float


def saddle_value_gradient(problem: LinearProblem, policy: SoftmaxPolicy) -> SaddleGradient:
    """Value and theta gradient of ``max_zeta min_xi L`` at ``policy`` (Danskin at the saddle)."""
    dm = problem.derived(policy)
    zeta, xi = closed_form_saddle(dm, problem.lambda_w, problem.lambda_q, problem.gamma)
    g = grad_exact(problem, policy, zeta, xi, dm)
    return SaddleGradient(g.g_theta, zeta, xi, loss(dm, zeta, xi, problem.lambda_w, problem.lambda_q, problem.gamma))


def constrained_saddle(dm: DerivedMatrices, lambda_w: float, lambda_q: float, gamma: float,
                       zeta_radius: float = np.inf, xi_radius: float = np.inf, *,
                       tol: float = 1e-13, max_iter: int = 1_000_000) -> tuple[np.ndarray, np.ndarray]:
    """Saddle over the product of balls.

    The unconstrained closed form is returned when it lies in both balls;
    otherwise projected extragradient with the exact operator runs until
    successive iterates agree to ``tol``.
    """
    zeta, xi = closed_form_saddle(dm, lambda_w, lambda_q, gamma)
    if np.linalg.norm(zeta) <= zeta_radius and np.linalg.norm(xi) <= xi_radius:
        return zeta, xi
    dz = zeta.size
    J = np.block([[-lambda_w * dm.K_w, -dm.M], [dm.M.T, -lambda_q * dm.K_Q]])
    b = np.concatenate([dm.u_R, -(1 - gamma) * dm.u_nu])
    step = 0.5 / max(float(np.linalg.norm(J, 2)), 1e-300)

    def proj(w):
        return np.concatenate([project_ball(w[:dz], zeta_radius), project_ball(w[dz:], xi_radius)])

    w = proj(np.concatenate([zeta, xi]))
    for _ in range(max_iter):
        half = proj(w + step * (b + J @ w))
        new = proj(w + step * (b + J @ half))
        if np.linalg.norm(new - w) <= tol * max(1.0, float(np.linalg.norm(w))):
            return new[:dz], new[dz:]
        w = new
    raise NumericalFailure("constrained saddle did not converge")
