"""Projected SREDA on the negated objective.

With ``x = (theta, zeta)`` and ``L_- = -L`` the problem is
``min_x max_{xi in Xi} L_-(x, xi)`` over the ball ``||zeta|| <= R'``.  The
outer loop descends on ``x`` with a recursive gradient estimate ``v`` that is
refreshed from a large batch every ``q`` steps; after each outer step an
inner loop of projected ascent on ``xi`` carries the recursive estimates
``(v, u)`` along with small batches, following the published SREDA
recursion:

    y_0 = P(xi_k + lambda u_k)
    v <- v + g_x(x_{k+1}, y_j) - g_x(previous point)
    u <- u + g_xi(x_{k+1}, y_j) - g_xi(previous point)
    y_{j+1} = P(y_j + lambda u)

where the first previous point is ``(x_k, xi_k)`` and later ones are the
inner iterates at ``x_{k+1}``.  The loop returns its last point together
with the estimates evaluated there.

Each batch fixes the transition outcomes and start states; the policy's
actions are integrated out exactly wherever the batch is evaluated, so the
two evaluations in a difference share their randomness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError, NumericalFailure
from .lagrangian import (
    constrained_best_response_xi,
    envelope_full_gradient,
    grad_transition_batch,
    grad_zeta_xi,
    loss,
    project_ball,
)
from .linear import LinearProblem, ProblemConstants, loss_bound
from .mdp import SoftmaxPolicy
from .samples import TransitionBatch
from .trace import RunTrace

TRACE_COLUMNS = ("iter", "samples", "eta", "v_norm", "proj_active", "exact_envelope_grad_norm", "loss")
TRACE_EXTRA = ("angle_lhs", "angle_rhs", "angle_ok")
INIT_MODES = ("exact", "stochastic")

_ANGLE_TOL = 1e-12


@dataclass(frozen=True)
class PsredaConfig:
    """Schedule of one run.  ``from_constants`` fills the theorem defaults.

    ``step_eps_coeff`` and ``step_cap_coeff`` are the constants 5 and 10 in
    ``eta_k = min(eps / (5 kappa L ||v||), 1 / (10 kappa L))``.  ``noiseless``
    replaces every batch by the exact data law while still counting its
    nominal size.
    """

    epsilon: float
    K: int
    q: int
    S1: int
    S2: int
    m: int
    lambda_inner: float
    K0: int
    R_prime: float
    R_xi: float
    kappa_xi: float
    L: float
    delta: float = float("nan")
    init_mode: str = "exact"
    noiseless: bool = False
    step_eps_coeff: float = 5.0
    step_cap_coeff: float = 10.0

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise InvalidInputError("epsilon must be < 1" if self.epsilon >= 1 else "epsilon must be positive")
        for name in ("K", "K0"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be non-negative")
        for name in ("q", "S1", "S2", "m"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be at least 1")
        for name in ("lambda_inner", "R_prime", "R_xi", "kappa_xi", "L", "step_eps_coeff", "step_cap_coeff"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.init_mode not in INIT_MODES:
            raise InvalidInputError(f"init_mode must be one of {INIT_MODES}")

    @classmethod
    def from_constants(cls, constants: ProblemConstants, epsilon: float, delta: float,
                       **overrides) -> "PsredaConfig":
        """Theorem defaults for accuracy ``epsilon`` and objective range ``delta``; ``overrides`` pin any field."""
        if not 0 < epsilon < 1:
            raise InvalidInputError("epsilon must be < 1" if epsilon >= 1 else "epsilon must be positive")
        unknown = set(overrides) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidInputError(f"unknown P-SREDA overrides {sorted(unknown)}")
        kx, L = constants.kappa_xi, constants.L
        q = math.ceil(1 / epsilon)
        lam = 1 / (8 * L)
        base = dict(
            epsilon=epsilon, K=math.ceil(50 * kx * L * delta / epsilon ** 2), q=q,
            S1=math.ceil(2250 / 19 * constants.sigma ** 2 * kx ** 2 / epsilon ** 2),
            S2=math.ceil(3687 / 76 * kx * q), m=math.ceil(1024 * kx), lambda_inner=lam,
            K0=_default_k0(constants, lam, epsilon), R_prime=8 * max(constants.R_0, 1.0),
            R_xi=constants.xi_radius, kappa_xi=kx, L=L, delta=delta,
        )
        base.update(overrides)
        return cls(**base)

    def planned_samples(self) -> int:
        """Single-sample gradient evaluations of the outer loop: refresh batches plus inner batches."""
        return math.ceil(self.K / self.q) * self.S1 + self.K * self.m * self.S2

    def step_size(self, v_norm: float) -> float:
        cap = 1 / (self.step_cap_coeff * self.kappa_xi * self.L)
        if v_norm == 0:
            return cap
        return min(self.epsilon / (self.step_eps_coeff * self.kappa_xi * self.L * v_norm), cap)


def _default_k0(constants: ProblemConstants, lam: float, epsilon: float) -> int:
    """Projected-gradient steps taking an error of ``2 R_xi`` below ``eps / (10 kappa L)``."""
    rate = min(constants.mu_xi * lam, 0.5)
    target = epsilon / (10 * constants.kappa_xi * constants.L)
    return max(1, math.ceil(math.log(2 * constants.xi_radius / target) / -math.log1p(-rate)))


def objective_range(problem: LinearProblem, constants: ProblemConstants, theta0, zeta0) -> float:
    """Over-estimate of ``Phi(x_0) - inf Phi`` with ``Phi = max_xi L_-``: exact ``Phi(x_0)`` plus the bound on ``|L|``."""
    policy = SoftmaxPolicy(theta0, problem.n_actions)
    _, _, env = envelope_full_gradient(problem, policy, zeta0, constants.xi_radius)
    return float(-env.value + loss_bound(constants))


@dataclass(frozen=True)
class PsredaState:
    theta: np.ndarray
    zeta: np.ndarray
    xi: np.ndarray
    v_theta: np.ndarray
    v_zeta: np.ndarray
    u: np.ndarray
    k: int = 0
    sample_counter: int = 0

    @property
    def v(self) -> np.ndarray:
        return np.concatenate([self.v_theta, self.v_zeta])

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.theta, self.zeta])


class StepInfo(NamedTuple):
    eta: float
    v_norm: float
    proj_active: bool
    angle_lhs: float
    angle_rhs: float


class _Oracle:
    """Batches and negated gradients for one run."""

    def __init__(self, problem: LinearProblem, config: PsredaConfig, rng: np.random.Generator | None):
        if rng is None and not config.noiseless:
            raise InvalidInputError("a random generator is required unless the run is noiseless")
        self.problem = problem
        self.config = config
        self.rng = rng
        self.n_theta = problem.n_states * problem.n_actions
        self._exact = TransitionBatch.exact(problem.data)

    def batch(self, size: int) -> TransitionBatch:
        if self.config.noiseless:
            return self._exact
        return TransitionBatch.draw(self.problem.data, size, self.rng)

    def grad(self, batch: TransitionBatch, theta, zeta, xi) -> tuple[np.ndarray, np.ndarray]:
        """``(grad_x L_-, grad_xi L_-)`` of the batch."""
        policy = SoftmaxPolicy(theta, self.problem.n_actions)
        g = grad_transition_batch(batch, self.problem, policy, zeta, xi)
        return -np.concatenate([g.g_theta, g.g_zeta]), -g.g_xi

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return x[: self.n_theta], x[self.n_theta:]


def initial_state(problem: LinearProblem, config: PsredaConfig, theta0=None, zeta0=None) -> PsredaState:
    n = problem.n_states * problem.n_actions
    theta = np.zeros(n) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    zeta = np.zeros(problem.features.dim_z) if zeta0 is None else np.asarray(zeta0, dtype=float).copy()
    if np.linalg.norm(zeta) > config.R_prime * (1 + 1e-12):
        raise InvalidInputError("initial zeta lies outside the R' ball")
    dx = problem.features.dim_xi
    return PsredaState(theta, zeta, np.zeros(dx), np.zeros(n), np.zeros(zeta.size), np.zeros(dx))


def psreda_init_xi(state: PsredaState, config: PsredaConfig, problem: LinearProblem,
                   rng: np.random.Generator | None = None) -> tuple[np.ndarray, int]:
    """Inner initial point and the samples it used.

    ``exact`` returns the minimizer of ``L(theta_0, zeta_0, .)`` over the xi
    ball.  ``stochastic`` runs ``K0`` projected gradient steps with fresh
    ``S2`` batches from the origin.
    """
    if config.init_mode == "exact":
        policy = SoftmaxPolicy(state.theta, problem.n_actions)
        xi, _ = constrained_best_response_xi(problem.derived(policy), state.zeta, problem.lambda_q,
                                             problem.gamma, config.R_xi)
        return xi, 0
    oracle = _Oracle(problem, config, rng)
    xi = np.zeros(problem.features.dim_xi)
    for _ in range(config.K0):
        _, u = oracle.grad(oracle.batch(config.S2), state.theta, state.zeta, xi)
        xi = project_ball(xi + config.lambda_inner * u, config.R_xi)
    return xi, config.K0 * config.S2


def concave_maximizer(k: int, m: int, S2: int, x_prev, x_next, xi, u, v, lambda_inner: float,
                      oracle: _Oracle) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``m`` inner steps at ``x_next``; returns the last inner point and the estimates ``(v, u)`` there.

    ``k`` is the outer index, kept for the record; it does not change the recursion.
    """
    radius = oracle.config.R_xi
    prev = (np.asarray(x_prev, dtype=float), np.asarray(xi, dtype=float))
    x_next = np.asarray(x_next, dtype=float)
    v, u = np.array(v, dtype=float), np.array(u, dtype=float)
    y = project_ball(prev[1] + lambda_inner * u, radius)
    for j in range(m):
        batch = oracle.batch(S2)
        gx_new, gxi_new = oracle.grad(batch, *oracle.split(x_next), y)
        gx_old, gxi_old = oracle.grad(batch, *oracle.split(prev[0]), prev[1])
        v = v + gx_new - gx_old
        u = u + gxi_new - gxi_old
        prev = (x_next, y)
        if j < m - 1:
            y = project_ball(y + lambda_inner * u, radius)
    return y, v, u


def _exact_neg_grad_zeta(problem: LinearProblem, theta, zeta, xi) -> np.ndarray:
    dm = problem.derived(SoftmaxPolicy(theta, problem.n_actions))
    g_zeta, _ = grad_zeta_xi(dm, zeta, xi, problem.lambda_w, problem.lambda_q, problem.gamma)
    return -g_zeta


def _advance(state: PsredaState, config: PsredaConfig, oracle: _Oracle) -> tuple[PsredaState, StepInfo]:
    samples = state.sample_counter
    x = state.x
    if state.k % config.q == 0:
        v, u = oracle.grad(oracle.batch(config.S1), state.theta, state.zeta, state.xi)
        samples += config.S1
    else:
        v, u = state.v, state.u
    v_theta, v_zeta = oracle.split(v)
    v_norm = float(np.linalg.norm(v))
    eta = config.step_size(v_norm)
    theta = state.theta - eta * v_theta
    zeta_plus = state.zeta - eta * v_zeta
    zeta = project_ball(zeta_plus, config.R_prime)
    active = bool(np.linalg.norm(zeta_plus) > config.R_prime)
    lhs = rhs = 0.0
    if active:
        g = _exact_neg_grad_zeta(oracle.problem, state.theta, state.zeta, state.xi)
        lhs = float(g @ (zeta - zeta_plus))
        rhs = float(eta / 4 * np.linalg.norm(g) * np.linalg.norm(v_zeta))
    x_next = np.concatenate([theta, zeta])
    xi, v_next, u_next = concave_maximizer(state.k, config.m, config.S2, x, x_next, state.xi, u, v,
                                           config.lambda_inner, oracle)
    samples += config.m * config.S2
    vt, vz = oracle.split(v_next)
    new = PsredaState(theta, zeta, xi, vt, vz, u_next, state.k + 1, samples)
    _check_bounds(new, config)
    return new, StepInfo(eta, v_norm, active, lhs, rhs)


def _check_bounds(state: PsredaState, config: PsredaConfig) -> None:
    if np.linalg.norm(state.zeta) > config.R_prime * (1 + 1e-12):
        raise NumericalFailure("zeta left the R' ball")
    if np.linalg.norm(state.xi) > config.R_xi * (1 + 1e-12):
        raise NumericalFailure("xi left the xi ball")
    if not (np.all(np.isfinite(state.theta)) and np.all(np.isfinite(state.v)) and np.all(np.isfinite(state.u))):
        raise NumericalFailure("non-finite iterate")


def psreda_step(state: PsredaState, config: PsredaConfig, problem: LinearProblem,
                rng: np.random.Generator | None) -> PsredaState:
    """One outer iteration: optional refresh, projected descent on ``x``, then the inner loop."""
    new, _ = _advance(state, config, _Oracle(problem, config, rng))
    return new


def run_psreda(problem: LinearProblem, config: PsredaConfig, seed: int, *, theta0=None,
               zeta0=None) -> tuple[np.ndarray, np.ndarray, RunTrace]:
    """``K`` outer iterations; the output is drawn uniformly from ``x_0 .. x_{K-1}``.

    Row ``k`` of the trace describes iteration ``k``: the envelope gradient
    norm and loss at ``(x_k, xi_k)``, the step taken from there and the
    cumulative sample count after it.  ``angle_*`` record the projection
    inequality on projection-active steps.
    """
    run_ss, pick_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(run_ss)
    state = initial_state(problem, config, theta0, zeta0)
    xi0, init_samples = psreda_init_xi(state, config, problem, rng)
    state = replace(state, xi=xi0)
    oracle = _Oracle(problem, config, rng)
    trace = RunTrace(TRACE_COLUMNS, extra=TRACE_EXTRA,
                     meta={"seed": int(seed), "init_samples": int(init_samples),
                           "planned_samples": config.planned_samples()})
    history = []
    A = problem.n_actions
    for k in range(config.K):
        policy = SoftmaxPolicy(state.theta, A)
        g_theta, g_zeta, env = envelope_full_gradient(problem, policy, state.zeta, config.R_xi)
        value = -loss(problem.derived(policy), state.zeta, state.xi, problem.lambda_w, problem.lambda_q,
                      problem.gamma)
        history.append((state.theta, state.zeta))
        state, info = _advance(state, config, oracle)
        trace.append(iter=k, samples=state.sample_counter, eta=info.eta, v_norm=info.v_norm,
                     proj_active=int(info.proj_active),
                     exact_envelope_grad_norm=float(np.sqrt(g_theta @ g_theta + g_zeta @ g_zeta)),
                     loss=value, angle_lhs=info.angle_lhs, angle_rhs=info.angle_rhs,
                     angle_ok=int(info.angle_lhs <= info.angle_rhs + _ANGLE_TOL))
    trace.meta["final_samples"] = int(state.sample_counter)
    if not history:
        return state.theta, state.zeta, trace
    pick = int(np.random.default_rng(pick_ss).integers(len(history)))
    trace.meta["output_index"] = pick
    theta_hat, zeta_hat = history[pick]
    return theta_hat, zeta_hat, trace


def small_angle_violations(trace: RunTrace) -> int:
    """Projection-active steps where the inequality fails."""
    return sum(1 for row in trace.rows if row["proj_active"] and not row["angle_ok"])
