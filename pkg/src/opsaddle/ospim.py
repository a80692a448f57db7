"""Actor-critic with an inner saddle oracle and a momentum actor.

Each outer step moves the actor along the momentum gradient (ascent on
``L``), asks the oracle for the saddle of the new policy warm-started at the
previous critic, and mixes a fresh batch gradient in ``theta`` at the new
triple into the momentum:

    theta_{t+1} = theta_t + eta g_t
    (zeta_{t+1}, xi_{t+1}) = Oracle(theta_{t+1}; zeta_t, xi_t)
    g_{t+1} = (1 - alpha) g_t + alpha grad_theta L^B(theta_{t+1}, zeta_{t+1}, xi_{t+1})

The initial critic comes from one oracle call at ``theta_0`` and ``g_0`` from
one batch there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError
from .lagrangian import SaddleIterate, grad_batch, saddle_value_gradient
from .linear import LinearProblem, ProblemConstants, loss_bound
from .mdp import (
    BehaviorDistribution,
    SoftmaxPolicy,
    TabularMdp,
    TransitionData,
    expected_return,
    policy_gradient,
    q_function,
)
from .oracles import (
    LeastSquareOracle,
    LsqConfig,
    SvrebConfig,
    SvrebOracle,
    oracle_budget,
    svreb_rate,
    theorem_step_sizes,
)
from .samples import SampleSet
from .trace import RunTrace

TRACE_COLUMNS = ("iter", "samples", "g_norm", "exact_J_grad_norm", "exact_envelope_grad_norm",
                 "critic_dist", "J_value")
TRACE_EXTRA = ("critic_shift2", "theta_shift2", "zeta_star_shift", "xi_star_shift")
ORACLE_KINDS = ("least_square", "svreb")


@dataclass(frozen=True)
class OspimConfig:
    """Schedule of one run.  ``from_constants`` fills the theorem defaults.

    ``oracle_K``, ``oracle_batch`` (extragradient) and ``oracle_n_all``
    (least squares, ``0`` for the exact data-law matrices) size each oracle
    call; ``d`` is ``max(C_W, C_Q)``.
    """

    T: int
    batch_size_B: int
    alpha: float
    beta: float
    c: float
    eta_theta: float
    oracle_kind: str
    epsilon: float
    d: float = 1.0
    c_oracle: float = 8.0
    lsq_multiplier: float = 20.0
    oracle_n_all: int = 0
    oracle_K: int = 1
    oracle_batch: int = 1
    oracle_eta_zeta: float = 0.0
    oracle_eta_xi: float = 0.0
    delta: float = float("nan")

    def __post_init__(self):
        if self.T < 0:
            raise InvalidInputError("T must be non-negative")
        if self.batch_size_B < 1:
            raise InvalidInputError("batch_size_B must be at least 1")
        if not 0 < self.alpha <= 1:
            raise InvalidInputError("alpha must lie in (0, 1]")
        if not 0 <= self.beta <= (1 - self.alpha) ** 2 / 2 * (1 + 1e-12):
            raise InvalidInputError(f"beta = {self.beta:.3g} must lie in [0, (1 - alpha)^2 / 2]")
        if self.c < 0:
            raise InvalidInputError("c must be non-negative")
        if self.eta_theta < 0:
            raise InvalidInputError("eta_theta must be non-negative")
        if self.oracle_kind not in ORACLE_KINDS:
            raise InvalidInputError(f"oracle_kind must be one of {ORACLE_KINDS}")
        if not 0 < self.epsilon:
            raise InvalidInputError("epsilon must be positive")
        if self.oracle_n_all < 0 or self.oracle_K < 0 or self.oracle_batch < 1:
            raise InvalidInputError("oracle budget fields out of range")

    @property
    def mixing(self) -> float:
        """``lambda = 2 (1 - alpha)^2``."""
        return 2 * (1 - self.alpha) ** 2

    @classmethod
    def from_constants(cls, constants: ProblemConstants, epsilon: float, delta: float,
                       oracle_kind: str = "least_square", **overrides) -> "OspimConfig":
        """Theorem defaults for accuracy ``epsilon`` and range ``delta``; ``overrides`` pin any field.

        Derived quantities are recomputed from overridden inputs, so pinning
        ``alpha`` or ``epsilon`` moves ``beta``, ``c`` and ``|B|`` with them.
        """
        unknown = set(overrides) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidInputError(f"unknown O-SPIM overrides {sorted(unknown)}")
        if not epsilon > 0:
            raise InvalidInputError("epsilon must be positive")
        L, C, L_zx = constants.L, constants.C_zeta_xi, constants.L_zeta_xi
        alpha = overrides.get("alpha", 0.5)
        lam = 2 * (1 - alpha) ** 2
        d = overrides.get("d", max(constants.C_W, constants.C_Q))
        beta = overrides.get("beta", min(epsilon ** 2 / (L ** 2 * d ** 2), (1 - lam) ** 2, 0.5,
                                         (1 - alpha) ** 2 / 2))
        c = overrides.get("c", epsilon ** 2 / (128 * L ** 2))
        B = overrides.get("batch_size_B", math.ceil(36 * constants.sigma ** 2 / epsilon ** 2))
        eta = overrides.get("eta_theta", min(1 / (2 * L_zx),
                                             math.sqrt(max(1 - lam, 0.0) / (6 * L ** 2 * (14 * C + 1)))))
        T = overrides.get("T", math.ceil(max(96, 16 * delta * L_zx / epsilon ** 2,
                                             16 * delta * L * math.sqrt(28 * C + 2) / epsilon ** 2)))
        base = dict(T=T, batch_size_B=B, alpha=alpha, beta=beta, c=c, eta_theta=eta,
                    oracle_kind=oracle_kind, epsilon=epsilon, d=d, delta=delta)
        c_oracle = overrides.get("c_oracle", 8.0)
        mult = overrides.get("lsq_multiplier", 20.0)
        if oracle_kind == "least_square":
            base["oracle_n_all"] = oracle_budget(beta, c, constants, "least_square", lsq_multiplier=mult).n_all
        elif oracle_kind == "svreb":
            ez, ex = theorem_step_sizes(constants)
            ez, ex = overrides.get("oracle_eta_zeta", ez), overrides.get("oracle_eta_xi", ex)
            rho = svreb_rate(constants, ez, ex)
            base["oracle_K"] = max(1, math.ceil(c_oracle * math.log(1 / max(beta, 1e-300)) / rho))
            base["oracle_batch"] = max(1, math.ceil(
                240 * (L ** 2 + 1) * constants.sigma ** 2 / (rho * epsilon ** 2)
                * (ez / constants.mu_zeta + ex / constants.mu_xi)))
            base["oracle_eta_zeta"], base["oracle_eta_xi"] = ez, ex
        base.update(overrides)
        return cls(**base)

    def oracle(self):
        if self.oracle_kind == "least_square":
            return LeastSquareOracle(LsqConfig(self.oracle_n_all or None))
        return SvrebOracle(SvrebConfig(self.oracle_K, self.oracle_eta_zeta, self.oracle_eta_xi,
                                       self.oracle_batch))

    def oracle_samples(self) -> int:
        if self.oracle_kind == "least_square":
            return int(self.oracle_n_all)
        return SvrebConfig(self.oracle_K, self.oracle_eta_zeta, self.oracle_eta_xi, self.oracle_batch).samples()

    def planned_samples(self) -> int:
        """The initial oracle call and batch, then one of each per step."""
        return (self.T + 1) * (self.batch_size_B + self.oracle_samples())


def envelope_range(problem: LinearProblem, constants: ProblemConstants, theta0) -> float:
    """Over-estimate of ``max L* - L*(theta_0)``: the bound on ``|L|`` minus the exact saddle value."""
    value = saddle_value_gradient(problem, SoftmaxPolicy(theta0, problem.n_actions)).value
    return float(loss_bound(constants) - value)


@dataclass(frozen=True)
class OspimState:
    theta: np.ndarray
    zeta: np.ndarray
    xi: np.ndarray
    g_theta: np.ndarray
    t: int = 0
    samples: int = 0


def _seed_stream(seed):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    while True:
        (child,) = ss.spawn(1)
        yield child


def actor_batch_gradient(problem: LinearProblem, policy: SoftmaxPolicy, zeta, xi, size: int,
                         rng: np.random.Generator) -> np.ndarray:
    batch = SampleSet.draw(problem.data, policy, size, rng)
    return grad_batch(batch, problem, policy, zeta, xi).g_theta


def ospim_init(problem: LinearProblem, config: OspimConfig, constants: ProblemConstants, oracle,
               seeds, theta0=None) -> OspimState:
    """Oracle call at ``theta_0`` from the origin, then ``g_0`` from one batch there."""
    n = problem.n_states * problem.n_actions
    theta = np.zeros(n) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    policy = SoftmaxPolicy(theta, problem.n_actions)
    zero = SaddleIterate(np.zeros(problem.features.dim_z), np.zeros(problem.features.dim_xi))
    res = oracle(problem, policy, constants, zero, next(seeds))
    g = actor_batch_gradient(problem, policy, res.iterate.zeta, res.iterate.xi, config.batch_size_B,
                             np.random.default_rng(next(seeds)))
    return OspimState(theta, res.iterate.zeta, res.iterate.xi, g, 0, res.samples + config.batch_size_B)


def ospim_step(state: OspimState, config: OspimConfig, problem: LinearProblem, constants: ProblemConstants,
               oracle, seeds) -> OspimState:
    """Actor move, oracle call, momentum update, in that order."""
    theta = state.theta + config.eta_theta * state.g_theta
    policy = SoftmaxPolicy(theta, problem.n_actions)
    res = oracle(problem, policy, constants, SaddleIterate(state.zeta, state.xi), next(seeds))
    zeta, xi = res.iterate.zeta, res.iterate.xi
    fresh = actor_batch_gradient(problem, policy, zeta, xi, config.batch_size_B, np.random.default_rng(next(seeds)))
    g = (1 - config.alpha) * state.g_theta + config.alpha * fresh
    return OspimState(theta, zeta, xi, g, state.t + 1, state.samples + res.samples + config.batch_size_B)


def model_mdp(data: TransitionData, gamma: float) -> TabularMdp:
    """The MDP implied by a transition law (the true MDP in infinite-data mode)."""
    S, A = data.n_states, data.n_actions
    return TabularMdp(np.array(data.transitions).reshape(S, A, S), np.array(data.reward).reshape(S, A),
                      gamma, np.array(data.nu))


class _Diagnostics(NamedTuple):
    J_grad_norm: float
    envelope_grad_norm: float
    critic_dist: float
    J_value: float
    zeta_star: np.ndarray
    xi_star: np.ndarray


def _diagnose(problem: LinearProblem, mdp: TabularMdp, state: OspimState) -> _Diagnostics:
    policy = SoftmaxPolicy(state.theta, problem.n_actions)
    sg = saddle_value_gradient(problem, policy)
    dist = math.sqrt(float(np.sum((state.zeta - sg.zeta) ** 2) + np.sum((state.xi - sg.xi) ** 2)))
    return _Diagnostics(float(np.linalg.norm(policy_gradient(mdp, policy))), float(np.linalg.norm(sg.grad_theta)),
                        dist, expected_return(mdp, policy), sg.zeta, sg.xi)


def run_ospim(problem: LinearProblem, config: OspimConfig, seed: int, *, constants: ProblemConstants,
              mdp: TabularMdp | None = None, theta0=None, oracle=None) -> tuple[np.ndarray, RunTrace]:
    """``T`` outer steps; the output is drawn uniformly from ``theta_0 .. theta_T``.

    Row ``t`` describes the state after step ``t`` (row 0 after the
    initialization).  Ground-truth columns use ``mdp``, which defaults to the
    MDP implied by the data law.
    """
    mdp = model_mdp(problem.data, problem.gamma) if mdp is None else mdp
    oracle = config.oracle() if oracle is None else oracle
    run_ss, pick_ss = np.random.SeedSequence(seed).spawn(2)
    seeds = _seed_stream(run_ss)
    state = ospim_init(problem, config, constants, oracle, seeds, theta0)
    trace = RunTrace(TRACE_COLUMNS, extra=TRACE_EXTRA,
                     meta={"seed": int(seed), "planned_samples": config.planned_samples()})
    thetas = [state.theta]
    diag = _diagnose(problem, mdp, state)

    def record(st, dg, prev, prev_dg):
        shift = theta_shift = zs = xs = 0.0
        if prev is not None:
            shift = float(np.sum((st.zeta - prev.zeta) ** 2) + np.sum((st.xi - prev.xi) ** 2))
            theta_shift = float(np.sum((st.theta - prev.theta) ** 2))
            zs = float(np.linalg.norm(dg.zeta_star - prev_dg.zeta_star))
            xs = float(np.linalg.norm(dg.xi_star - prev_dg.xi_star))
        trace.append(iter=st.t, samples=st.samples, g_norm=float(np.linalg.norm(st.g_theta)),
                     exact_J_grad_norm=dg.J_grad_norm, exact_envelope_grad_norm=dg.envelope_grad_norm,
                     critic_dist=dg.critic_dist, J_value=dg.J_value, critic_shift2=shift,
                     theta_shift2=theta_shift, zeta_star_shift=zs, xi_star_shift=xs)

    record(state, diag, None, None)
    for _ in range(config.T):
        prev, prev_diag = state, diag
        state = ospim_step(state, config, problem, constants, oracle, seeds)
        diag = _diagnose(problem, mdp, state)
        record(state, diag, prev, prev_diag)
        thetas.append(state.theta)
    pick = int(np.random.default_rng(pick_ss).integers(len(thetas)))
    trace.meta["output_index"] = pick
    trace.meta["final_samples"] = int(state.samples)
    return thetas[pick], trace


class ShiftAudit(NamedTuple):
    t: np.ndarray
    measured: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray
    ok: np.ndarray

    @property
    def fraction_ok(self) -> float:
        return float(np.mean(self.ok)) if self.ok.size else 1.0


def critic_shift_bound(g_norm2_mean: np.ndarray, config: OspimConfig, C: float) -> np.ndarray:
    """Right side for the shift ``t -> t+1`` using ``E||g_0||^2 .. E||g_t||^2``."""
    beta, d, c, eta = config.beta, config.d, config.c, config.eta_theta
    out = np.empty(g_norm2_mean.size)
    acc = 0.0
    for t, g2 in enumerate(g_norm2_mean):
        acc = beta * acc + g2
        geometric = 6 * beta ** (t + 1) * d ** 2
        out[t] = geometric + 6 * eta ** 2 * C * acc + 6 * c / (1 - beta)
    return out


def critic_shift_check(traces: Sequence[RunTrace], config: OspimConfig, constants: ProblemConstants,
                       z: float = 1.645) -> ShiftAudit:
    """Seed-averaged critic shifts against their bound, flagged only beyond ``z`` standard errors."""
    if not traces:
        raise InvalidInputError("need at least one trace")
    shifts = np.array([tr.column("critic_shift2")[1:] for tr in traces])
    g2 = np.array([tr.column("g_norm")[:-1] ** 2 for tr in traces])
    measured = shifts.mean(axis=0)
    n = shifts.shape[0]
    stderr = shifts.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(measured)
    bound = critic_shift_bound(g2.mean(axis=0), config, constants.C_zeta_xi)
    ok = measured - z * stderr <= bound
    return ShiftAudit(np.arange(measured.size), measured, stderr, bound, ok)


def behavior_greedy_policy(mdp: TabularMdp, behavior: BehaviorDistribution, sharpness: float = 40.0) -> SoftmaxPolicy:
    """Softmax policy concentrated on the greedy actions of the behavior policy's Q-function."""
    S, A = mdp.n_states, mdp.n_actions
    mu = behavior.mu.reshape(S, A)
    pi_b = SoftmaxPolicy(np.log(np.maximum(mu / mu.sum(axis=1, keepdims=True), 1e-300)).reshape(-1), A)
    q = q_function(mdp, pi_b).reshape(S, A)
    theta = np.zeros((S, A))
    theta[np.arange(S), q.argmax(axis=1)] = sharpness
    return SoftmaxPolicy(theta.reshape(-1), A)
