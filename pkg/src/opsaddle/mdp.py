"""Exact tabular MDP machinery.

Everything here is a pure function of its inputs: occupancies, value
functions and policy gradients are obtained by dense linear solves, which at
desk scale (a few dozen state-action pairs) are exact to machine precision and
serve as ground truth for the stochastic parts of the package.

State-action pairs are flattened as ``s * n_actions + a`` throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .errors import InvalidInputError, NumericalFailure

_DIST_TOL = 1e-12

REWARD_MODES = ("deterministic", "bernoulli")


def _as_distribution(x, name: str, size: int | None = None) -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be a vector")
    if size is not None and arr.shape[0] != size:
        raise InvalidInputError(f"{name} must have length {size}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise InvalidInputError(f"{name} must be finite and non-negative")
    if abs(arr.sum() - 1.0) > _DIST_TOL:
        raise InvalidInputError(f"{name} must sum to 1 (got {arr.sum():.15g})")
    return arr


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite discounted MDP with mean rewards in ``[0, 1]``."""

    transition: np.ndarray
    reward_mean: np.ndarray
    gamma: float
    nu0: np.ndarray

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
            raise InvalidInputError("transition must have shape (n_states, n_actions, n_states)")
        if not np.all(np.isfinite(P)) or np.any(P < 0):
            raise InvalidInputError("transition probabilities must be finite and non-negative")
        if np.max(np.abs(P.sum(axis=2) - 1.0)) > _DIST_TOL:
            raise InvalidInputError("every transition row P[s][a][.] must sum to 1")
        R = np.array(self.reward_mean, dtype=float)
        if R.shape != P.shape[:2]:
            raise InvalidInputError("reward must have shape (n_states, n_actions)")
        if not np.all(np.isfinite(R)) or np.any(R < 0) or np.any(R > 1):
            raise InvalidInputError("rewards must lie in [0, 1]")
        gamma = float(self.gamma)
        if not 0.0 <= gamma < 1.0:
            raise InvalidInputError("gamma must lie in [0, 1)")
        nu0 = _as_distribution(self.nu0, "nu0", P.shape[0])
        object.__setattr__(self, "transition", _readonly(P))
        object.__setattr__(self, "reward_mean", _readonly(R))
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "nu0", _readonly(nu0))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions

    @property
    def transition_matrix(self) -> np.ndarray:
        """Transitions as an ``(S*A, S)`` matrix."""
        return self.transition.reshape(self.n_pairs, self.n_states)

    @property
    def reward_vector(self) -> np.ndarray:
        return self.reward_mean.reshape(-1)


@dataclass(frozen=True, eq=False)
class SoftmaxPolicy:
    """Per-state softmax over tabular logits ``theta[s * A + a]``."""

    theta: np.ndarray
    n_actions: int

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        n_actions = int(self.n_actions)
        if n_actions < 1 or theta.size == 0 or theta.size % n_actions:
            raise InvalidInputError("theta length must be a positive multiple of n_actions")
        if not np.all(np.isfinite(theta)):
            raise InvalidInputError("theta must be finite")
        object.__setattr__(self, "theta", _readonly(theta))
        object.__setattr__(self, "n_actions", n_actions)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "SoftmaxPolicy":
        return cls(np.zeros(n_states * n_actions), n_actions)

    @property
    def n_states(self) -> int:
        return self.theta.size // self.n_actions

    @cached_property
    def probs(self) -> np.ndarray:
        """Action probabilities, shape ``(S, A)``."""
        logits = self.theta.reshape(self.n_states, self.n_actions)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return _readonly(z / z.sum(axis=1, keepdims=True))

    def score(self, s: int, a: int) -> np.ndarray:
        """Gradient of ``log pi(a|s)`` with respect to ``theta``."""
        g = np.zeros_like(self.theta)
        block = slice(s * self.n_actions, (s + 1) * self.n_actions)
        g[block] = -self.probs[s]
        g[s * self.n_actions + a] += 1.0
        return g

    def with_theta(self, theta: np.ndarray) -> "SoftmaxPolicy":
        return SoftmaxPolicy(theta, self.n_actions)


class PolicyConstants(NamedTuple):
    G: float
    H: float
    L_Pi: float


def policy_constants(n_states: int = 1, n_actions: int = 1) -> PolicyConstants:
    """Analytic smoothness constants of the tabular softmax.

    ``||grad log pi|| <= sqrt(2)`` because the score is ``e_a - pi(.|s)``;
    the Hessian of ``log pi`` is ``-(diag(pi) - pi pi^T)``, whose spectral norm
    is at most 1/2; and the softmax Jacobian bounds give
    ``||pi_1(.|s) - pi_2(.|s)||_1 <= 2 ||theta_1 - theta_2||``.  The bounds do
    not depend on the dimensions.
    """
    return PolicyConstants(G=float(np.sqrt(2.0)), H=1.0, L_Pi=2.0)


def softmax_pushforward_grad(probs: np.ndarray, state_weight: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Gradient in theta of ``sum_s c(s) sum_a pi(a|s) F(s, a)`` for fixed ``c`` and ``F``."""
    centred = values - np.sum(probs * values, axis=1, keepdims=True)
    return (state_weight[:, None] * probs * centred).reshape(-1)


def lift(state_dist: np.ndarray, policy: SoftmaxPolicy) -> np.ndarray:
    """State distribution composed with the policy: ``nu(s) pi(a|s)``."""
    return (np.asarray(state_dist, dtype=float)[:, None] * policy.probs).reshape(-1)


def policy_transition(transition_matrix: np.ndarray, policy: SoftmaxPolicy) -> np.ndarray:
    """``P^pi[(s,a), (s',a')] = P(s'|s,a) pi(a'|s')`` from an ``(S*A, S)`` matrix."""
    n_pairs = transition_matrix.shape[0]
    return (transition_matrix[:, :, None] * policy.probs[None, :, :]).reshape(n_pairs, n_pairs)


def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        x = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"linear solve failed: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise NumericalFailure("linear solve returned non-finite values")
    return x


def _init_pairs(mdp: TabularMdp, policy: SoftmaxPolicy, init) -> np.ndarray:
    init = np.asarray(init, dtype=float).reshape(-1)
    if init.size == mdp.n_states:
        return lift(_as_distribution(init, "init"), policy)
    if init.size == mdp.n_pairs:
        return _as_distribution(init, "init")
    raise InvalidInputError("init must be a state or state-action distribution")


def occupancy(mdp: TabularMdp, policy: SoftmaxPolicy, init=None) -> np.ndarray:
    """Normalized discounted state-action occupancy.

    ``init`` may be a state distribution (lifted through the policy) or a
    state-action distribution used directly as the first pair; it defaults
    to ``mdp.nu0``.
    """
    nu = _init_pairs(mdp, policy, mdp.nu0 if init is None else init)
    P_pi = policy_transition(mdp.transition_matrix, policy)
    A = np.eye(mdp.n_pairs) - mdp.gamma * P_pi.T
    return (1.0 - mdp.gamma) * _solve(A, nu)


def q_function(mdp: TabularMdp, policy: SoftmaxPolicy) -> np.ndarray:
    """Action values ``Q = (I - gamma P^pi)^{-1} R`` with shape ``(S, A)``."""
    P_pi = policy_transition(mdp.transition_matrix, policy)
    Q = _solve(np.eye(mdp.n_pairs) - mdp.gamma * P_pi, mdp.reward_vector)
    return Q.reshape(mdp.n_states, mdp.n_actions)


def expected_return(mdp: TabularMdp, policy: SoftmaxPolicy) -> float:
    return float(lift(mdp.nu0, policy) @ q_function(mdp, policy).reshape(-1))


def policy_gradient(mdp: TabularMdp, policy: SoftmaxPolicy) -> np.ndarray:
    """Exact ``grad J = E_{d^pi}[Q grad log pi] / (1 - gamma)``."""
    d = occupancy(mdp, policy).reshape(mdp.n_states, mdp.n_actions)
    Q = q_function(mdp, policy)
    return softmax_pushforward_grad(policy.probs, d.sum(axis=1), Q) / (1.0 - mdp.gamma)


@dataclass(frozen=True, eq=False)
class BehaviorDistribution:
    """State-action sampling distribution of the offline data.

    Full support is required by default because the coverage constant is
    infinite otherwise; ``full_support=False`` admits point masses for tests
    and data generation.
    """

    mu: np.ndarray
    full_support: bool = True

    def __post_init__(self):
        mu = _as_distribution(np.asarray(self.mu, dtype=float).reshape(-1), "behavior mu")
        if self.full_support and np.any(mu <= 0):
            raise InvalidInputError("behavior support must cover every state-action pair (mu > 0)")
        object.__setattr__(self, "mu", _readonly(mu))

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "BehaviorDistribution":
        n = n_states * n_actions
        return cls(np.full(n, 1.0 / n))


def density_ratio(mdp: TabularMdp, behavior: BehaviorDistribution, policy: SoftmaxPolicy) -> np.ndarray:
    """``w^pi = d^pi / mu`` over flattened pairs."""
    return occupancy(mdp, policy) / behavior.mu


def concentrability(mdp: TabularMdp, behavior: BehaviorDistribution, policies: Iterable[SoftmaxPolicy]) -> float:
    """Largest ratio of ``d^pi`` (from nu0) or ``d^pi_mu`` (from mu) to ``mu`` over the probes."""
    worst = 0.0
    for policy in policies:
        for init in (mdp.nu0, behavior.mu):
            worst = max(worst, float(np.max(occupancy(mdp, policy, init) / behavior.mu)))
    return worst


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """A multiset of ``(s, a, r, s_next)`` tuples stored column-wise."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    n_states: int
    n_actions: int

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.int64).reshape(-1)
        a = np.asarray(self.a, dtype=np.int64).reshape(-1)
        r = np.asarray(self.r, dtype=float).reshape(-1)
        s_next = np.asarray(self.s_next, dtype=np.int64).reshape(-1)
        if not (s.size == a.size == r.size == s_next.size):
            raise InvalidInputError("dataset columns must have equal length")
        S, A = int(self.n_states), int(self.n_actions)
        if (s.size and (s.min() < 0 or s.max() >= S or s_next.min() < 0 or s_next.max() >= S
                        or a.min() < 0 or a.max() >= A)):
            raise InvalidInputError("dataset indices out of range")
        if not np.all(np.isfinite(r)):
            raise InvalidInputError("dataset rewards must be finite")
        for name, arr in (("s", s), ("a", a), ("r", r), ("s_next", s_next)):
            object.__setattr__(self, name, _readonly(arr))
        object.__setattr__(self, "n_states", S)
        object.__setattr__(self, "n_actions", A)

    @property
    def n(self) -> int:
        return int(self.s.size)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.s * self.n_actions + self.a, minlength=self.n_states * self.n_actions)

    @property
    def tuples(self) -> Iterator[tuple[int, int, float, int]]:
        for row in zip(self.s.tolist(), self.a.tolist(), self.r.tolist(), self.s_next.tolist()):
            yield row


def check_dataset(dataset: OfflineDataset, mdp: TabularMdp, reward_mode: str = "deterministic") -> None:
    """Raise unless every tuple is feasible under ``mdp`` and the reward model."""
    if (dataset.n_states, dataset.n_actions) != (mdp.n_states, mdp.n_actions):
        raise InvalidInputError("dataset and MDP dimensions differ")
    if np.any(mdp.transition[dataset.s, dataset.a, dataset.s_next] <= 0):
        raise InvalidInputError("dataset contains a transition with zero probability")
    mean = mdp.reward_mean[dataset.s, dataset.a]
    if reward_mode == "deterministic":
        ok = dataset.r == mean
    elif reward_mode == "bernoulli":
        ok = ((dataset.r == 1.0) & (mean > 0)) | ((dataset.r == 0.0) & (mean < 1))
    else:
        raise InvalidInputError(f"unknown reward mode {reward_mode!r}")
    if not np.all(ok):
        raise InvalidInputError("dataset reward outside the reward distribution's support")


def sample_dataset(mdp: TabularMdp, behavior: BehaviorDistribution, n: int, seed: int,
                   reward_mode: str = "deterministic") -> OfflineDataset:
    """Draw ``n`` i.i.d. tuples: ``(s, a) ~ mu``, ``r`` from the reward model, ``s' ~ P``."""
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    if reward_mode not in REWARD_MODES:
        raise InvalidInputError(f"unknown reward mode {reward_mode!r}")
    if behavior.mu.size != mdp.n_pairs:
        raise InvalidInputError("behavior distribution does not match the MDP")
    rng = np.random.default_rng(seed)
    idx = rng.choice(mdp.n_pairs, size=n, p=behavior.mu)
    s, a = np.divmod(idx, mdp.n_actions)
    cdf = np.cumsum(mdp.transition_matrix[idx], axis=1)
    cdf /= cdf[:, -1:]
    s_next = np.sum(rng.random(n)[:, None] >= cdf, axis=1)
    mean = mdp.reward_vector[idx]
    if reward_mode == "bernoulli":
        r = (rng.random(n) < mean).astype(float)
    else:
        r = mean.copy()
    return OfflineDataset(s, a, r, s_next, mdp.n_states, mdp.n_actions)


@dataclass(frozen=True, eq=False)
class TransitionData:
    """Finite-support law of a transition ``(s, a, r, s')`` plus the start-state law.

    This is the object every estimator samples from.  Built from a dataset it
    is the empirical distribution of the tuples (``source="empirical"``);
    built from the true model it is ``mu x P x reward`` (``source="exact"``,
    the infinite-data mode).  Outcomes are distinct and sorted, so sampling
    and enumeration are deterministic.
    """

    n_states: int
    n_actions: int
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    prob: np.ndarray
    nu: np.ndarray
    source: str = "empirical"

    def __post_init__(self):
        prob = np.asarray(self.prob, dtype=float)
        if prob.size == 0:
            raise InvalidInputError("transition data must have at least one outcome")
        if np.any(prob <= 0) or abs(prob.sum() - 1.0) > 1e-10:
            raise InvalidInputError("outcome probabilities must be positive and sum to 1")
        for name in ("s", "a", "s_next"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name), dtype=np.int64)))
        object.__setattr__(self, "r", _readonly(np.asarray(self.r, dtype=float)))
        object.__setattr__(self, "prob", _readonly(prob))
        object.__setattr__(self, "nu", _readonly(_as_distribution(self.nu, "nu", self.n_states)))

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions

    @property
    def n_outcomes(self) -> int:
        return int(self.prob.size)

    @cached_property
    def pair(self) -> np.ndarray:
        return _readonly(self.s * self.n_actions + self.a)

    @cached_property
    def d(self) -> np.ndarray:
        """State-action marginal ``d^D``."""
        return _readonly(np.bincount(self.pair, weights=self.prob, minlength=self.n_pairs))

    @cached_property
    def transitions(self) -> np.ndarray:
        """Conditional next-state law ``(S*A, S)``; unseen pairs get uniform rows."""
        P = np.zeros((self.n_pairs, self.n_states))
        np.add.at(P, (self.pair, self.s_next), self.prob)
        seen = self.d > 0
        P[seen] /= self.d[seen, None]
        P[~seen] = 1.0 / self.n_states
        return _readonly(P)

    @cached_property
    def reward(self) -> np.ndarray:
        """Mean reward per pair (zero on unseen pairs, which carry no weight)."""
        total = np.bincount(self.pair, weights=self.prob * self.r, minlength=self.n_pairs)
        out = np.zeros(self.n_pairs)
        seen = self.d > 0
        out[seen] = total[seen] / self.d[seen]
        return _readonly(out)

    @classmethod
    def from_dataset(cls, dataset: OfflineDataset) -> "TransitionData":
        if dataset.n == 0:
            raise InvalidInputError("empty dataset")
        rows = np.rec.fromarrays([dataset.s, dataset.a, dataset.r, dataset.s_next], names="s,a,r,sn")
        uniq, counts = np.unique(rows, return_counts=True)
        prob = counts / dataset.n
        d = np.bincount(uniq["s"] * dataset.n_actions + uniq["a"], weights=prob,
                        minlength=dataset.n_states * dataset.n_actions)
        nu = d.reshape(dataset.n_states, dataset.n_actions).sum(axis=1)
        nu = nu / nu.sum()
        return cls(dataset.n_states, dataset.n_actions, uniq["s"], uniq["a"], uniq["r"], uniq["sn"],
                   prob, nu, "empirical")

    @classmethod
    def exact(cls, mdp: TabularMdp, behavior: BehaviorDistribution,
              reward_mode: str = "deterministic") -> "TransitionData":
        """Population law: pairs from ``mu``, next states from ``P``, start states from ``nu0``."""
        if reward_mode not in REWARD_MODES:
            raise InvalidInputError(f"unknown reward mode {reward_mode!r}")
        pair, sn = np.nonzero(behavior.mu[:, None] * mdp.transition_matrix > 0)
        base = behavior.mu[pair] * mdp.transition_matrix[pair, sn]
        mean = mdp.reward_vector[pair]
        if reward_mode == "deterministic":
            cols = (pair, mean, sn, base)
        else:
            cols = tuple(np.concatenate(c) for c in ((pair, pair), (np.zeros_like(mean), np.ones_like(mean)),
                                                      (sn, sn), (base * (1 - mean), base * mean)))
        pair, r, sn, prob = cols
        keep = prob > 0
        order = np.lexsort((sn[keep], r[keep], pair[keep]))
        pair, r, sn, prob = (c[keep][order] for c in (pair, r, sn, prob))
        prob = prob / prob.sum()
        s, a = np.divmod(pair, mdp.n_actions)
        return cls(mdp.n_states, mdp.n_actions, s, a, r, sn, prob, np.array(mdp.nu0), "exact")


class EmpiricalModel(NamedTuple):
    d_D: np.ndarray
    nu_D: np.ndarray
    Lambda_D: np.ndarray
    P_D_pi: np.ndarray
    R_D: np.ndarray


def empirical_model(dataset: OfflineDataset, policy: SoftmaxPolicy) -> EmpiricalModel:
    """Plug-in quantities of a dataset under ``policy``."""
    data = TransitionData.from_dataset(dataset)
    return EmpiricalModel(
        d_D=np.array(data.d),
        nu_D=np.array(data.nu),
        Lambda_D=np.diag(data.d),
        P_D_pi=policy_transition(data.transitions, policy),
        R_D=np.array(data.reward),
    )


def random_mdp(n_states: int, n_actions: int, gamma: float, seed: int, *,
               concentration: float = 1.0, uniform_start: bool = False) -> TabularMdp:
    """Dirichlet transitions, uniform rewards in ``[0, 1]``."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    R = rng.random((n_states, n_actions))
    nu0 = np.full(n_states, 1.0 / n_states) if uniform_start else rng.dirichlet(np.ones(n_states))
    return TabularMdp(P, R, gamma, nu0)


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator, scale: float = 1.0) -> SoftmaxPolicy:
    return SoftmaxPolicy(scale * rng.standard_normal(n_states * n_actions), n_actions)


def random_behavior(n_states: int, n_actions: int, rng: np.random.Generator, floor: float = 0.05) -> BehaviorDistribution:
    """Dirichlet behaviour mixed with the uniform law so every pair has mass."""
    n = n_states * n_actions
    mu = (1 - floor) * rng.dirichlet(np.ones(n)) + floor / n
    return BehaviorDistribution(mu / mu.sum())
