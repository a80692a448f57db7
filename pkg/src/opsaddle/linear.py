"""Linear function classes and the constants the convergence schedules consume.

``w_zeta(s, a) = phi_w(s, a) . zeta`` and ``Q_xi(s, a) = phi_Q(s, a) . xi``
with feature rows of norm at most one.  For a fixed policy the objective is a
quadratic in ``(zeta, xi)`` described by five arrays (``DerivedMatrices``);
``ProblemConstants`` freezes the singular-value floors, radii, smoothness,
condition numbers and variance constants of one configuration.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import AssumptionViolation, InvalidInputError
from .mdp import (
    PolicyConstants,
    SoftmaxPolicy,
    TransitionData,
    lift,
    policy_constants,
    policy_transition,
    random_policy,
)
from .samples import SampleSet

_ROW_TOL = 1e-12
_FLOOR_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class FeatureMaps:
    """Feature matrices ``Phi_w`` (pairs x dim_z) and ``Phi_Q`` (pairs x dim_xi)."""

    phi_w: np.ndarray
    phi_q: np.ndarray

    def __post_init__(self):
        arrays = []
        for name in ("phi_w", "phi_q"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim != 2 or arr.shape[1] < 1:
                raise InvalidInputError(f"{name} must be a non-empty 2-d array")
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} must be finite")
            worst = np.max(np.linalg.norm(arr, axis=1))
            if worst > 1 + _ROW_TOL:
                raise InvalidInputError(f"{name} has a row of norm {worst:.6g} > 1")
            arr.setflags(write=False)
            arrays.append(arr)
        if arrays[0].shape[0] != arrays[1].shape[0]:
            raise InvalidInputError("phi_w and phi_q must have the same number of rows")
        object.__setattr__(self, "phi_w", arrays[0])
        object.__setattr__(self, "phi_q", arrays[1])

    @property
    def dim_z(self) -> int:
        return self.phi_w.shape[1]

    @property
    def dim_xi(self) -> int:
        return self.phi_q.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.phi_w.shape[0]


def onehot_features(n_states: int, n_actions: int) -> FeatureMaps:
    """Tabular indicator features; the resulting classes are well specified."""
    eye = np.eye(n_states * n_actions)
    return FeatureMaps(eye, eye.copy())


def random_features(n_states: int, n_actions: int, dim_z: int, dim_xi: int, seed: int,
                    shared: bool = False) -> FeatureMaps:
    """Gaussian projections with every row rescaled to unit norm."""
    rng = np.random.default_rng(seed)
    n = n_states * n_actions

    def draw(dim):
        X = rng.standard_normal((n, dim))
        return X / np.linalg.norm(X, axis=1, keepdims=True)

    phi_w = draw(dim_z)
    phi_q = phi_w.copy() if shared and dim_z == dim_xi else draw(dim_xi)
    return FeatureMaps(phi_w, phi_q)


@dataclass(frozen=True, eq=False)
class DerivedMatrices:
    K_w: np.ndarray
    K_Q: np.ndarray
    M: np.ndarray
    u_R: np.ndarray
    u_nu: np.ndarray
    source: str = "exact"


def build_derived(features: FeatureMaps, d: np.ndarray, P_pi: np.ndarray, reward: np.ndarray,
                  nu_pi: np.ndarray, gamma: float, source: str = "exact") -> DerivedMatrices:
    """``K_w, K_Q, M_pi = Phi_w^T Lam (I - gamma P^pi) Phi_Q, u_R = Phi_w^T Lam R, u_nu = Phi_Q^T nu^pi``."""
    Pw, Pq = features.phi_w, features.phi_q
    dPw = d[:, None] * Pw
    K_w = Pw.T @ dPw
    K_Q = Pq.T @ (d[:, None] * Pq)
    M = dPw.T @ (Pq - gamma * (P_pi @ Pq))
    return DerivedMatrices(K_w, K_Q, M, dPw.T @ reward, Pq.T @ nu_pi, source)


def batch_derived(samples: SampleSet, features: FeatureMaps, n_actions: int, gamma: float) -> DerivedMatrices:
    """Derived matrices of a weighted sample set (batch averages of the per-sample outer products)."""
    n = features.n_pairs
    pair = samples.s * n_actions + samples.a
    nxt = samples.s_next * n_actions + samples.a_next
    w_pair = np.bincount(pair, weights=samples.weight, minlength=n)
    trans = np.zeros((n, n))
    np.add.at(trans, (pair, nxt), samples.weight)
    reward = np.bincount(pair, weights=samples.weight * samples.r, minlength=n)
    start = np.bincount(samples.s0 * n_actions + samples.a0, weights=samples.weight0, minlength=n)
    Pw, Pq = features.phi_w, features.phi_q
    K_w = Pw.T @ (w_pair[:, None] * Pw)
    K_Q = Pq.T @ (w_pair[:, None] * Pq)
    M = Pw.T @ (w_pair[:, None] * Pq - gamma * (trans @ Pq))
    return DerivedMatrices(K_w, K_Q, M, Pw.T @ reward, Pq.T @ start, "batch")


@dataclass(frozen=True, eq=False)
class LinearProblem:
    """A data law, feature classes and regularization weights: one inner saddle problem per policy."""

    data: TransitionData
    features: FeatureMaps
    gamma: float
    lambda_w: float
    lambda_q: float

    def __post_init__(self):
        if self.features.n_pairs != self.data.n_pairs:
            raise InvalidInputError("features do not match the number of state-action pairs")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidInputError("gamma must lie in [0, 1)")
        if self.lambda_w < 0 or self.lambda_q < 0:
            raise InvalidInputError("regularization weights must be non-negative")

    @property
    def n_states(self) -> int:
        return self.data.n_states

    @property
    def n_actions(self) -> int:
        return self.data.n_actions

    def derived(self, policy: SoftmaxPolicy) -> DerivedMatrices:
        data = self.data
        return build_derived(self.features, data.d, policy_transition(data.transitions, policy),
                             data.reward, lift(data.nu, policy), self.gamma,
                             "exact" if data.source == "exact" else "empirical")

    def with_lambdas(self, lambda_w: float, lambda_q: float) -> "LinearProblem":
        return LinearProblem(self.data, self.features, self.gamma, lambda_w, lambda_q)


def _sigma_min(A: np.ndarray) -> float:
    return float(np.linalg.svd(A, compute_uv=False).min())


def singular_floors(derived: Sequence[DerivedMatrices] | DerivedMatrices) -> tuple[float, float, float]:
    """``(v_w, v_Q, v_M)``; ``v_M`` is the smallest ``sigma_min(M_pi)`` over the probes."""
    if isinstance(derived, DerivedMatrices):
        derived = [derived]
    if not derived:
        raise InvalidInputError("need derived matrices for at least one policy")
    v_w = _sigma_min(derived[0].K_w)
    v_q = _sigma_min(derived[0].K_Q)
    v_m = min(_sigma_min(dm.M) for dm in derived)
    for name, value in (("K_w", v_w), ("K_Q", v_q), ("M_pi", v_m)):
        if value <= _FLOOR_TOL:
            raise AssumptionViolation("B", f"minimum singular value of {name} is {value:.3g}")
    return v_w, v_q, v_m


class Radii(NamedTuple):
    R_zeta: float
    R_xi: float
    R_0: float
    R_prime: float


def radii(lambda_w: float, lambda_q: float, v_w: float, v_q: float, v_m: float, gamma: float) -> Radii:
    """Balls that contain every saddle point and best response of the inner problem."""
    if min(lambda_w, lambda_q, v_w, v_q, v_m) <= 0:
        raise InvalidInputError("radii need positive regularization weights and singular floors")
    R_zeta = ((1 - gamma ** 2) / v_q + lambda_q) / (lambda_w * lambda_q * v_w + v_m ** 2)
    R_xi = ((1 - gamma) * lambda_w + (1 + gamma) / v_w) / (lambda_w * lambda_q * v_q + v_m ** 2)
    R_0 = (1 + (1 + gamma) * R_xi) / (lambda_w * v_w)
    return Radii(R_zeta, R_xi, R_0, 8 * max(R_0, 1.0))


def smoothness_constant(G: float, H: float, L_Pi: float, C_W: float, C_Q: float, gamma: float,
                        lambda_w: float, lambda_q: float) -> float:
    return max(C_W * C_Q * (G * L_Pi + H) + gamma * (C_Q + C_W) * L_Pi,
               G * C_Q + (1 + gamma) + lambda_w,
               G * C_W + (1 + gamma) + lambda_q)


def stochastic_smoothness(lambda_w: float, lambda_q: float, v_w: float, v_q: float,
                          gamma: float) -> tuple[float, float]:
    lam2 = max(lambda_w, lambda_q) ** 2
    value = max((2 * lam2 + 2 * (1 + gamma) ** 2) / min(lambda_w * v_w, lambda_q * v_q),
                np.sqrt(2 * lam2 + 2 * (1 + gamma) ** 2))
    return float(value), float(value)


def ospim_constants(kappa_zeta: float, kappa_xi: float, L: float) -> tuple[float, float]:
    """``C_{zeta,xi}`` bounding the squared saddle shift per unit actor move, and ``L_{zeta,xi}``."""
    C = kappa_zeta ** 2 * (kappa_xi + 1) ** 2 + kappa_xi ** 2 * (kappa_zeta + 1) ** 2
    L_zx = L * (1 + kappa_zeta * (kappa_xi + 1) + kappa_zeta * (kappa_zeta + 1))
    return float(C), float(L_zx)


class VarianceConstants(NamedTuple):
    sigma_K: float
    sigma_M: float
    sigma_R: float
    sigma_nu: float
    sigma_theta: float
    sigma_zeta: float
    sigma_xi: float
    sigma: float


def _spectral_norms(stack: np.ndarray) -> np.ndarray:
    if stack.shape[1] == 1 or stack.shape[2] == 1:
        return np.linalg.norm(stack.reshape(stack.shape[0], -1), axis=1)
    return np.linalg.svd(stack, compute_uv=False)[:, 0]


def raw_variances(problem: LinearProblem, policy: SoftmaxPolicy) -> tuple[float, float, float, float]:
    """Exact ``(sigma_K^2, sigma_M^2, sigma_R^2, sigma_nu^2)`` by enumerating the data support."""
    dm = problem.derived(policy)
    samples = SampleSet.enumerate(problem.data, policy)
    A = problem.n_actions
    Pw, Pq = problem.features.phi_w, problem.features.phi_q
    pair = samples.s * A + samples.a
    nxt = samples.s_next * A + samples.a_next
    fw, fq, fq_next = Pw[pair], Pq[pair], Pq[nxt]
    p = samples.weight

    def expect_sq(norms):
        return float(np.sum(p * norms ** 2))

    sk_w = expect_sq(_spectral_norms(dm.K_w[None] - fw[:, :, None] * fw[:, None, :]))
    sk_q = expect_sq(_spectral_norms(dm.K_Q[None] - fq[:, :, None] * fq[:, None, :]))
    sm = expect_sq(_spectral_norms(dm.M[None] - fw[:, :, None] * (fq - problem.gamma * fq_next)[:, None, :]))
    sr = expect_sq(np.linalg.norm(dm.u_R[None] - fw * samples.r[:, None], axis=1))
    start = samples.s0 * A + samples.a0
    snu = float(np.sum(samples.weight0 * np.linalg.norm(dm.u_nu[None] - Pq[start], axis=1) ** 2))
    return max(sk_w, sk_q), sm, sr, snu


def combine_variances(sK2: float, sM2: float, sR2: float, snu2: float, C_W: float, C_Q: float, G: float,
                      gamma: float, lambda_w: float, lambda_q: float) -> VarianceConstants:
    st2 = 2 * (1 - gamma) ** 2 * snu2 * G ** 2 * C_Q ** 2 + 2 * gamma ** 2 * sM2 * G ** 2 * C_W ** 2 * C_Q ** 2
    sz2 = 3 * sR2 + 3 * sM2 * C_Q ** 2 + 3 * lambda_w ** 2 * sK2 * C_W ** 2
    sx2 = 3 * (1 - gamma) ** 2 * snu2 + 3 * sM2 * C_W ** 2 + 3 * lambda_q ** 2 * sK2 * C_Q ** 2
    r = np.sqrt
    return VarianceConstants(float(r(sK2)), float(r(sM2)), float(r(sR2)), float(r(snu2)),
                             float(r(st2)), float(r(sz2)), float(r(sx2)), float(r(max(st2, sz2, sx2))))


def variance_constants(problem: LinearProblem, policy: SoftmaxPolicy, C_W: float, C_Q: float,
                       G: float | None = None) -> VarianceConstants:
    G = policy_constants().G if G is None else G
    return combine_variances(*raw_variances(problem, policy), C_W, C_Q, G, problem.gamma,
                             problem.lambda_w, problem.lambda_q)


@dataclass(frozen=True)
class ProblemConstants:
    """Every scalar the schedules consume, frozen for one configuration."""

    gamma: float
    lambda_w: float
    lambda_Q: float
    G: float
    H: float
    L_Pi: float
    v_w: float
    v_Q: float
    v_M: float
    mu_zeta: float
    mu_xi: float
    R_zeta: float
    R_xi: float
    R_0: float
    R_prime: float
    zeta_radius: float
    xi_radius: float
    C_W: float
    C_Q: float
    L: float
    kappa_zeta: float
    kappa_xi: float
    sigma_K: float
    sigma_M: float
    sigma_R: float
    sigma_nu: float
    sigma_theta: float
    sigma_zeta: float
    sigma_xi: float
    sigma: float
    L_bar_zeta: float
    L_bar_xi: float
    C_zeta_xi: float
    L_zeta_xi: float
    n_probe_policies: int
    zeta_ball: str
    dim_z: int
    dim_xi: int

    @property
    def lambda_max(self) -> float:
        return max(self.lambda_w, self.lambda_Q)

    def as_dict(self) -> dict:
        return asdict(self)


ZETA_BALLS = ("R_zeta", "R_prime")


def probe_policies(n_states: int, n_actions: int, count: int, seed: int,
                   include: Iterable[SoftmaxPolicy] = ()) -> list[SoftmaxPolicy]:
    rng = np.random.default_rng(seed)
    probes = list(include)
    probes.append(SoftmaxPolicy.uniform(n_states, n_actions))
    probes.extend(random_policy(n_states, n_actions, rng) for _ in range(count))
    return probes


def compute_constants(problem: LinearProblem, policies: Sequence[SoftmaxPolicy], *,
                      zeta_ball: str = "R_zeta") -> ProblemConstants:
    """Freeze the constants of ``problem`` certified over the probe ``policies``.

    ``zeta_ball`` selects the ball used for ``zeta``: ``"R_zeta"`` (the saddle
    ball of the actor-critic method) or ``"R_prime"`` (the enlarged ball of
    the projected descent method).  It fixes ``C_W`` and hence ``L``.
    """
    if zeta_ball not in ZETA_BALLS:
        raise InvalidInputError(f"zeta_ball must be one of {ZETA_BALLS}")
    if problem.lambda_w <= 0 or problem.lambda_q <= 0:
        raise InvalidInputError("constants need strictly positive regularization weights")
    policies = list(policies)
    derived = [problem.derived(p) for p in policies]
    v_w, v_q, v_m = singular_floors(derived)
    gamma, lw, lq = problem.gamma, problem.lambda_w, problem.lambda_q
    rad = radii(lw, lq, v_w, v_q, v_m, gamma)
    zeta_radius = rad.R_zeta if zeta_ball == "R_zeta" else rad.R_prime
    C_W, C_Q = max(1.0, zeta_radius), rad.R_xi
    pc: PolicyConstants = policy_constants(problem.n_states, problem.n_actions)
    L = smoothness_constant(pc.G, pc.H, pc.L_Pi, C_W, C_Q, gamma, lw, lq)
    mu_zeta, mu_xi = lw * v_w, lq * v_q
    kz, kx = L / mu_zeta, L / mu_xi
    raw = np.max(np.array([raw_variances(problem, p) for p in policies]), axis=0)
    var = combine_variances(*raw, C_W, C_Q, pc.G, gamma, lw, lq)
    lbz, lbx = stochastic_smoothness(lw, lq, v_w, v_q, gamma)
    C_zx, L_zx = ospim_constants(kz, kx, L)
    return ProblemConstants(
        gamma=gamma, lambda_w=lw, lambda_Q=lq, G=pc.G, H=pc.H, L_Pi=pc.L_Pi,
        v_w=v_w, v_Q=v_q, v_M=v_m, mu_zeta=mu_zeta, mu_xi=mu_xi,
        R_zeta=rad.R_zeta, R_xi=rad.R_xi, R_0=rad.R_0, R_prime=rad.R_prime,
        zeta_radius=zeta_radius, xi_radius=rad.R_xi, C_W=C_W, C_Q=C_Q, L=L,
        kappa_zeta=kz, kappa_xi=kx, **var._asdict(), L_bar_zeta=lbz, L_bar_xi=lbx,
        C_zeta_xi=C_zx, L_zeta_xi=L_zx, n_probe_policies=len(policies), zeta_ball=zeta_ball,
        dim_z=problem.features.dim_z, dim_xi=problem.features.dim_xi,
    )


def loss_bound(constants: ProblemConstants) -> float:
    """Bound on ``|L|`` over the two balls from ``||u|| <= 1``, ``||K|| <= 1`` and ``||M|| <= 1 + gamma``."""
    z, x, g = constants.zeta_radius, constants.xi_radius, constants.gamma
    return float((1 - g) * x + z + (1 + g) * z * x
                 + 0.5 * constants.lambda_Q * x ** 2 + 0.5 * constants.lambda_w * z ** 2)
