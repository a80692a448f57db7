"""Inner saddle-point oracles: projected least squares and mini-batch extragradient.

Both oracles return an estimate of the saddle ``(zeta*, xi*)`` of the inner
problem at a fixed policy together with the number of seven-tuple samples
they consumed.  The contract they are tuned for is

    E||omega_hat - omega*||^2 <= (beta / 2) E||omega_init - omega*||^2 + c.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from .errors import EstimationError, InvalidInputError, NumericalFailure
from .lagrangian import SaddleIterate, closed_form_saddle, project_ball
from .linear import DerivedMatrices, LinearProblem, ProblemConstants, batch_derived
from .mdp import SoftmaxPolicy
from .samples import SampleSet, _categories, batch_frequencies

__all__ = [
    "project_ball", "OracleContract", "OracleResult", "LsqConfig", "SvrebConfig",
    "least_square_oracle", "svreb", "svreb_batch", "svreb_step_limits", "theorem_step_sizes",
    "svreb_rate", "svreb_noise_floor", "oracle_budget", "LeastSquareOracle", "SvrebOracle",
    "compare_oracles", "ComparisonRow", "COMPARISON_HEADER", "saddle_target",
]

_SINGULAR_TOL = 1e-12


@dataclass(frozen=True)
class OracleContract:
    beta: float
    c: float

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise InvalidInputError("oracle contraction beta must lie in [0, 1)")
        if self.c < 0:
            raise InvalidInputError("oracle additive error c must be non-negative")

    def bound(self, init_dist2: float) -> float:
        return 0.5 * self.beta * init_dist2 + self.c


class OracleResult(NamedTuple):
    iterate: SaddleIterate
    samples: int


@dataclass(frozen=True)
class LsqConfig:
    """``n_all=None`` selects infinite-data mode (the exact data-law matrices)."""

    n_all: int | None = None

    def __post_init__(self):
        if self.n_all is not None and self.n_all < 1:
            raise InvalidInputError("n_all must be a positive sample count")


@dataclass(frozen=True)
class SvrebConfig:
    K: int
    eta_zeta: float
    eta_xi: float
    batch_size: int

    def __post_init__(self):
        if self.K < 0:
            raise InvalidInputError("K must be non-negative")
        if self.batch_size < 1:
            raise InvalidInputError("batch size must be at least 1")
        if self.eta_zeta <= 0 or self.eta_xi <= 0:
            raise InvalidInputError("step sizes must be positive")

    def samples(self) -> int:
        """Two batches for the initial step, four per later step."""
        if self.K == 0:
            return 0
        return self.batch_size * (2 + 4 * (self.K - 1))

    def check(self, constants: ProblemConstants) -> None:
        lim_z, lim_x = svreb_step_limits(constants)
        if self.eta_zeta > lim_z * (1 + 1e-12) or self.eta_xi > lim_x * (1 + 1e-12):
            raise InvalidInputError(
                f"step sizes ({self.eta_zeta:.3g}, {self.eta_xi:.3g}) exceed the limits "
                f"({lim_z:.3g}, {lim_x:.3g})")


def svreb_step_limits(constants: ProblemConstants) -> tuple[float, float]:
    return (1.0 / (50 * max(constants.L_bar_zeta, constants.mu_zeta)),
            1.0 / (50 * max(constants.L_bar_xi, constants.mu_xi)))


def theorem_step_sizes(constants: ProblemConstants) -> tuple[float, float]:
    """The largest admissible steps."""
    return svreb_step_limits(constants)


def svreb_rate(constants: ProblemConstants, eta_zeta: float, eta_xi: float) -> float:
    """Per-step contraction exponent ``min(mu_zeta eta_zeta, mu_xi eta_xi) / 4``."""
    return min(constants.mu_zeta * eta_zeta, constants.mu_xi * eta_xi) / 4


def svreb_noise_floor(constants: ProblemConstants, eta_zeta: float, eta_xi: float, batch_size: int) -> float:
    rho = svreb_rate(constants, eta_zeta, eta_xi)
    return (8 * constants.sigma ** 2 / (rho * batch_size)
            * (eta_zeta / constants.mu_zeta + eta_xi / constants.mu_xi))


def saddle_target(problem: LinearProblem, policy: SoftmaxPolicy) -> SaddleIterate:
    """The saddle of the inner problem under the data law (the oracles' target)."""
    dm = problem.derived(policy)
    zeta, xi = closed_form_saddle(dm, problem.lambda_w, problem.lambda_q, problem.gamma)
    return SaddleIterate(zeta, xi)


def _check_invertible(dm: DerivedMatrices) -> None:
    for name, K in (("K_w", dm.K_w), ("K_Q", dm.K_Q)):
        smin = float(np.linalg.svd(K, compute_uv=False).min())
        if smin <= _SINGULAR_TOL:
            raise EstimationError(f"empirical {name} is singular (sigma_min = {smin:.3g}); increase n_all")


def least_square_oracle(problem: LinearProblem, policy: SoftmaxPolicy, constants: ProblemConstants,
                        config: LsqConfig, seed=None) -> OracleResult:
    """Solve the estimated saddle in closed form, then project onto the two balls.

    One batch of ``n_all`` tuples feeds every estimated matrix.  The initial
    point is irrelevant, so the oracle meets its contract with ``beta = 0``.
    """
    if config.n_all is None:
        dm, used = problem.derived(policy), 0
    else:
        rng = np.random.default_rng(seed)
        batch = SampleSet.draw(problem.data, policy, config.n_all, rng)
        dm, used = batch_derived(batch, problem.features, problem.n_actions, problem.gamma), config.n_all
        _check_invertible(dm)
    try:
        zeta, xi = closed_form_saddle(dm, problem.lambda_w, problem.lambda_q, problem.gamma)
    except NumericalFailure as exc:
        if config.n_all is None:
            raise
        raise EstimationError(f"estimated saddle system is singular: {exc}") from exc
    zr, xr = constants.zeta_radius, constants.xi_radius
    return OracleResult(SaddleIterate(project_ball(zeta, zr), project_ball(xi, xr), zr, xr), used)


# Mini-batch extragradient.
#
# A batch gradient of the inner problem is affine in omega = (zeta, xi):
#     g_N(omega) = b_N + A_N omega,
# with the zeta rows built from the zeta batch and the xi rows from the xi
# batch.  A_N and b_N are linear in the multinomial category counts, so whole
# chunks of batch operators come out of one matrix product.


@lru_cache(maxsize=16)
def _category_tables(problem: LinearProblem):
    """Per-category contributions to (A, b) for unit weight, independent of the policy."""
    data, feats, A = problem.data, problem.features, problem.n_actions
    pol = SoftmaxPolicy.uniform(data.n_states, A)
    (s, a, r, sn, an, _), (s0, a0, _) = _categories(data, pol)
    fw = feats.phi_w[s * A + a]
    fq = feats.phi_q[s * A + a]
    fqn = feats.phi_q[sn * A + an]
    fq0 = feats.phi_q[s0 * A + a0]
    g, lw, lq = problem.gamma, problem.lambda_w, problem.lambda_q
    n = fw.shape[0]
    diff = fq - g * fqn
    Az = np.concatenate([-lw * fw[:, :, None] * fw[:, None, :], -fw[:, :, None] * diff[:, None, :]], axis=2)
    Ax = np.concatenate([-diff[:, :, None] * fw[:, None, :], lq * fq[:, :, None] * fq[:, None, :]], axis=2)
    bz = r[:, None] * fw
    bx = (1 - g) * fq0
    return Az.reshape(n, -1), Ax.reshape(n, -1), bz, bx


class _BatchStream:
    """Chunked draws of batch operators for several independent generators."""

    def __init__(self, problem: LinearProblem, policy: SoftmaxPolicy, batch_size: int,
                 rngs: Sequence[np.random.Generator], chunk: int):
        self.Az, self.Ax, self.bz, self.bx = _category_tables(problem)
        (_, _, _, _, _, p), (_, _, p0) = _categories(problem.data, policy)
        self.p, self.p0 = p / p.sum(), p0 / p0.sum()
        self.b, self.rngs, self.chunk = int(batch_size), list(rngs), int(chunk)
        self.dz, self.dx = problem.features.dim_z, problem.features.dim_xi

    def draw(self, n_pairs: int, count: int):
        """``count`` rows of ``n_pairs`` (zeta batch, xi batch) pairs per generator.

        Returns ``A`` of shape (count, n_pairs, S, D, D) and ``b`` of shape
        (count, n_pairs, S, D) where ``S`` is the number of generators.
        """
        D = self.dz + self.dx
        S = len(self.rngs)
        A = np.empty((count, n_pairs, S, D, D))
        b = np.empty((count, n_pairs, S, D))
        for i, rng in enumerate(self.rngs):
            cz = batch_frequencies(self.b, self.p, rng, (count, n_pairs))
            cx = batch_frequencies(self.b, self.p, rng, (count, n_pairs))
            cx0 = batch_frequencies(self.b, self.p0, rng, (count, n_pairs))
            A[:, :, i, :self.dz, :] = (cz @ self.Az).reshape(count, n_pairs, self.dz, D)
            A[:, :, i, self.dz:, :] = (cx @ self.Ax).reshape(count, n_pairs, self.dx, D)
            b[:, :, i, :self.dz] = cz @ self.bz
            b[:, :, i, self.dz:] = cx0 @ self.bx
        return A, b


def _project(x: np.ndarray, dz: int, rz: float, rx: float) -> np.ndarray:
    out = x.copy()
    for sl, r in ((slice(None, dz), rz), (slice(dz, None), rx)):
        if not np.isfinite(r):
            continue
        nrm = np.linalg.norm(out[:, sl], axis=1)
        scale = np.where(nrm > r, r / np.maximum(nrm, 1e-300), 1.0)
        out[:, sl] *= scale[:, None]
    return out


def _apply(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("sij,sj->si", A, x)


def svreb_batch(problem: LinearProblem, policy: SoftmaxPolicy, constants: ProblemConstants,
                config: SvrebConfig, inits: Sequence[SaddleIterate], seeds: Sequence,
                *, target: SaddleIterate | None = None, check: bool = True,
                chunk: int | None = None):
    """Run independent extragradient chains, one per seed, in lockstep.

    Each chain owns its generator, so chain ``i`` is identical to a single
    run with ``seeds[i]``.  When ``target`` is given the squared distance of
    every iterate ``omega_0 .. omega_K`` is returned as an array of shape
    (K + 1, n_chains).
    """
    if check:
        config.check(constants)
    if len(inits) != len(seeds):
        raise InvalidInputError("need one initial point per seed")
    dz, dx = problem.features.dim_z, problem.features.dim_xi
    rz, rx = constants.zeta_radius, constants.xi_radius
    step = np.concatenate([np.full(dz, config.eta_zeta), np.full(dx, -config.eta_xi)])
    cur = np.array([np.concatenate([w.zeta, w.xi]) for w in inits], dtype=float)
    if cur.shape[1] != dz + dx:
        raise InvalidInputError("initial point has the wrong dimension")
    cur = _project(cur, dz, rz, rx)
    star = None if target is None else np.concatenate([target.zeta, target.xi])
    hist = []
    if star is not None:
        hist.append(np.sum((cur - star) ** 2, axis=1))
    K = config.K
    if K > 0:
        D = dz + dx
        if chunk is None:
            chunk = int(max(8, min(1024, 2 ** 21 // max(1, D * D * len(seeds)))))
        stream = _BatchStream(problem, policy, config.batch_size,
                              [np.random.default_rng(s) for s in seeds], chunk)
        A0, b0 = stream.draw(1, 1)
        g0 = b0[0, 0] + _apply(A0[0, 0], cur)
        prev, cur = cur, _project(cur + step * g0, dz, rz, rx)
        m = g0
        if star is not None:
            hist.append(np.sum((cur - star) ** 2, axis=1))
        left = K - 1
        while left > 0:
            n = min(chunk, left)
            A, b = stream.draw(2, n)
            for j in range(n):
                A1, A2 = A[j, 0], A[j, 1]
                g = m + _apply(A1, cur - prev)
                half = _project(cur + step * g, dz, rz, rx)
                gh = m + _apply(A2, half - prev)
                new = _project(cur + step * gh, dz, rz, rx)
                m = b[j, 0] + _apply(A1, cur)
                prev, cur = cur, new
                if star is not None:
                    hist.append(np.sum((cur - star) ** 2, axis=1))
            left -= n
        if not np.all(np.isfinite(cur)):
            raise NumericalFailure("extragradient iterate became non-finite")
    out = [SaddleIterate(row[:dz].copy(), row[dz:].copy(), rz, rx) for row in cur]
    return (out, np.array(hist)) if star is not None else out


def svreb(problem: LinearProblem, policy: SoftmaxPolicy, constants: ProblemConstants,
          config: SvrebConfig, init: SaddleIterate, seed=None, *, check: bool = True) -> OracleResult:
    """Variance-reduced extragradient with fresh mini-batches; ``K`` updates from ``init``."""
    (it,) = svreb_batch(problem, policy, constants, config, [init], [seed], check=check)
    return OracleResult(it, config.samples())


def oracle_budget(beta: float, c: float, constants: ProblemConstants, kind: str = "svreb", *,
                  eta_zeta: float | None = None, eta_xi: float | None = None,
                  lsq_multiplier: float = 20.0):
    """Budgets meeting the contract at ``(beta, c)``.

    Extragradient: ``K`` is the smaller of the step counts that push the
    contraction term below ``beta/2`` of the initial error or below ``c/2``
    outright, and ``|N|`` pushes the noise term below ``c/2``.  Least
    squares: ``n_all = multiplier * (dim_z + dim_xi) / c``.
    """
    if not 0.0 <= beta < 1.0:
        raise InvalidInputError("beta must lie in [0, 1)")
    if c <= 0:
        raise InvalidInputError("c must be positive")
    if kind == "least_square":
        d = constants_dim(constants)
        return LsqConfig(int(math.ceil(lsq_multiplier * d / c)))
    if kind != "svreb":
        raise InvalidInputError(f"unknown oracle kind {kind!r}")
    ez, ex = theorem_step_sizes(constants)
    ez = ez if eta_zeta is None else eta_zeta
    ex = ex if eta_xi is None else eta_xi
    rho = svreb_rate(constants, ez, ex)
    log1m = math.log1p(-rho)
    diam2 = 4 * (constants.zeta_radius ** 2 + constants.xi_radius ** 2)
    K_c = math.ceil(math.log(c / (2 * 2.01 * diam2)) / log1m) if c < 2 * 2.01 * diam2 else 1
    K = K_c
    if beta > 0:
        K = min(K, math.ceil(math.log(beta / (2 * 2.01)) / log1m))
    K = max(1, int(K))
    size = 16 * constants.sigma ** 2 / (rho * c) * (ez / constants.mu_zeta + ex / constants.mu_xi)
    return SvrebConfig(K, ez, ex, max(1, int(math.ceil(size))))


def constants_dim(constants: ProblemConstants) -> int:
    return int(constants.dim_z + constants.dim_xi)


class LeastSquareOracle:
    kind = "least_square"

    def __init__(self, config: LsqConfig):
        self.config = config

    def __call__(self, problem, policy, constants, init, seed=None) -> OracleResult:
        return least_square_oracle(problem, policy, constants, self.config, seed)


class SvrebOracle:
    kind = "svreb"

    def __init__(self, config: SvrebConfig, check: bool = True):
        self.config = config
        self.check = check

    def __call__(self, problem, policy, constants, init, seed=None) -> OracleResult:
        return svreb(problem, policy, constants, self.config, init, seed, check=self.check)


COMPARISON_HEADER = ("oracle", "n_samples", "mean_err", "std_err", "wall_ms")


class ComparisonRow(NamedTuple):
    oracle: str
    n_samples: int
    mean_err: float
    std_err: float
    wall_ms: float


def _svreb_split(budget: int, constants: ProblemConstants, eta_zeta: float, eta_xi: float,
                 tol: float) -> SvrebConfig:
    """Fixed step count from the contraction target, batch size from what is left of the budget."""
    rho = svreb_rate(constants, eta_zeta, eta_xi)
    K_need = max(1, math.ceil(math.log(tol) / math.log1p(-rho)))
    K_max = max(1, (budget - 2) // 4 + 1)
    K = min(K_need, K_max)
    b = max(1, budget // (2 + 4 * (K - 1)))
    return SvrebConfig(K, eta_zeta, eta_xi, b)


def compare_oracles(problem: LinearProblem, policy: SoftmaxPolicy, constants: ProblemConstants,
                    budgets: Sequence[int], seeds: Sequence[int], *, oracles=("least_square", "svreb"),
                    contraction_tol: float = 1e-4, timer=time.perf_counter) -> list[ComparisonRow]:
    """Root-mean-square error of each oracle at each sample budget, over ``seeds``.

    The extragradient oracle starts at the origin with the admissible step
    sizes, runs enough steps to shrink the initial error by
    ``contraction_tol`` (or as many as the budget allows) and spends the rest
    of the budget on batch size.  ``mean_err`` is the root mean squared
    error; ``std_err`` is the standard deviation of the per-seed errors.
    """
    star = saddle_target(problem, policy)
    dz, dx = problem.features.dim_z, problem.features.dim_xi
    zero = SaddleIterate(np.zeros(dz), np.zeros(dx))
    ez, ex = theorem_step_sizes(constants)
    rows = []
    for kind in oracles:
        for budget in budgets:
            budget = int(budget)
            t0 = timer()
            if kind == "least_square":
                cfg = LsqConfig(budget)
                its = [least_square_oracle(problem, policy, constants, cfg, s).iterate for s in seeds]
                used = budget
            elif kind == "svreb":
                cfg = _svreb_split(budget, constants, ez, ex, contraction_tol)
                its = svreb_batch(problem, policy, constants, cfg, [zero] * len(seeds), list(seeds))
                used = cfg.samples()
            else:
                raise InvalidInputError(f"unknown oracle kind {kind!r}")
            wall = (timer() - t0) * 1000.0
            err = np.sqrt([it.distance2(star) for it in its])
            rows.append(ComparisonRow(kind, used, float(np.sqrt(np.mean(err ** 2))),
                                      float(np.std(err)), wall))
    return rows
