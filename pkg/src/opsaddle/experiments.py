"""Experiment orchestration behind the command line: pure functions from a validated config to results.

Nothing here touches the file system; :mod:`opsaddle.cli` serializes what
these functions return.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .bias import bias_report, measured_gap, reg_bias_vs_lambda
from .config import ExperimentConfig, Instance, build_instance
from .errors import InvalidInputError
from .lagrangian import (
    closed_form_saddle,
    envelope_full_gradient,
    grad_batch,
    grad_exact,
    grad_zeta_xi,
    kkt_saddle,
    loss,
)
from .linear import ProblemConstants, compute_constants, probe_policies
from .mdp import SoftmaxPolicy, concentrability, expected_return, policy_gradient
from .oracles import LsqConfig, compare_oracles, least_square_oracle, saddle_target
from .ospim import OspimConfig, envelope_range, run_ospim
from .psreda import PsredaConfig, objective_range, run_psreda, small_angle_violations
from .samples import SampleSet
from .trace import RunTrace

# Run-level knobs accepted in ``overrides`` next to the schedule fields.
RUN_KEYS = {"psreda": ("zeta0_scale", "zeta0_seed"), "ospim": ()}


def _coerce(cls, key: str, value):
    kind = {f.name: f.type for f in fields(cls)}[key]
    if kind == "int":
        if isinstance(value, str) or not float(value).is_integer():
            raise InvalidInputError(f"override {key} must be an integer")
        return int(value)
    if kind == "float":
        if isinstance(value, str):
            raise InvalidInputError(f"override {key} must be a number")
        return float(value)
    if kind == "bool":
        if value in (0, 1, "true", "false"):
            return value in (1, "true")
        raise InvalidInputError(f"override {key} must be a boolean")
    return value


def split_overrides(cfg: ExperimentConfig) -> tuple[dict, dict]:
    """Schedule-field overrides (typed) and run-level knobs, for ``cfg.algorithm``."""
    cls = PsredaConfig if cfg.algorithm == "psreda" else OspimConfig
    names = {f.name for f in fields(cls)}
    run_keys = RUN_KEYS[cfg.algorithm]
    sched, knobs = {}, {}
    for key, value in cfg.overrides.items():
        if key in run_keys:
            knobs[key] = value
        elif key in names and key not in ("epsilon", "oracle_kind"):
            sched[key] = _coerce(cls, key, value)
        else:
            raise InvalidInputError(f"unknown override {key!r} for {cfg.algorithm}")
    return sched, knobs


def instance_constants(cfg: ExperimentConfig, inst: Instance, zeta_ball: str = "R_zeta") -> ProblemConstants:
    S, A = inst.mdp.n_states, inst.mdp.n_actions
    probes = probe_policies(S, A, cfg.n_probe_policies, cfg.probe_seed, include=(inst.policy,))
    return compute_constants(inst.problem, probes, zeta_ball=zeta_ball)


def _zeta0(knobs: dict, dim: int, radius: float) -> np.ndarray:
    scale = float(knobs.get("zeta0_scale", 0.0))
    if not 0 <= scale <= 1:
        raise InvalidInputError("zeta0_scale must lie in [0, 1]")
    if scale == 0:
        return np.zeros(dim)
    direction = np.random.default_rng(int(knobs.get("zeta0_seed", 0))).standard_normal(dim)
    return scale * radius * direction / np.linalg.norm(direction)


def _check_iters(cfg: ExperimentConfig, name: str, value: int) -> None:
    if value > cfg.max_iters:
        raise InvalidInputError(f"schedule needs {name} = {value:.3g} outer iterations, above max_iters = "
                                f"{cfg.max_iters}; pin {name} with an override or raise max_iters")


@dataclass
class SeedResult:
    seed: int
    trace: RunTrace
    result: dict
    constants: ProblemConstants
    schedule: dict


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedResult:
    """One seeded run of ``cfg.algorithm``; the dataset is drawn with the same seed."""
    sched, knobs = split_overrides(cfg)
    inst = build_instance(cfg, seed)
    theta0 = inst.policy.theta
    if cfg.algorithm == "psreda":
        constants = instance_constants(cfg, inst, "R_prime")
        zeta0 = _zeta0(knobs, inst.features.dim_z, constants.R_prime)
        delta = objective_range(inst.problem, constants, theta0, zeta0)
        config = PsredaConfig.from_constants(constants, cfg.epsilon, delta, **sched)
        _check_iters(cfg, "K", config.K)
        theta_hat, zeta_hat, trace = run_psreda(inst.problem, config, seed, theta0=theta0, zeta0=zeta0)
        policy_hat = SoftmaxPolicy(theta_hat, inst.mdp.n_actions)
        g_theta, g_zeta, _ = envelope_full_gradient(inst.problem, policy_hat, zeta_hat, config.R_xi)
        result = dict(theta_hat=theta_hat.tolist(), zeta_hat=zeta_hat.tolist(),
                      envelope_grad_norm_hat=float(np.sqrt(g_theta @ g_theta + g_zeta @ g_zeta)),
                      small_angle_violations=small_angle_violations(trace),
                      proj_active_steps=int(trace.column("proj_active").sum()) if len(trace) else 0)
    else:
        constants = instance_constants(cfg, inst, "R_zeta")
        delta = envelope_range(inst.problem, constants, theta0)
        config = OspimConfig.from_constants(constants, cfg.epsilon, delta, cfg.oracle_kind, **sched)
        _check_iters(cfg, "T", config.T)
        theta_hat, trace = run_ospim(inst.problem, config, seed, constants=constants, mdp=inst.mdp,
                                     theta0=theta0)
        policy_hat = SoftmaxPolicy(theta_hat, inst.mdp.n_actions)
        result = dict(theta_hat=theta_hat.tolist(),
                      measured_gap_hat=measured_gap(inst.problem, inst.mdp, policy_hat, constants))
    result["J_hat"] = expected_return(inst.mdp, policy_hat)
    result["J_theta0"] = expected_return(inst.mdp, inst.policy)
    result["objective_range"] = float(delta)
    result.update({k: trace.meta[k] for k in sorted(trace.meta) if k != "seed"})
    schedule = {f.name: getattr(config, f.name) for f in fields(config)}
    return SeedResult(seed, trace, result, constants, schedule)


def _stats(values) -> dict:
    arr = np.asarray(values, dtype=float)
    return {"mean": float(np.mean(arr)), "std": float(np.std(arr))}


AGGREGATE_RESULT_KEYS = ("J_hat", "envelope_grad_norm_hat", "measured_gap_hat", "final_samples")


def aggregate(traces: list[RunTrace], results: list[dict]) -> dict:
    """Across-seed mean and population std of the final row, the per-run row mean, and scalar results.

    ``final``: last trace row of each seed; ``running_mean``: mean over the
    rows of each seed; ``result``: scalar per-seed outcomes.
    """
    if not traces:
        raise InvalidInputError("nothing to aggregate")
    cols = [c for c in traces[0].columns if c != "iter"]
    out = {"n_seeds": len(traces), "final": {}, "running_mean": {}, "result": {}}
    nonempty = [t for t in traces if len(t)]
    for c in cols:
        if nonempty:
            out["final"][c] = _stats([t.column(c)[-1] for t in nonempty])
            out["running_mean"][c] = _stats([np.mean(t.column(c)) for t in nonempty])
    for key in AGGREGATE_RESULT_KEYS:
        if all(key in r for r in results):
            out["result"][key] = _stats([r[key] for r in results])
    return out


def oracle_comparison(cfg: ExperimentConfig, seed: int, timer=None) -> list:
    """Error of both oracles at each budget in ``cfg.budgets`` over ``cfg.seeds``."""
    inst = build_instance(cfg, seed)
    constants = instance_constants(cfg, inst)
    kwargs = {} if timer is None else {"timer": timer}
    return compare_oracles(inst.problem, inst.policy, constants, cfg.budgets, cfg.seeds, **kwargs)


def bias_summary(cfg: ExperimentConfig, seed: int) -> dict:
    """Bias terms for the evaluation policy, plus the regularization sweep at halved weights."""
    inst = build_instance(cfg, seed)
    constants = instance_constants(cfg, inst)
    S, A = inst.mdp.n_states, inst.mdp.n_actions
    probes = probe_policies(S, A, cfg.bias_probe_policies, cfg.probe_seed + 1, include=(inst.policy,))
    C = concentrability(inst.mdp, inst.behavior, probes)
    report = bias_report(inst.exact_problem, inst.problem, inst.mdp, inst.behavior, inst.policy, constants,
                         probes, C=C, seed=seed)
    lam = constants.lambda_max
    sweep = reg_bias_vs_lambda(inst.mdp, inst.behavior, inst.policy, [lam * 2.0 ** -k for k in range(4)], C)
    return {"report": report.as_dict(), "reg_sweep": [row._asdict() for row in sweep]}


class Check(NamedTuple):
    name: str
    value: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.value <= self.tol)


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def _fd(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    out = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def invariant_checks(cfg: ExperimentConfig, seed: int, n_policies: int = 3) -> list[Check]:
    """Worst-case residuals of the core identities on the generated instance."""
    inst = build_instance(cfg, seed)
    problem, mdp = inst.problem, inst.mdp
    S, A, gamma = mdp.n_states, mdp.n_actions, problem.gamma
    lw, lq = problem.lambda_w, problem.lambda_q
    rng = np.random.default_rng(seed)
    policies = probe_policies(S, A, n_policies, cfg.probe_seed, include=(inst.policy,))
    worst = dict.fromkeys(("saddle_residual", "saddle_vs_kkt", "grad_fd", "policy_grad_fd",
                           "enumerated_mean", "lsq_exact"), 0.0)
    constants = instance_constants(cfg, inst)
    for pi in policies:
        dm = problem.derived(pi)
        zeta, xi = closed_form_saddle(dm, lw, lq, gamma)
        gz, gx = grad_zeta_xi(dm, zeta, xi, lw, lq, gamma)
        worst["saddle_residual"] = max(worst["saddle_residual"], float(np.linalg.norm(gz) + np.linalg.norm(gx)))
        kz, kx = kkt_saddle(dm, lw, lq, gamma)
        worst["saddle_vs_kkt"] = max(worst["saddle_vs_kkt"], _rel(np.r_[zeta, xi], np.r_[kz, kx]))

        z = rng.standard_normal(dm.u_R.size)
        x = rng.standard_normal(dm.u_nu.size)
        g = grad_exact(problem, pi, z, x)
        f_theta = lambda th: loss(problem.derived(SoftmaxPolicy(th, A)), z, x, lw, lq, gamma)
        f_zeta = lambda v: loss(dm, v, x, lw, lq, gamma)
        f_xi = lambda v: loss(dm, z, v, lw, lq, gamma)
        fd = np.r_[_fd(f_theta, pi.theta), _fd(f_zeta, z), _fd(f_xi, x)]
        worst["grad_fd"] = max(worst["grad_fd"], _rel(np.r_[g.g_theta, g.g_zeta, g.g_xi], fd))

        J = lambda th: expected_return(mdp, SoftmaxPolicy(th, A))
        worst["policy_grad_fd"] = max(worst["policy_grad_fd"], _rel(policy_gradient(mdp, pi), _fd(J, pi.theta)))

        e = grad_batch(SampleSet.enumerate(problem.data, pi), problem, pi, z, x)
        worst["enumerated_mean"] = max(worst["enumerated_mean"],
                                       _rel(np.r_[e.g_theta, e.g_zeta, e.g_xi], np.r_[g.g_theta, g.g_zeta, g.g_xi]))

        star = saddle_target(problem, pi)
        it = least_square_oracle(problem, pi, constants, LsqConfig(None)).iterate
        inside = (np.linalg.norm(star.zeta) <= constants.zeta_radius
                  and np.linalg.norm(star.xi) <= constants.xi_radius)
        if inside:
            worst["lsq_exact"] = max(worst["lsq_exact"], math.sqrt(it.distance2(star)))
    tols = {"saddle_residual": 1e-8, "saddle_vs_kkt": 1e-8, "grad_fd": 1e-5, "policy_grad_fd": 1e-5,
            "enumerated_mean": 1e-10, "lsq_exact": 1e-8}
    return [Check(k, worst[k], tols[k]) for k in worst]
