"""Experiment configuration: validation, hashing and instance construction.

A configuration is a JSON object.  Every field is checked before any
computation and unknown keys are rejected.  File references are resolved by
the command line front end before validation, so this module does no I/O.

    mdp_spec        {"random": {"n_states", "n_actions", "gamma", "seed", ...}}
                    or {"transition", "reward", "nu0", "gamma"}
    feature_family  "onehot" or {"random": {"dim_z", "dim_xi", "seed"}}
    behavior        "uniform" or {"mu": [...]} (flattened s * A + a)
    dataset_n       number of offline tuples
    data_mode       "dataset" (empirical law) or "exact" (infinite data)
    reward_mode     "deterministic" or "bernoulli"
    lambda_w, lambda_Q, algorithm, oracle_kind, epsilon, seeds, output_dir
    overrides       schedule constants pinned by name
    budgets         sample budgets for the oracle comparison
    n_probe_policies, bias_probe_policies, probe_seed, policy_seed, timing
    max_iters       refuse schedules with more outer iterations than this
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .errors import InvalidInputError
from .linear import FeatureMaps, LinearProblem, onehot_features, random_features
from .mdp import (
    REWARD_MODES,
    BehaviorDistribution,
    OfflineDataset,
    SoftmaxPolicy,
    TabularMdp,
    TransitionData,
    random_mdp,
    random_policy,
    sample_dataset,
)

ALGORITHMS = ("psreda", "ospim")
ORACLE_KINDS = ("least_square", "svreb")
DATA_MODES = ("dataset", "exact")


@dataclass(frozen=True)
class ExperimentConfig:
    mdp_spec: dict
    feature_family: Any = "onehot"
    behavior: Any = "uniform"
    dataset_n: int = 1000
    data_mode: str = "dataset"
    reward_mode: str = "deterministic"
    lambda_w: float = 1.0
    lambda_Q: float = 1.0
    algorithm: str = "ospim"
    oracle_kind: str = "least_square"
    epsilon: float = 0.25
    seeds: tuple = (0,)
    output_dir: str = "out"
    overrides: dict = field(default_factory=dict)
    budgets: tuple = (1000, 4000, 16000)
    n_probe_policies: int = 16
    bias_probe_policies: int = 64
    probe_seed: int = 0
    policy_seed: int | None = None
    max_iters: int = 100000
    timing: bool = False

    def as_dict(self) -> dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        out["budgets"] = list(self.budgets)
        return out

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form; ``output_dir`` and ``timing`` do not change results and are excluded."""
        payload = {k: v for k, v in self.as_dict().items() if k not in ("output_dir", "timing")}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _number(raw: dict, key: str, kind=float, *, positive=False, nonneg=False):
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidInputError(f"{key} must be a number")
    if kind is int and (not float(value).is_integer()):
        raise InvalidInputError(f"{key} must be an integer")
    value = kind(value)
    if not math.isfinite(value):
        raise InvalidInputError(f"{key} must be finite")
    if positive and value <= 0:
        raise InvalidInputError(f"{key} must be positive")
    if nonneg and value < 0:
        raise InvalidInputError(f"{key} must be non-negative")
    return value


def _choice(raw: dict, key: str, options):
    if raw[key] not in options:
        raise InvalidInputError(f"{key} must be one of {options}, got {raw[key]!r}")
    return raw[key]


def _check_keys(obj: dict, allowed, where: str) -> None:
    if not isinstance(obj, dict):
        raise InvalidInputError(f"{where} must be an object")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise InvalidInputError(f"unknown keys in {where}: {sorted(unknown)}")


_RANDOM_MDP_KEYS = ("n_states", "n_actions", "gamma", "seed", "concentration", "uniform_start")
_EXPLICIT_MDP_KEYS = ("transition", "reward", "nu0", "gamma")
_MDP_SIZE_KEYS = ("n_states", "n_actions")


def _validate_mdp_spec(spec) -> dict:
    if not isinstance(spec, dict) or len(spec) == 0:
        raise InvalidInputError("mdp_spec must be an object")
    if "random" in spec:
        _check_keys(spec, ("random",), "mdp_spec")
        r = spec["random"]
        _check_keys(r, _RANDOM_MDP_KEYS, "mdp_spec.random")
        for key in ("n_states", "n_actions", "gamma", "seed"):
            if key not in r:
                raise InvalidInputError(f"mdp_spec.random needs {key}")
        for key in ("n_states", "n_actions"):
            _number(r, key, int, positive=True)
        _number(r, "seed", int, nonneg=True)
        gamma = _number(r, "gamma")
        if not 0 <= gamma < 1:
            raise InvalidInputError("gamma must lie in [0, 1)")
        return {"random": dict(r)}
    _check_keys(spec, _EXPLICIT_MDP_KEYS + _MDP_SIZE_KEYS, "mdp_spec")
    missing = set(_EXPLICIT_MDP_KEYS) - set(spec)
    if missing:
        raise InvalidInputError(f"mdp_spec needs {sorted(missing)}")
    build_mdp(spec)
    return dict(spec)


def _mdp_pairs(spec: dict) -> int:
    if "random" in spec:
        return int(spec["random"]["n_states"]) * int(spec["random"]["n_actions"])
    return build_mdp(spec).n_pairs


def build_mdp(spec: dict) -> TabularMdp:
    """MDP from a random recipe or from explicit arrays (the ``mdp.json`` layout)."""
    if "random" in spec:
        r = spec["random"]
        return random_mdp(int(r["n_states"]), int(r["n_actions"]), float(r["gamma"]), int(r["seed"]),
                          concentration=float(r.get("concentration", 1.0)),
                          uniform_start=bool(r.get("uniform_start", False)))
    try:
        mdp = TabularMdp(np.array(spec["transition"], dtype=float), np.array(spec["reward"], dtype=float),
                         float(spec["gamma"]), np.array(spec["nu0"], dtype=float))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidInputError):
            raise
        raise InvalidInputError(f"malformed mdp arrays: {exc}") from exc
    for key, value in (("n_states", mdp.n_states), ("n_actions", mdp.n_actions)):
        if key in spec and spec[key] != value:
            raise InvalidInputError(f"mdp {key} = {spec[key]} does not match the arrays ({value})")
    return mdp


def mdp_to_dict(mdp: TabularMdp) -> dict:
    return {"n_states": mdp.n_states, "n_actions": mdp.n_actions, "gamma": mdp.gamma,
            "nu0": mdp.nu0.tolist(), "transition": mdp.transition.tolist(), "reward": mdp.reward_mean.tolist()}


def _validate_features(ff):
    if ff == "onehot":
        return ff
    if isinstance(ff, dict) and "random" in ff:
        _check_keys(ff, ("random",), "feature_family")
        r = ff["random"]
        _check_keys(r, ("dim_z", "dim_xi", "seed", "shared"), "feature_family.random")
        for key in ("dim_z", "dim_xi", "seed"):
            if key not in r:
                raise InvalidInputError(f"feature_family.random needs {key}")
        _number(r, "dim_z", int, positive=True)
        _number(r, "dim_xi", int, positive=True)
        _number(r, "seed", int, nonneg=True)
        return {"random": dict(r)}
    raise InvalidInputError("feature_family must be 'onehot' or {'random': {...}}")


def build_features(ff, n_states: int, n_actions: int) -> FeatureMaps:
    if ff == "onehot":
        return onehot_features(n_states, n_actions)
    r = ff["random"]
    return random_features(n_states, n_actions, int(r["dim_z"]), int(r["dim_xi"]), int(r["seed"]),
                           bool(r.get("shared", False)))


def _validate_behavior(b):
    if b == "uniform":
        return b
    if isinstance(b, dict) and set(b) == {"mu"}:
        mu = b["mu"]
        if not isinstance(mu, list):
            raise InvalidInputError("behavior.mu must be a list")
        BehaviorDistribution(np.array(mu, dtype=float))
        return {"mu": list(mu)}
    raise InvalidInputError("behavior must be 'uniform' or {'mu': [...]}")


def build_behavior(b, n_states: int, n_actions: int) -> BehaviorDistribution:
    if b == "uniform":
        return BehaviorDistribution.uniform(n_states, n_actions)
    mu = np.array(b["mu"], dtype=float)
    if mu.size != n_states * n_actions:
        raise InvalidInputError(f"behavior.mu must have {n_states * n_actions} entries")
    return BehaviorDistribution(mu)


def _int_list(raw: dict, key: str, *, positive=False) -> tuple:
    vals = raw[key]
    if not isinstance(vals, list) or not vals:
        raise InvalidInputError(f"{key} must be a non-empty list")
    out = []
    for v in vals:
        if isinstance(v, bool) or not isinstance(v, int) or v < (1 if positive else 0):
            raise InvalidInputError(f"{key} entries must be {'positive' if positive else 'non-negative'} integers")
        out.append(int(v))
    return tuple(out)


def _override_value(key: str, value):
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise InvalidInputError(f"override {key} must be a number or string")
    return value


def validate_config(raw: dict) -> ExperimentConfig:
    """Check every field of a resolved configuration object."""
    names = [f for f in ExperimentConfig.__dataclass_fields__]
    _check_keys(raw, names, "config")
    if "mdp_spec" not in raw:
        raise InvalidInputError("config needs mdp_spec")
    raw = {**{k: v for k, v in ExperimentConfig(mdp_spec={}).as_dict().items() if k != "mdp_spec"}, **raw}
    mdp_spec = _validate_mdp_spec(raw["mdp_spec"])
    out = dict(
        mdp_spec=mdp_spec,
        feature_family=_validate_features(raw["feature_family"]),
        behavior=_validate_behavior(raw["behavior"]),
        dataset_n=_number(raw, "dataset_n", int, positive=True),
        data_mode=_choice(raw, "data_mode", DATA_MODES),
        reward_mode=_choice(raw, "reward_mode", REWARD_MODES),
        lambda_w=_number(raw, "lambda_w", positive=True),
        lambda_Q=_number(raw, "lambda_Q", positive=True),
        algorithm=_choice(raw, "algorithm", ALGORITHMS),
        oracle_kind=_choice(raw, "oracle_kind", ORACLE_KINDS),
        epsilon=_number(raw, "epsilon", positive=True),
        seeds=_int_list(raw, "seeds"),
        budgets=_int_list(raw, "budgets", positive=True),
        n_probe_policies=_number(raw, "n_probe_policies", int, nonneg=True),
        bias_probe_policies=_number(raw, "bias_probe_policies", int, positive=True),
        probe_seed=_number(raw, "probe_seed", int, nonneg=True),
        policy_seed=None if raw["policy_seed"] is None else _number(raw, "policy_seed", int, nonneg=True),
        max_iters=_number(raw, "max_iters", int, positive=True),
    )
    if not isinstance(raw["output_dir"], str) or not raw["output_dir"]:
        raise InvalidInputError("output_dir must be a non-empty string")
    if not isinstance(raw["timing"], bool):
        raise InvalidInputError("timing must be true or false")
    if not isinstance(raw["overrides"], dict):
        raise InvalidInputError("overrides must be an object")
    overrides = {str(k): _override_value(k, v) for k, v in sorted(raw["overrides"].items())}
    if isinstance(out["behavior"], dict):
        n_pairs = _mdp_pairs(mdp_spec)
        if len(out["behavior"]["mu"]) != n_pairs:
            raise InvalidInputError(f"behavior.mu must have {n_pairs} entries")
    if out["algorithm"] == "psreda" and out["epsilon"] >= 1:
        raise InvalidInputError("epsilon must be < 1")
    return ExperimentConfig(**out, output_dir=raw["output_dir"], timing=raw["timing"], overrides=overrides)


@dataclass(frozen=True, eq=False)
class Instance:
    mdp: TabularMdp
    behavior: BehaviorDistribution
    features: FeatureMaps
    dataset: OfflineDataset | None
    data: TransitionData
    exact_data: TransitionData
    problem: LinearProblem
    exact_problem: LinearProblem
    policy: SoftmaxPolicy


def build_instance(cfg: ExperimentConfig, seed: int, dataset: OfflineDataset | None = None) -> Instance:
    """Everything one run needs; the dataset is drawn with ``seed`` unless supplied."""
    mdp = build_mdp(cfg.mdp_spec)
    S, A = mdp.n_states, mdp.n_actions
    behavior = build_behavior(cfg.behavior, S, A)
    features = build_features(cfg.feature_family, S, A)
    if features.n_pairs != S * A:
        raise InvalidInputError("feature rows do not match the number of state-action pairs")
    exact = TransitionData.exact(mdp, behavior, cfg.reward_mode)
    if cfg.data_mode == "exact":
        dataset, data = None, exact
    else:
        if dataset is None:
            dataset = sample_dataset(mdp, behavior, cfg.dataset_n, seed, cfg.reward_mode)
        data = TransitionData.from_dataset(dataset)
    problem = LinearProblem(data, features, mdp.gamma, cfg.lambda_w, cfg.lambda_Q)
    exact_problem = LinearProblem(exact, features, mdp.gamma, cfg.lambda_w, cfg.lambda_Q)
    if cfg.policy_seed is None:
        policy = SoftmaxPolicy.uniform(S, A)
    else:
        policy = random_policy(S, A, np.random.default_rng(cfg.policy_seed))
    return Instance(mdp, behavior, features, dataset, data, exact, problem, exact_problem, policy)


def apply_overrides(raw: dict, pairs) -> dict:
    """Apply ``key=value`` strings: top-level fields are replaced, anything else lands in ``overrides``.

    Values are parsed as JSON when possible and kept as strings otherwise;
    dotted keys address nested objects (``mdp_spec.random.seed=3``).
    """
    raw = json.loads(json.dumps(raw))
    top = set(ExperimentConfig.__dataclass_fields__)
    for pair in pairs:
        if "=" not in pair:
            raise InvalidInputError(f"override {pair!r} is not key=value")
        key, text = pair.split("=", 1)
        key = key.strip()
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        head, *rest = key.split(".")
        if head in top and head != "overrides":
            target = raw
            path = [head] + rest
            for part in path[:-1]:
                target = target.setdefault(part, {})
                if not isinstance(target, dict):
                    raise InvalidInputError(f"cannot override inside {key!r}")
            target[path[-1]] = value
        else:
            name = key[len("overrides."):] if head == "overrides" else key
            raw.setdefault("overrides", {})[name] = value
    return raw
