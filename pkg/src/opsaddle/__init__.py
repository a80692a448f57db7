"""Offline policy optimization through linear saddle-point surrogates.

Tabular MDP ground truth (:mod:`opsaddle.mdp`), linear density-ratio and
Q-function classes (:mod:`opsaddle.linear`), the regularized Lagrangian and
its gradients (:mod:`opsaddle.lagrangian`), critic oracles
(:mod:`opsaddle.oracles`), the two outer methods (:mod:`opsaddle.psreda`,
:mod:`opsaddle.ospim`) and bias diagnostics (:mod:`opsaddle.bias`).
"""

from .errors import (
    AssumptionViolation,
    EstimationError,
    InvalidInputError,
    NumericalFailure,
    OpsaddleError,
)
from .linear import FeatureMaps, LinearProblem, compute_constants, onehot_features, random_features
from .mdp import BehaviorDistribution, SoftmaxPolicy, TabularMdp, TransitionData, random_mdp
from .ospim import OspimConfig, run_ospim
from .psreda import PsredaConfig, run_psreda

__version__ = "0.1.0"

__all__ = [
    "AssumptionViolation", "BehaviorDistribution", "EstimationError", "FeatureMaps", "InvalidInputError",
    "LinearProblem", "NumericalFailure", "OpsaddleError", "OspimConfig", "PsredaConfig", "SoftmaxPolicy",
    "TabularMdp", "TransitionData", "compute_constants", "onehot_features", "random_features", "random_mdp",
    "run_ospim", "run_psreda",
]
