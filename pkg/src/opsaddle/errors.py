"""Exception hierarchy shared by the library and the command line front end."""

from __future__ import annotations


class OpsaddleError(Exception):
    """Base class for every error raised deliberately by this package."""

    exit_code = 1


class InvalidInputError(OpsaddleError, ValueError):
    """Malformed or out-of-domain input (maps to CLI exit code 2)."""

    exit_code = 2


class AssumptionViolation(OpsaddleError):
    """A modelling assumption failed on the supplied instance.

    ``assumption`` is the letter of the violated assumption: ``"A"`` policy
    smoothness, ``"B"`` feature-matrix singular floors, ``"C"`` coverage,
    ``"D"`` bounded variance.
    """

    exit_code = 3

    def __init__(self, assumption: str, message: str):
        super().__init__(f"assumption {assumption} violated: {message}")
        self.assumption = assumption


class NumericalFailure(OpsaddleError):
    """A linear solve or iteration produced a non-finite or singular result."""

    exit_code = 4


class EstimationError(NumericalFailure):
    """An empirical matrix estimate was singular; retrying with more samples may help."""
