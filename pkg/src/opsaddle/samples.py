"""Seven-tuple samples and weighted sample sets.

A single sample is ``(s, a, r, s', a', s0, a0)`` where ``(s, a, r, s')`` is a
transition from the data law, ``a' ~ pi(.|s')``, ``s0 ~ nu_D`` and
``a0 ~ pi(.|s0)``.  The start pair ``(s0, a0)`` is drawn independently of the
transition, and every single-sample estimator is a sum of a transition term
and a start term.  A mini-batch average therefore depends on the batch only
through the two count vectors (transition categories, start categories),
which are multinomial.  ``SampleSet`` stores exactly those weighted
categories, so a batch of size ``b`` costs ``O(#categories)`` regardless of
``b`` while having the same law as ``b`` i.i.d. tuples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError
from .mdp import SoftmaxPolicy, TransitionData


# Above this size multinomial counts overflow int64; the frequencies are then
# drawn from their Gaussian limit with the exact multinomial covariance.
GAUSSIAN_BATCH_SIZE = 10 ** 15


def batch_frequencies(n: int, p: np.ndarray, rng: np.random.Generator, size=None) -> np.ndarray:
    """Category frequencies of ``n`` i.i.d. draws from ``p`` (shape ``size + p.shape``)."""
    p = np.asarray(p, dtype=float)
    p = p / p.sum()
    n = int(n)
    if n < GAUSSIAN_BATCH_SIZE:
        return rng.multinomial(n, p, size=size) / n
    shape = (() if size is None else tuple(np.atleast_1d(size))) + p.shape
    z = rng.standard_normal(shape) * np.sqrt(p)
    return p + (z - p * z.sum(axis=-1, keepdims=True)) / np.sqrt(n)


class SampleTuple(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    a_next: int
    s0: int
    a0: int


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Weighted transition part and start part of a batch.

    ``weight`` and ``weight0`` each sum to one.  ``size`` is the nominal
    number of i.i.d. samples the set stands for (1 for a single tuple, ``b``
    for a drawn batch, 0 for an exact enumeration).
    """

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    a_next: np.ndarray
    weight: np.ndarray
    s0: np.ndarray
    a0: np.ndarray
    weight0: np.ndarray
    size: int

    @classmethod
    def from_tuples(cls, tuples: Sequence[SampleTuple]) -> "SampleSet":
        if len(tuples) == 0:
            raise InvalidInputError("empty batch")
        cols = np.array([tuple(t) for t in tuples], dtype=float).T
        s, a, r, sn, an, s0, a0 = cols
        n = len(tuples)
        w = np.full(n, 1.0 / n)
        ints = lambda x: x.astype(np.int64)
        return cls(ints(s), ints(a), r, ints(sn), ints(an), w, ints(s0), ints(a0), w.copy(), n)

    @classmethod
    def enumerate(cls, data: TransitionData, policy: SoftmaxPolicy) -> "SampleSet":
        """Every outcome weighted by its probability: batch averages become exact expectations."""
        (s, a, r, sn, an, w), (s0, a0, w0) = _categories(data, policy)
        keep, keep0 = w > 0, w0 > 0
        return cls(s[keep], a[keep], r[keep], sn[keep], an[keep], w[keep],
                   s0[keep0], a0[keep0], w0[keep0], 0)

    @classmethod
    def draw(cls, data: TransitionData, policy: SoftmaxPolicy, size: int,
             rng: np.random.Generator) -> "SampleSet":
        """Counts of ``size`` i.i.d. seven-tuples, stored as weights."""
        if size < 1:
            raise InvalidInputError("batch size must be at least 1")
        (s, a, r, sn, an, p), (s0, a0, p0) = _categories(data, policy)
        c = batch_frequencies(size, p, rng)
        c0 = batch_frequencies(size, p0, rng)
        keep, keep0 = c != 0, c0 != 0
        return cls(s[keep], a[keep], r[keep], sn[keep], an[keep], c[keep],
                   s0[keep0], a0[keep0], c0[keep0], int(size))

    def outcomes(self):
        """Joint (transition, start) outcomes with product weights, for exhaustive checks."""
        for i in range(self.weight.size):
            for j in range(self.weight0.size):
                yield (SampleTuple(int(self.s[i]), int(self.a[i]), float(self.r[i]), int(self.s_next[i]),
                                   int(self.a_next[i]), int(self.s0[j]), int(self.a0[j])),
                       float(self.weight[i] * self.weight0[j]))


def _categories(data: TransitionData, policy: SoftmaxPolicy):
    A = data.n_actions
    probs = policy.probs
    n_out = data.n_outcomes
    a_next = np.tile(np.arange(A), n_out)
    rep = lambda x: np.repeat(x, A)
    w = (data.prob[:, None] * probs[data.s_next]).reshape(-1)
    trans = (rep(data.s), rep(data.a), rep(data.r), rep(data.s_next), a_next, w)
    s0 = np.repeat(np.arange(data.n_states), A)
    a0 = np.tile(np.arange(A), data.n_states)
    start = (s0, a0, (data.nu[:, None] * probs).reshape(-1))
    return trans, start


@dataclass(frozen=True, eq=False)
class TransitionBatch:
    """Policy-free part of a batch: counts of transition outcomes and start states.

    The next action ``a'`` and the start action ``a0`` are integrated out
    exactly under whichever policy the batch is evaluated at.  Evaluating the
    same batch at two policies then gives a difference of two unbiased
    estimators, which recursive estimators need.
    """

    weight: np.ndarray
    weight0: np.ndarray
    size: int

    @classmethod
    def exact(cls, data: TransitionData) -> "TransitionBatch":
        return cls(np.asarray(data.prob, dtype=float), np.asarray(data.nu, dtype=float), 0)

    @classmethod
    def draw(cls, data: TransitionData, size: int, rng: np.random.Generator) -> "TransitionBatch":
        if size < 1:
            raise InvalidInputError("batch size must be at least 1")
        return cls(batch_frequencies(size, data.prob, rng), batch_frequencies(size, data.nu, rng), int(size))

    def under(self, data: TransitionData, policy: SoftmaxPolicy) -> SampleSet:
        """The equivalent weighted seven-tuple set under ``policy``."""
        (s, a, r, sn, an, _), (s0, a0, _) = _categories(data, policy)
        w = (self.weight[:, None] * policy.probs[data.s_next]).reshape(-1)
        w0 = (self.weight0[:, None] * policy.probs).reshape(-1)
        keep, keep0 = w != 0, w0 != 0
        return SampleSet(s[keep], a[keep], r[keep], sn[keep], an[keep], w[keep],
                         s0[keep0], a0[keep0], w0[keep0], self.size)
