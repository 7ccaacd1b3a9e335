"""Probability-vector arithmetic over a finite vocabulary.

Distributions are immutable numpy-backed values. Sparsification operators
return a :class:`SparseDistribution` that remembers how much mass was thrown
away, which is the quantity the conformal controller feeds on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

PROB_TOL = 1e-9


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TokenDistribution:
    """Dense probability vector indexed by token id ``0..V-1``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise InvalidArgument("probs must be a non-empty 1-d vector")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise InvalidArgument("probs must be finite and nonnegative")
        if abs(probs.sum() - 1.0) > PROB_TOL:
            raise InvalidArgument(f"probs sum to {probs.sum()!r}, not 1")
        object.__setattr__(self, "probs", _frozen(probs))

    @property
    def vocab_size(self) -> int:
        return self.probs.size

    def __len__(self):
        return self.probs.size

    def __getitem__(self, token):
        return self.probs[token]

    def __eq__(self, other):
        if not isinstance(other, TokenDistribution):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SparseDistribution:
    """Renormalized distribution restricted to ``support``.

    ``dropped_mass`` is the probability the source distribution placed
    outside the support before renormalization.
    """

    support: np.ndarray
    masses: np.ndarray
    dropped_mass: float

    def __post_init__(self):
        support = np.array(self.support, dtype=np.int64)
        masses = np.array(self.masses, dtype=np.float64)
        if support.ndim != 1 or support.size == 0 or support.shape != masses.shape:
            raise InvalidArgument("support and masses must be aligned non-empty vectors")
        if support[0] < 0 or np.any(np.diff(support) <= 0):
            raise InvalidArgument("support ids must be strictly increasing and nonnegative")
        if np.any(masses < 0) or abs(masses.sum() - 1.0) > PROB_TOL:
            raise InvalidArgument("masses must be a probability vector")
        dropped = float(self.dropped_mass)
        if not (-PROB_TOL <= dropped <= 1.0 + PROB_TOL):
            raise InvalidArgument(f"dropped_mass {dropped!r} outside [0, 1]")
        object.__setattr__(self, "support", _frozen(support))
        object.__setattr__(self, "masses", _frozen(masses))
        object.__setattr__(self, "dropped_mass", min(max(dropped, 0.0), 1.0))

    @property
    def k(self) -> int:
        return self.support.size


def _check_same_vocab(a: TokenDistribution, b: TokenDistribution):
    if a.vocab_size != b.vocab_size:
        raise InvalidArgument(f"vocab size mismatch: {a.vocab_size} vs {b.vocab_size}")


def tv_distance(a: TokenDistribution, b: TokenDistribution) -> float:
    """Total variation distance ``0.5 * sum |a - b|``."""
    _check_same_vocab(a, b)
    return 0.5 * float(np.abs(a.probs - b.probs).sum())


def apply_temperature(logits, temperature: float) -> TokenDistribution:
    """Softmax of ``logits / temperature``; ``temperature == 0`` is the argmax limit."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise InvalidArgument("logits must be a non-empty 1-d vector")
    if not np.all(np.isfinite(logits)):
        raise InvalidArgument("logits must be finite")
    if temperature < 0 or not np.isfinite(temperature):
        raise InvalidArgument(f"temperature must be >= 0, got {temperature!r}")
    if temperature == 0:
        probs = np.zeros_like(logits)
        probs[int(np.argmax(logits))] = 1.0
        return TokenDistribution(probs)
    z = logits / temperature
    z -= z.max()
    w = np.exp(z)
    return TokenDistribution(w / w.sum())


def _restrict(q: TokenDistribution, support: np.ndarray) -> SparseDistribution:
    support = np.sort(support)
    kept = q.probs[support]
    retained = kept.sum()
    mask = np.ones(q.vocab_size, dtype=bool)
    mask[support] = False
    # summing the excluded entries directly is more accurate than 1 - retained
    dropped = float(q.probs[mask].sum())
    return SparseDistribution(support, kept / retained, dropped)


def sparsify_top_k(q: TokenDistribution, k: int) -> SparseDistribution:
    """Keep the ``k`` most probable tokens (ties go to the smaller id)."""
    if not 1 <= k <= q.vocab_size:
        raise InvalidArgument(f"K={k} outside [1, {q.vocab_size}]")
    if k == q.vocab_size:
        return _restrict(q, np.arange(k))
    # stable sort on -p keeps smaller ids first among equal probabilities
    order = np.argsort(-q.probs, kind="stable")
    return _restrict(q, order[:k])


def threshold_support(q: TokenDistribution, beta: float) -> np.ndarray:
    """Raw ``{x : q(x) >= beta}`` without any fallback; may be empty."""
    return np.flatnonzero(q.probs >= beta)


def sparsify_threshold(q: TokenDistribution, beta: float) -> SparseDistribution:
    """Keep tokens with ``q(x) >= beta``; an empty set falls back to the argmax."""
    support = threshold_support(q, beta)
    if support.size == 0:
        support = np.array([int(np.argmax(q.probs))])
    return _restrict(q, support)


def densify(s: SparseDistribution, vocab_size: int) -> TokenDistribution:
    if s.support[-1] >= vocab_size:
        raise InvalidArgument(f"support id {int(s.support[-1])} >= V={vocab_size}")
    probs = np.zeros(vocab_size)
    probs[s.support] = s.masses
    return TokenDistribution(probs)


def entropy_bits(q: TokenDistribution) -> float:
    p = q.probs[q.probs > 0]
    return float(-(p * np.log2(p)).sum())
