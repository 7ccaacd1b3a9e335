"""Sparse lattice quantization, bit-cost accounting and combinatorial ranks.

Bit costs come in two flavours. The analysis value is the real ``log2`` of
the number of alternatives; the wire value is the smallest integer number of
bits able to index them, i.e. ``ceil(log2 n)`` computed exactly from the
integer ``n``. Budgets are enforced on the analysis value.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidArgument
from .simplex import SparseDistribution, TokenDistribution


class Scheme(enum.IntEnum):
    """Wire tags for the supported drafting schemes."""

    QS_DENSE = 0
    K_SQS = 1
    C_SQS = 2

    @classmethod
    def parse(cls, text) -> "Scheme":
        if isinstance(text, Scheme):
            return text
        key = str(text).strip().lower().replace("_", "-")
        aliases = {
            "qs": cls.QS_DENSE, "qs-dense": cls.QS_DENSE, "dense": cls.QS_DENSE,
            "k-sqs": cls.K_SQS, "ksqs": cls.K_SQS, "topk": cls.K_SQS,
            "c-sqs": cls.C_SQS, "csqs": cls.C_SQS, "conformal": cls.C_SQS,
        }
        try:
            return aliases[key]
        except KeyError:
            raise InvalidArgument(f"unknown scheme {text!r}") from None

    @property
    def label(self) -> str:
        return {0: "qs-dense", 1: "k-sqs", 2: "c-sqs"}[int(self)]


@lru_cache(maxsize=1 << 16)
def comb(n: int, k: int) -> int:
    return math.comb(n, k)


def bits_for(n_alternatives: int) -> int:
    """Exact ``ceil(log2 n)`` for a positive integer ``n``."""
    if n_alternatives < 1:
        raise InvalidArgument("need at least one alternative")
    return (n_alternatives - 1).bit_length()


def log2_int(n: int) -> float:
    # math.log2 accepts arbitrarily large ints, so no overflow for huge binomials
    return math.log2(n)


# ---------------------------------------------------------------------------
# lattice quantization


@dataclass(frozen=True, eq=False)
class LatticeDistribution:
    """Integer counts on the resolution-``ell`` simplex lattice over ``support``."""

    counts: tuple
    resolution: int
    support: tuple

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        support = tuple(int(s) for s in self.support)
        if len(counts) != len(support) or not counts:
            raise InvalidArgument("counts and support must be aligned and non-empty")
        if self.resolution < 1:
            raise InvalidArgument("resolution must be >= 1")
        if any(c < 0 for c in counts) or sum(counts) != self.resolution:
            raise InvalidArgument(f"counts {counts} do not sum to {self.resolution}")
        if support[0] < 0 or any(b <= a for a, b in zip(support, support[1:])):
            raise InvalidArgument("support must be strictly increasing")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "support", support)

    @property
    def k(self) -> int:
        return len(self.counts)

    @property
    def probs(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.float64) / self.resolution

    def densify(self, vocab_size: int) -> TokenDistribution:
        if self.support[-1] >= vocab_size:
            raise InvalidArgument(f"support id {self.support[-1]} >= V={vocab_size}")
        probs = np.zeros(vocab_size)
        probs[list(self.support)] = self.probs
        return TokenDistribution(probs)

    def __eq__(self, other):
        if not isinstance(other, LatticeDistribution):
            return NotImplemented
        return (self.counts, self.resolution, self.support) == (
            other.counts, other.resolution, other.support)

    def __hash__(self):
        return hash((self.counts, self.resolution, self.support))


def lattice_counts(masses, ell: int) -> list:
    """Round ``masses`` to integer counts summing to ``ell``.

    Nearest-point rounding, then the surplus (deficit) is removed from the
    entries with the largest (smallest) rounding error. Ties on the error go
    to the earlier position.
    """
    masses = np.asarray(masses, dtype=np.float64)
    scaled = ell * masses
    counts = np.floor(scaled + 0.5).astype(np.int64)
    excess = int(counts.sum()) - ell
    if excess != 0:
        zeta = counts - scaled
        positions = np.arange(counts.size)
        if excess > 0:
            # lexsort: last key is primary
            order = np.lexsort((positions, -zeta))[:excess]
            counts[order] -= 1
        else:
            order = np.lexsort((positions, zeta))[:-excess]
            counts[order] += 1
    return counts.tolist()


def lattice_quantize(s: SparseDistribution, ell: int) -> LatticeDistribution:
    if ell < 1:
        raise InvalidArgument("ell must be >= 1")
    return LatticeDistribution(tuple(lattice_counts(s.masses, ell)), ell,
                               tuple(int(x) for x in s.support))


# ---------------------------------------------------------------------------
# bit costs


def payload_bits(k: int, ell: int) -> float:
    """Real-valued bits to index a point of the resolution-``ell`` lattice in K dims."""
    if k < 1 or ell < 1:
        raise InvalidArgument("K and ell must be >= 1")
    return log2_int(comb(ell + k - 1, k - 1))


def payload_wire_bits(k: int, ell: int) -> int:
    if k < 1 or ell < 1:
        raise InvalidArgument("K and ell must be >= 1")
    return bits_for(comb(ell + k - 1, k - 1))


def _check_subset(vocab_size: int, k: int):
    if not 1 <= k <= vocab_size:
        raise InvalidArgument(f"K={k} outside [1, V={vocab_size}]")


def subset_bits_topk(vocab_size: int, k: int) -> float:
    _check_subset(vocab_size, k)
    return log2_int(comb(vocab_size, k))


def subset_wire_bits(vocab_size: int, k: int) -> int:
    _check_subset(vocab_size, k)
    return bits_for(comb(vocab_size, k))


def cardinality_wire_bits(vocab_size: int) -> int:
    return bits_for(vocab_size)


def subset_bits_conformal(vocab_size: int, k: int) -> int:
    """Wire bits for a variable-size subset: cardinality field plus subset rank."""
    return subset_wire_bits(vocab_size, k) + cardinality_wire_bits(vocab_size)


def token_index_bits(k: int) -> int:
    """Bits to name the drafted token as a position inside its support."""
    return bits_for(k)


@dataclass(frozen=True)
class BitCost:
    subset_bits: float
    subset_wire: int
    payload_bits: float
    payload_wire: int
    cardinality_bits: int = 0

    @property
    def total_bits(self) -> float:
        """Real-valued cost used for budget enforcement."""
        return self.subset_bits + self.payload_bits + self.cardinality_bits

    @property
    def total_wire_bits(self) -> int:
        return self.subset_wire + self.payload_wire + self.cardinality_bits


@lru_cache(maxsize=1 << 14)
def total_bits(scheme: Scheme, vocab_size: int, k: int, ell: int) -> BitCost:
    """Per-token cost of describing one quantized distribution."""
    scheme = Scheme(scheme)
    if scheme is Scheme.QS_DENSE:
        if k != vocab_size:
            raise InvalidArgument("dense QS always uses K = V")
        return BitCost(0.0, 0, payload_bits(k, ell), payload_wire_bits(k, ell))
    sub_wire = subset_wire_bits(vocab_size, k)
    if scheme is Scheme.C_SQS:
        # the variable-size subset cost is defined on ceiled terms already
        sub_real, card = float(sub_wire), cardinality_wire_bits(vocab_size)
    else:
        sub_real, card = subset_bits_topk(vocab_size, k), 0
    return BitCost(sub_real, sub_wire, payload_bits(k, ell), payload_wire_bits(k, ell), card)


# ---------------------------------------------------------------------------
# ranks


def rank_subset(support, vocab_size: int) -> int:
    """Colex rank: ``sum_i C(c_i, i + 1)`` over ascending elements ``c_i``."""
    elems = [int(c) for c in support]
    if any(b <= a for a, b in zip(elems, elems[1:])):
        raise InvalidArgument("support must be strictly increasing")
    if elems and (elems[0] < 0 or elems[-1] >= vocab_size):
        raise InvalidArgument(f"support ids must lie in [0, {vocab_size})")
    # walk (c, j) upward keeping cur = C(c, j); O(V + K) exact integer steps
    total, c, j, cur = 0, 0, 1, 0
    for i, e in enumerate(elems):
        while j < i + 1:
            cur = cur * (c - j) // (j + 1)
            j += 1
        while c < e:
            c += 1
            cur = 0 if c < j else 1 if c == j else cur * c // (c - j)
        total += cur
    return total


def unrank_subset(rank: int, vocab_size: int, k: int) -> list:
    _check_subset(vocab_size, k)
    if not 0 <= rank < comb(vocab_size, k):
        raise InvalidArgument(f"subset rank {rank} outside [0, C({vocab_size},{k}))")
    out = []
    c, i = vocab_size - 1, k
    cur = comb(c, i)
    while i > 0:
        # walk c down to the largest value with C(c, i) <= rank; each step
        # uses the exact identity C(c - 1, i) = C(c, i) (c - i) / c
        while cur > rank:
            cur = cur * (c - i) // c
            c -= 1
        out.append(c)
        rank -= cur
        if i > 1:
            cur = cur * i // c  # C(c - 1, i - 1)
        c -= 1
        i -= 1
    out.reverse()
    return out


def _n_compositions(total: int, parts: int) -> int:
    return comb(total + parts - 1, parts - 1)


def rank_composition(counts) -> int:
    """Rank among weak compositions of ``sum(counts)`` in ascending lexicographic order."""
    if isinstance(counts, LatticeDistribution):
        counts = counts.counts
    counts = [int(c) for c in counts]
    if not counts or any(c < 0 for c in counts):
        raise InvalidArgument("counts must be a non-empty nonnegative vector")
    k = len(counts)
    remaining = sum(counts)
    rank = 0
    cnt = comb(remaining + k - 2, k - 2) if k >= 2 else 1
    for i, c in enumerate(counts[:-1]):
        r = k - i - 2
        # cnt = number of completions with the current part fixed at `first`
        for first in range(c):
            rank += cnt
            m = remaining - first
            cnt = cnt * m // (m + r)
        remaining -= c
        if r:
            cnt = cnt * r // (remaining + r)
    return rank


def unrank_composition(rank: int, k: int, ell: int) -> tuple:
    if k < 1 or ell < 0:
        raise InvalidArgument("need K >= 1 and ell >= 0")
    if not 0 <= rank < _n_compositions(ell, k):
        raise InvalidArgument(f"composition rank {rank} outside [0, C({ell + k - 1},{k - 1}))")
    out = []
    remaining = ell
    cnt = comb(ell + k - 2, k - 2) if k >= 2 else 1
    for i in range(k - 1):
        r = k - i - 2
        first = 0
        while rank >= cnt:
            rank -= cnt
            m = remaining - first
            cnt = cnt * m // (m + r)  # C(m - 1 + r, r)
            first += 1
        out.append(first)
        remaining -= first
        if r:
            cnt = cnt * r // (remaining + r)  # C(remaining + r - 1, r - 1)
    out.append(remaining)
    return tuple(out)
