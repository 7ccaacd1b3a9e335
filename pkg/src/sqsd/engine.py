"""Edge drafting, cloud verification and the batch protocol between them.

The edge drafts from the *quantized* distribution and the cloud verifies
against that same quantized distribution, which keeps the output exactly
distributed as the target model no matter how coarse the quantization.
"""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import conformal
from .codec import (LatticeDistribution, Scheme, lattice_quantize, token_index_bits,
                    total_bits)
from .errors import InvalidArgument, ProtocolViolation
from .models import ModelPair
from .simplex import (SparseDistribution, TokenDistribution, sparsify_threshold, sparsify_top_k,
                      tv_distance)

ROLE_EDGE = 1
ROLE_CLOUD = 2


def role_rng(seed: int, role: int) -> np.random.Generator:
    """Counter-based stream private to one role of one session."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), role])))


@dataclass(frozen=True)
class DraftParams:
    scheme: Scheme
    ell: int = 100
    k: Optional[int] = None
    alpha: float = 0.0005
    eta: float = 0.001
    beta_init: Optional[float] = None
    budget: float = 5000.0
    l_max: int = 16
    count_token_bits: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        if self.ell < 1:
            raise InvalidArgument("ell must be >= 1")
        if self.budget <= 0:
            raise InvalidArgument("budget must be positive")
        if self.l_max < 0:
            raise InvalidArgument("l_max must be >= 0")
        if self.scheme is Scheme.K_SQS and (self.k is None or self.k < 1):
            raise InvalidArgument("K-SQS needs a positive k")

    def initial_beta(self, vocab_size: int) -> float:
        return 1.0 / vocab_size if self.beta_init is None else float(self.beta_init)


def sparsify(q: TokenDistribution, params: DraftParams, beta: float = 0.0) -> SparseDistribution:
    if params.scheme is Scheme.K_SQS:
        return sparsify_top_k(q, min(params.k, q.vocab_size))
    if params.scheme is Scheme.C_SQS:
        return sparsify_threshold(q, beta)
    return sparsify_top_k(q, q.vocab_size)


def token_cost(params: DraftParams, vocab_size: int, k: int) -> tuple:
    """``(budgeted real bits, BitCost)`` for one drafted token with support size ``k``."""
    cost = total_bits(params.scheme, vocab_size, k, params.ell)
    bits = cost.total_bits
    if params.count_token_bits:
        bits += token_index_bits(k)
    return bits, cost


def budget_prefix_length(costs, budget: float, l_max: Optional[int] = None) -> int:
    """Number of tokens the sequential budget rule drafts for the given per-token costs."""
    used = 0.0
    n = 0
    for c in costs:
        if (l_max is not None and n >= l_max) or used + c > budget:
            break
        used += c
        n += 1
    return n


@dataclass(frozen=True)
class DraftToken:
    token_id: int
    quantized: LatticeDistribution
    position: int
    bits: float = 0.0
    dropped_mass: float = 0.0

    def __post_init__(self):
        try:
            idx = self.quantized.support.index(self.token_id)
        except ValueError:
            raise ProtocolViolation(
                f"drafted token {self.token_id} is outside its support") from None
        if self.quantized.counts[idx] == 0:
            raise ProtocolViolation(f"drafted token {self.token_id} has zero quantized mass")

    @property
    def support_index(self) -> int:
        return self.quantized.support.index(self.token_id)


@dataclass(frozen=True)
class DraftBatch:
    tokens: tuple
    bits_used: float
    wire_bits: int
    costs: tuple = ()

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class BatchOutcome:
    accepted_count: int
    resampled_token: Optional[int]
    rejected_resampled: bool
    tokens_emitted: tuple
    bits_used: float
    L_t: int

    def __post_init__(self):
        if not 0 <= self.accepted_count <= self.L_t:
            raise ProtocolViolation(f"accepted {self.accepted_count} of {self.L_t} drafts")
        if self.rejected_resampled != (self.accepted_count < self.L_t):
            raise ProtocolViolation("rejected_resampled must flag exactly the T < L case")


def sample_counts(quantized: LatticeDistribution, rng: np.random.Generator) -> int:
    """Draw a support position with probability ``count / ell`` using integer arithmetic."""
    r = int(rng.integers(quantized.resolution))
    return bisect.bisect_right(list(itertools.accumulate(quantized.counts)), r)


def sample_dense(probs: np.ndarray, rng: np.random.Generator, size=None):
    cdf = np.cumsum(probs)
    u = rng.random(size) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, probs.size - 1) if size is not None else int(min(idx, probs.size - 1))


def _prepare(model: ModelPair, ctx, params: DraftParams, beta: float, memo: Optional[dict]):
    """``(sparse, quantized, bits, cost)`` for the next position.

    Without a threshold the result depends on the context only through the
    model's cache key, so it can be memoized.
    """
    key = model.cache_key(ctx) if memo is not None and params.scheme is not Scheme.C_SQS else None
    if key is not None and key in memo:
        return memo[key]
    sparse = sparsify(model.draft_dist(ctx), params, beta)
    bits, cost = token_cost(params, model.vocab_size, sparse.k)
    entry = (sparse, lattice_quantize(sparse, params.ell), bits, cost)
    if key is not None:
        memo[key] = entry
    return entry


def edge_draft_batch(model: ModelPair, context, params: DraftParams, rng: np.random.Generator,
                     threshold: Optional[conformal.ThresholdState] = None,
                     memo: Optional[dict] = None) -> DraftBatch:
    """Draft tokens autoregressively until the budget or ``l_max`` stops us.

    A token whose description would overflow the remaining budget is not
    drafted and ends the batch; the threshold is untouched for it.
    """
    if params.scheme is Scheme.C_SQS and threshold is None:
        raise InvalidArgument("C-SQS drafting needs a ThresholdState")
    ctx = list(context)
    drafts, costs = [], []
    used, wire = 0.0, 0
    while len(drafts) < params.l_max:
        beta = threshold.beta if threshold is not None else 0.0
        sparse, quantized, bits, cost = _prepare(model, ctx, params, beta, memo)
        if used + bits > params.budget:
            break
        position = len(drafts) + 1
        if threshold is not None:
            conformal.checkpoint(threshold, position)
            conformal.update(threshold, sparse.dropped_mass)
        token = quantized.support[sample_counts(quantized, rng)]
        drafts.append(DraftToken(token, quantized, position, bits, sparse.dropped_mass))
        costs.append(cost)
        used += bits
        wire += cost.total_wire_bits
        ctx.append(token)
    return DraftBatch(tuple(drafts), used, wire, tuple(costs))


# ---------------------------------------------------------------------------
# verification


def verify_token(q_hat: TokenDistribution, p: TokenDistribution, token, u):
    """Accept iff ``u < min(1, p(x) / q_hat(x))``. Works elementwise on arrays."""
    qx = q_hat.probs[token]
    px = p.probs[token]
    if np.any(qx <= 0):
        raise ProtocolViolation("drafted token has zero probability under its own distribution")
    accept = np.asarray(u) < np.minimum(1.0, px / qx)
    return bool(accept) if accept.ndim == 0 else accept


def residual_distribution(p: TokenDistribution, q_hat: TokenDistribution) -> np.ndarray:
    residual = np.maximum(0.0, p.probs - q_hat.probs)
    total = residual.sum()
    if total <= 0.0:
        raise InvalidArgument("residual is empty: p and q_hat coincide, rejection impossible")
    return residual / total


def residual_sample(p: TokenDistribution, q_hat: TokenDistribution, rng: np.random.Generator,
                    size=None):
    return sample_dense(residual_distribution(p, q_hat), rng, size)


def exactness_oracle(q_hat: TokenDistribution, p: TokenDistribution) -> TokenDistribution:
    """Closed-form output marginal of one draft-and-verify step."""
    tv = tv_distance(q_hat, p)
    accepted = np.minimum(q_hat.probs, p.probs)
    if tv == 0.0:
        return TokenDistribution(accepted)
    out = accepted + tv * residual_distribution(p, q_hat)
    return TokenDistribution(out / out.sum())


def simulate_single_step(q_hat: TokenDistribution, p: TokenDistribution, rng: np.random.Generator,
                         n: int) -> tuple:
    """Run ``n`` independent draft/verify steps; returns ``(tokens, rejected)`` arrays."""
    drafted = sample_dense(q_hat.probs, rng, n)
    u = rng.random(n)
    accepted = verify_token(q_hat, p, drafted, u)
    rejected = ~np.asarray(accepted, dtype=bool)
    out = drafted.copy()
    n_rej = int(rejected.sum())
    if n_rej:
        out[rejected] = residual_sample(p, q_hat, rng, n_rej)
    return out, rejected


def cloud_verify_batch(model: ModelPair, context, drafts, rng: np.random.Generator) -> BatchOutcome:
    """Verify drafts left to right; on the first rejection resample, else add a bonus token."""
    vocab = model.vocab_size
    ctx = list(context)
    emitted = []
    accepted = 0
    resampled = None
    for d in drafts:
        p = model.target_dist(ctx)
        # q_hat(x) straight from the lattice counts; densify only on rejection
        qx = d.quantized.counts[d.support_index] / d.quantized.resolution
        if rng.random() < min(1.0, p.probs[d.token_id] / qx):
            accepted += 1
            emitted.append(d.token_id)
            ctx.append(d.token_id)
            continue
        resampled = residual_sample(p, d.quantized.densify(vocab), rng)
        break
    rejected = accepted < len(drafts)
    if not rejected:
        resampled = sample_dense(model.target_dist(ctx).probs, rng)
    emitted.append(int(resampled))
    return BatchOutcome(accepted, int(resampled), rejected, tuple(emitted),
                        float(sum(d.bits for d in drafts)), len(drafts))


# ---------------------------------------------------------------------------
# state machines


@dataclass(frozen=True)
class CommitRecord:
    """Edge-side statistics of one output position."""

    dropped_mass: float
    k: int


class EdgeNode:
    """Edge state machine: owns the draft model, the threshold and the edge RNG."""

    def __init__(self, model: ModelPair, params: DraftParams, seed: int, prompt=()):
        self.model = model
        self.params = params
        self.rng = role_rng(seed, ROLE_EDGE)
        self.context = [int(t) for t in prompt]
        self.threshold = None
        if params.scheme is Scheme.C_SQS:
            self.threshold = conformal.ThresholdState(
                params.initial_beta(model.vocab_size), params.eta, params.alpha)
        self.committed: list = []
        self._pending: Optional[DraftBatch] = None
        self._memo: dict = {}

    def draft(self) -> DraftBatch:
        if self._pending is not None:
            raise ProtocolViolation("previous batch has no verdict yet")
        batch = edge_draft_batch(self.model, self.context, self.params, self.rng, self.threshold,
                                 self._memo)
        self._pending = batch
        return batch

    def _position_stats(self, context) -> CommitRecord:
        beta = self.threshold.beta if self.threshold is not None else 0.0
        sparse = _prepare(self.model, context, self.params, beta, self._memo)[0]
        return CommitRecord(sparse.dropped_mass, sparse.k)

    def receive_verdict(self, accepted: int, new_token: int) -> None:
        batch = self._pending
        if batch is None:
            raise ProtocolViolation("verdict without a pending draft")
        if not 0 <= accepted <= batch.length:
            raise ProtocolViolation(f"verdict accepts {accepted} of {batch.length} drafts")
        if not 0 <= new_token < self.model.vocab_size:
            raise ProtocolViolation(f"new token {new_token} outside vocabulary")
        drafts = batch.tokens
        records = [CommitRecord(d.dropped_mass, d.quantized.k) for d in drafts[:accepted]]
        accepted_ids = [d.token_id for d in drafts[:accepted]]
        # the emitted token sits at drafted position accepted + 1 when that
        # exists; after a full acceptance its statistics are computed fresh
        # with the live threshold, which is already the post-batch value
        if accepted < batch.length:
            emitted = CommitRecord(drafts[accepted].dropped_mass, drafts[accepted].quantized.k)
        else:
            emitted = self._position_stats(self.context + accepted_ids)
        if self.threshold is not None:
            conformal.backtrack_to_accepted(self.threshold, accepted,
                                            [d.dropped_mass for d in drafts],
                                            emitted.dropped_mass)
        self.committed.extend(records)
        self.committed.append(emitted)
        self.context.extend(accepted_ids)
        self.context.append(int(new_token))
        self._pending = None


class CloudNode:
    """Cloud state machine: owns the target model and the cloud RNG."""

    def __init__(self, model: ModelPair, seed: int, prompt=()):
        self.model = model
        self.rng = role_rng(seed, ROLE_CLOUD)
        self.context = [int(t) for t in prompt]

    def verify(self, drafts) -> BatchOutcome:
        outcome = cloud_verify_batch(self.model, self.context, drafts, self.rng)
        self.context.extend(outcome.tokens_emitted)
        return outcome


def run_direct(edge: EdgeNode, cloud: CloudNode, max_batches: Optional[int] = None,
               max_tokens: Optional[int] = None) -> list:
    """Couple the two state machines without any wire encoding."""
    if max_batches is None and max_tokens is None:
        raise InvalidArgument("need a batch or token limit")
    outcomes = []
    produced = 0
    while (max_batches is None or len(outcomes) < max_batches) and (
            max_tokens is None or produced < max_tokens):
        batch = edge.draft()
        outcome = cloud.verify(batch.tokens)
        edge.receive_verdict(outcome.accepted_count, outcome.resampled_token)
        outcomes.append(outcome)
        produced += len(outcome.tokens_emitted)
    return outcomes
