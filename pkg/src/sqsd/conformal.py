"""Adaptive sparsification threshold driven by online conformal updates.

The edge updates the threshold once per drafted token, checkpointing the
value used at every position of the batch. When the cloud reports how many
drafts it accepted, the threshold is rolled back to the value following the
last accepted token and advanced once more for the token the cloud emitted.
The committed trajectory therefore only ever sees tokens that made it into
the output sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConsistencyError, InvalidArgument


@dataclass
class ThresholdState:
    beta: float
    eta: float = 0.001
    alpha: float = 0.0005
    beta_start: float = field(default=None)
    checkpoints: list = field(default_factory=list)
    accepted_count_total: int = 0
    cumulative_dropped_mass: float = 0.0
    # extremes over every update, including speculative ones later rolled back
    beta_min: float = field(default=None)
    beta_max: float = field(default=None)
    max_step: float = 0.0

    def __post_init__(self):
        if self.eta < 0:
            raise InvalidArgument("eta must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidArgument("alpha must lie in (0, 1)")
        if self.beta_start is None:
            self.beta_start = self.beta
        if self.beta_min is None:
            self.beta_min = self.beta
        if self.beta_max is None:
            self.beta_max = self.beta

    @property
    def envelope(self) -> tuple:
        """Admissible per-step change ``(-eta (1 - alpha), eta alpha)``."""
        return -self.eta * (1.0 - self.alpha), self.eta * self.alpha

    @property
    def universal_bounds(self) -> tuple:
        return -self.eta * (1.0 - self.alpha), 1.0 + self.eta * self.alpha


def step(beta: float, dropped_mass: float, eta: float, alpha: float) -> float:
    return beta - eta * (dropped_mass - alpha)


def update(state: ThresholdState, dropped_mass: float) -> float:
    """Advance the live threshold by one token; returns the new value."""
    if not 0.0 <= dropped_mass <= 1.0:
        raise InvalidArgument(f"dropped mass {dropped_mass!r} outside [0, 1]")
    new = step(state.beta, dropped_mass, state.eta, state.alpha)
    state.max_step = max(state.max_step, abs(new - state.beta))
    state.beta_min = min(state.beta_min, new)
    state.beta_max = max(state.beta_max, new)
    state.beta = new
    return new


def checkpoint(state: ThresholdState, position: int) -> None:
    """Record the threshold about to be used for drafting ``position`` (1-based)."""
    if position != len(state.checkpoints) + 1:
        raise ConsistencyError(
            f"checkpoint for position {position} out of order "
            f"({len(state.checkpoints)} already recorded)")
    state.checkpoints.append((position, state.beta))


def _commit(state: ThresholdState, dropped_mass: float) -> None:
    state.accepted_count_total += 1
    state.cumulative_dropped_mass += dropped_mass


def backtrack_to_accepted(state: ThresholdState, accepted: int, drafted_dropped,
                          resampled_dropped: float) -> ThresholdState:
    """Fold the cloud's verdict into the threshold state.

    ``drafted_dropped`` holds the dropped mass of every drafted position in
    the batch, ``resampled_dropped`` the dropped mass at the position of the
    token the cloud emitted (resampled or bonus).
    """
    drafted = len(state.checkpoints)
    if len(drafted_dropped) != drafted:
        raise ConsistencyError(
            f"{len(drafted_dropped)} dropped-mass values for {drafted} checkpoints")
    if not 0 <= accepted <= drafted:
        raise ConsistencyError(f"cannot accept {accepted} of {drafted} drafted tokens")
    # values at positions 1..L+1; the last is the live post-batch threshold
    betas = [beta for _, beta in state.checkpoints] + [state.beta]
    state.beta = betas[accepted]
    for i in range(accepted):
        _commit(state, drafted_dropped[i])
    update(state, resampled_dropped)
    _commit(state, resampled_dropped)
    state.checkpoints.clear()
    return state


def telescoping_gap(state: ThresholdState) -> float:
    """``sum(dropped) - (alpha T + (beta_start - beta) / eta)``; zero up to rounding."""
    if state.eta == 0:
        return math.nan
    t = state.accepted_count_total
    return state.cumulative_dropped_mass - (
        state.alpha * t + (state.beta_start - state.beta) / state.eta)


def theorem2_bound(state: ThresholdState, tokens: int, beta_initial: float) -> float:
    """Average dropped-mass guarantee ``alpha + (|beta_1| + 1 + eta alpha) / (eta T)``."""
    if tokens < 1:
        raise InvalidArgument("need at least one committed token")
    if state.eta == 0:
        return math.inf
    return state.alpha + (abs(beta_initial) + 1.0 + state.eta * state.alpha) / (state.eta * tokens)


def theorem2_bound_proof_form(state: ThresholdState, tokens: int, beta_initial: float) -> float:
    """Variant constant ``|beta_0| + 1 + eta`` that the derivation arrives at."""
    if tokens < 1:
        raise InvalidArgument("need at least one committed token")
    if state.eta == 0:
        return math.inf
    return state.alpha + (abs(beta_initial) + 1.0 + state.eta) / (state.eta * tokens)


def average_dropped_bound(state: ThresholdState, tokens: int, beta_initial: float) -> float:
    """The looser of the two constants; this is what runtime checks assert."""
    return max(theorem2_bound(state, tokens, beta_initial),
               theorem2_bound_proof_form(state, tokens, beta_initial))
