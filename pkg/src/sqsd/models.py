"""Sources of (draft, target) next-token distribution pairs.

Two backends: a seeded synthetic Markov generator with a divergence knob,
and a recorded-trace reader for logits captured from real models.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, TraceFileMissing, TraceFormatError, UnknownContext
from .simplex import TokenDistribution, apply_temperature

TRACE_MAGIC = b"SQST"
TRACE_VERSION = 1
_LOGIT_FLOOR = 1e-300


class ModelPair:
    """A draft (edge) model and a target (cloud) model over a shared vocabulary.

    Subclasses implement ``draft_logits`` and ``target_logits``; both must be
    pure functions of the context.
    """

    vocab_size: int

    def __init__(self, vocab_size: int, temperature_draft: float = 1.0,
                 temperature_target: float = 1.0):
        if vocab_size < 1:
            raise InvalidArgument("vocab_size must be positive")
        self.vocab_size = int(vocab_size)
        self.temperature_draft = float(temperature_draft)
        self.temperature_target = float(temperature_target)
        self._dists: dict = {}

    def cache_key(self, context):
        """Hashable key under which distributions for ``context`` may be memoized."""
        return None

    def draft_logits(self, context) -> np.ndarray:
        raise NotImplementedError

    def target_logits(self, context) -> np.ndarray:
        raise NotImplementedError

    def with_temperature(self, temperature_draft: float, temperature_target: float | None = None):
        """Shallow copy sharing the logit tables but sampling at new temperatures."""
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.temperature_draft = float(temperature_draft)
        clone.temperature_target = float(
            temperature_draft if temperature_target is None else temperature_target)
        clone._dists = {}
        return clone

    def _dist(self, role: int, context) -> TokenDistribution:
        key = self.cache_key(context)
        if key is not None:
            hit = self._dists.get((role, key))
            if hit is not None:
                return hit
        if role == 0:
            dist = apply_temperature(self.draft_logits(context), self.temperature_draft)
        else:
            dist = apply_temperature(self.target_logits(context), self.temperature_target)
        if key is not None:
            self._dists[(role, key)] = dist
        return dist

    def draft_dist(self, context) -> TokenDistribution:
        return self._dist(0, context)

    def target_dist(self, context) -> TokenDistribution:
        return self._dist(1, context)


@dataclass(frozen=True)
class SyntheticModelSpec:
    vocab_size: int = 64
    markov_order: int = 1
    divergence: float = 0.1
    concentration: float = 0.01
    seed: int = 0
    concentration_spread: float = 1.0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InvalidArgument("vocab_size must be >= 2")
        if self.markov_order < 0:
            raise InvalidArgument("markov_order must be >= 0")
        if not 0.0 <= self.divergence <= 1.0:
            raise InvalidArgument("divergence must lie in [0, 1]")
        if not self.concentration > 0:
            raise InvalidArgument("concentration must be > 0")
        if self.concentration_spread < 0:
            raise InvalidArgument("concentration_spread must be >= 0")


class SyntheticPair(ModelPair):
    """Order-m Markov pair with Dirichlet-skewed next-token tables.

    For each state (the last ``markov_order`` tokens) the target distribution
    ``p`` is a Dirichlet(concentration) draw and an independent draw ``r`` of
    the same law models what the small model gets wrong. The draft is the
    mixture ``(1 - eps) p + eps r``, so at unit temperature
    ``TV(q, p) = eps * TV(p, r)`` exactly. Logits are the logs of these
    probabilities. Tables are built lazily and memoized per state.
    """

    def __init__(self, spec: SyntheticModelSpec, temperature_draft: float = 1.0,
                 temperature_target: float = 1.0):
        super().__init__(spec.vocab_size, temperature_draft, temperature_target)
        self.spec = spec
        self._table: dict = {}

    def _state(self, context) -> tuple:
        m = self.spec.markov_order
        if m == 0:
            return ()
        tail = tuple(int(t) for t in context[-m:])
        # positions before the start of text use the out-of-vocabulary id V
        return (self.vocab_size,) * (m - len(tail)) + tail

    def cache_key(self, context):
        return self._state(context)

    def _entry(self, context):
        state = self._state(context)
        entry = self._table.get(state)
        if entry is None:
            entry = self._build(state)
            self._table[state] = entry
        return entry

    def _build(self, state: tuple):
        spec = self.spec
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5D, *state]))
        conc = spec.concentration
        if spec.concentration_spread:
            conc *= 10.0 ** rng.uniform(-spec.concentration_spread, spec.concentration_spread)
        alpha = np.full(spec.vocab_size, conc)
        p = _dirichlet(rng, alpha)
        r = _dirichlet(rng, alpha)
        target = np.log(np.maximum(p, _LOGIT_FLOOR))
        if spec.divergence == 0.0:
            draft = target
        else:
            q = (1.0 - spec.divergence) * p + spec.divergence * r
            draft = np.log(np.maximum(q, _LOGIT_FLOOR))
        target.setflags(write=False)
        draft.setflags(write=False)
        return draft, target

    def draft_logits(self, context) -> np.ndarray:
        return self._entry(context)[0]

    def target_logits(self, context) -> np.ndarray:
        return self._entry(context)[1]


def _dirichlet(rng: np.random.Generator, alpha: np.ndarray) -> np.ndarray:
    # gamma draws with small shape underflow to zero; go through log space
    g = rng.gamma(alpha + 1.0)
    u = rng.random(alpha.size)
    log_w = np.log(g) + np.log(u) / alpha
    log_w -= log_w.max()
    w = np.exp(log_w)
    return w / w.sum()


def synthetic_pair(spec: SyntheticModelSpec, temperature: float = 1.0) -> SyntheticPair:
    return SyntheticPair(spec, temperature, temperature)


# ---------------------------------------------------------------------------
# trace files
#
# little-endian: "SQST", version u8, V u32, then repeated records of
# (context length u16, context ids u32 * len, draft f64 * V, target f64 * V)


class TracePair(ModelPair):
    def __init__(self, vocab_size: int, records: dict, temperature_draft: float = 1.0,
                 temperature_target: float = 1.0):
        super().__init__(vocab_size, temperature_draft, temperature_target)
        self.records = records

    def cache_key(self, context):
        return tuple(int(t) for t in context)

    def _lookup(self, context):
        key = tuple(int(t) for t in context)
        try:
            return self.records[key]
        except KeyError:
            raise UnknownContext(f"no recorded logits for context {list(key)}") from None

    def draft_logits(self, context) -> np.ndarray:
        return self._lookup(context)[0]

    def target_logits(self, context) -> np.ndarray:
        return self._lookup(context)[1]


def write_trace(path, vocab_size: int, records) -> None:
    """Write ``records`` -- an iterable of (context, draft_logits, target_logits)."""
    out = bytearray(TRACE_MAGIC)
    out += struct.pack("<BI", TRACE_VERSION, vocab_size)
    for context, draft, target in records:
        context = [int(t) for t in context]
        draft = np.asarray(draft, dtype="<f8")
        target = np.asarray(target, dtype="<f8")
        if draft.shape != (vocab_size,) or target.shape != (vocab_size,):
            raise InvalidArgument("logit vectors must have length V")
        if any(not 0 <= t < vocab_size for t in context):
            raise InvalidArgument("context ids must be < V")
        out += struct.pack("<H", len(context))
        out += struct.pack(f"<{len(context)}I", *context)
        out += draft.tobytes() + target.tobytes()
    Path(path).write_bytes(bytes(out))


def read_trace(path) -> tuple:
    path = Path(path)
    if not path.is_file():
        raise TraceFileMissing(f"trace file not found: {path}")
    data = path.read_bytes()
    if len(data) < 9:
        raise TraceFormatError(f"{path}: too short for a trace header")
    if data[:4] != TRACE_MAGIC:
        raise TraceFormatError(f"{path}: bad magic {data[:4]!r}")
    version, vocab_size = struct.unpack_from("<BI", data, 4)
    if version != TRACE_VERSION:
        raise TraceFormatError(f"{path}: unsupported trace version {version}")
    if vocab_size < 1:
        raise TraceFormatError(f"{path}: vocabulary size must be positive")
    records = {}
    pos = 9
    while pos < len(data):
        try:
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            context = struct.unpack_from(f"<{n}I", data, pos)
            pos += 4 * n
            draft = np.frombuffer(data, dtype="<f8", count=vocab_size, offset=pos).astype(np.float64)
            pos += 8 * vocab_size
            target = np.frombuffer(data, dtype="<f8", count=vocab_size, offset=pos).astype(np.float64)
            pos += 8 * vocab_size
        except (struct.error, ValueError):
            raise TraceFormatError(f"{path}: truncated record at byte {pos}") from None
        if any(t >= vocab_size for t in context):
            raise TraceFormatError(f"{path}: context id out of range at byte {pos}")
        if not (np.all(np.isfinite(draft)) and np.all(np.isfinite(target))):
            raise TraceFormatError(f"{path}: non-finite logits for context {list(context)}")
        draft.setflags(write=False)
        target.setflags(write=False)
        records[tuple(context)] = (draft, target)
    return vocab_size, records


def trace_pair(path, temperature: float = 1.0) -> TracePair:
    vocab_size, records = read_trace(path)
    return TracePair(vocab_size, records, temperature, temperature)
