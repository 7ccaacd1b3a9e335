"""Experiment sweeps, latency accounting, bound checks and CSV output."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import conformal
from .codec import Scheme
from .engine import CloudNode, DraftParams, EdgeNode, run_direct, sparsify
from .errors import ConfigError, InvalidArgument
from .models import ModelPair, SyntheticModelSpec, synthetic_pair, trace_pair
from .simplex import tv_distance

CARRIERS = ("direct", "in-process", "socket")


@dataclass(frozen=True)
class ChannelModel:
    bandwidth: float = 1e6  # bits / s
    rtt: float = 0.02  # s
    budget: float = 5000.0  # bits per batch

    def __post_init__(self):
        for name in ("bandwidth", "rtt", "budget"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be positive")


@dataclass(frozen=True)
class BatchTiming:
    slm: float
    uplink: float
    llm: float

    @property
    def total(self) -> float:
        return self.slm + self.uplink + self.llm


@dataclass(frozen=True)
class LatencyModel:
    t_slm_per_token: float = 0.002
    t_llm_verify_per_batch: float = 0.06
    channel: ChannelModel = field(default_factory=ChannelModel)

    def __post_init__(self):
        if self.t_slm_per_token < 0 or self.t_llm_verify_per_batch < 0:
            raise InvalidArgument("latency components must be nonnegative")

    def uplink(self, bits: float) -> float:
        return bits / self.channel.bandwidth + self.channel.rtt

    def batch(self, drafted: int, bits: float) -> BatchTiming:
        return BatchTiming(drafted * self.t_slm_per_token, self.uplink(bits),
                           self.t_llm_verify_per_batch)


# ---------------------------------------------------------------------------
# configuration
#
# Flat "key = value" lines; '#' starts a comment. Lists are comma separated.


@dataclass(frozen=True)
class ExperimentConfig:
    schemes: tuple = ("k-sqs", "c-sqs")
    vocab_size: int = 64
    ell: int = 100
    budget: float = 5000.0
    temperatures: tuple = (0.1, 1.0)
    k_grid: tuple = (8,)
    alpha_grid: tuple = (0.0005,)
    eta_grid: tuple = (0.001,)
    beta_init_grid: tuple = (None,)  # None means 1/V
    model: str = "synthetic"
    trace_path: Optional[str] = None
    markov_order: int = 1
    divergence: float = 0.1
    concentration: float = 0.01
    concentration_spread: float = 1.0
    model_seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    max_batches: Optional[int] = 100
    max_tokens: Optional[int] = None
    l_max: int = 16
    count_token_bits: bool = False
    t_slm: float = 0.002
    t_llm: float = 0.06
    bandwidth: float = 1e6
    rtt: float = 0.02
    carrier: str = "direct"
    out: Optional[str] = None

    def problems(self) -> list:
        out = []
        for name in ("schemes", "temperatures", "seeds"):
            if not getattr(self, name):
                out.append(f"{name}: must not be empty")
        for s in self.schemes:
            try:
                Scheme.parse(s)
            except InvalidArgument:
                out.append(f"schemes: unknown scheme {s!r}")
        if self.vocab_size < 2:
            out.append("vocab_size: must be >= 2")
        if self.ell < 1:
            out.append("ell: must be >= 1")
        if not self.budget > 0:
            out.append("budget: must be positive")
        if any(t < 0 for t in self.temperatures):
            out.append("temperatures: must be >= 0")
        if any(Scheme.parse(s) is Scheme.K_SQS for s in self.schemes if _is_scheme(s)):
            if not self.k_grid:
                out.append("k_grid: must not be empty for k-sqs")
            elif any(not 1 <= k <= self.vocab_size for k in self.k_grid):
                out.append("k_grid: every K must lie in [1, vocab_size]")
        if any(Scheme.parse(s) is Scheme.C_SQS for s in self.schemes if _is_scheme(s)):
            for name in ("alpha_grid", "eta_grid", "beta_init_grid"):
                if not getattr(self, name):
                    out.append(f"{name}: must not be empty for c-sqs")
            if any(not 0 < a < 1 for a in self.alpha_grid):
                out.append("alpha_grid: every alpha must lie in (0, 1)")
            if any(e < 0 for e in self.eta_grid):
                out.append("eta_grid: every eta must be >= 0")
        if self.model not in ("synthetic", "trace"):
            out.append(f"model: expected synthetic or trace, got {self.model!r}")
        if self.model == "trace" and not self.trace_path:
            out.append("trace_path: required when model = trace")
        if self.markov_order < 0:
            out.append("markov_order: must be >= 0")
        if not 0 <= self.divergence <= 1:
            out.append("divergence: must lie in [0, 1]")
        if not self.concentration > 0:
            out.append("concentration: must be positive")
        if self.concentration_spread < 0:
            out.append("concentration_spread: must be >= 0")
        if self.max_batches is None and self.max_tokens is None:
            out.append("max_batches: set max_batches or max_tokens")
        for name in ("max_batches", "max_tokens"):
            v = getattr(self, name)
            if v is not None and v < 1:
                out.append(f"{name}: must be >= 1")
        if self.l_max < 0:
            out.append("l_max: must be >= 0")
        for name in ("t_slm", "t_llm"):
            if getattr(self, name) < 0:
                out.append(f"{name}: must be >= 0")
        for name in ("bandwidth", "rtt"):
            if not getattr(self, name) > 0:
                out.append(f"{name}: must be positive")
        if self.carrier not in CARRIERS:
            out.append(f"carrier: expected one of {', '.join(CARRIERS)}, got {self.carrier!r}")
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def latency(self) -> LatencyModel:
        return LatencyModel(self.t_slm, self.t_llm,
                            ChannelModel(self.bandwidth, self.rtt, self.budget))

    def model_spec(self) -> SyntheticModelSpec:
        return SyntheticModelSpec(self.vocab_size, self.markov_order, self.divergence,
                                  self.concentration, self.model_seed, self.concentration_spread)

    def build_model(self, temperature: float) -> ModelPair:
        if self.model == "trace":
            return trace_pair(self.trace_path, temperature)
        return synthetic_pair(self.model_spec(), temperature)


def _is_scheme(s) -> bool:
    try:
        Scheme.parse(s)
        return True
    except InvalidArgument:
        return False


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(conv):
    def parse(text):
        return None if text.lower() in ("", "none") else conv(text)
    return parse


def _beta(text: str):
    return None if text.lower() in ("1/v", "inv_v", "none") else float(text)


def _int_list(text: str) -> tuple:
    out = []
    for item in _split(text):
        lo, sep, hi = item.partition("..")
        if sep:
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(item))
    return tuple(out)


def _split(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


_PARSERS = {
    "schemes": lambda t: tuple(_split(t)),
    "vocab_size": int,
    "ell": int,
    "budget": float,
    "temperatures": lambda t: tuple(float(x) for x in _split(t)),
    "k_grid": _int_list,
    "alpha_grid": lambda t: tuple(float(x) for x in _split(t)),
    "eta_grid": lambda t: tuple(float(x) for x in _split(t)),
    "beta_init_grid": lambda t: tuple(_beta(x) for x in _split(t)),
    "model": str,
    "trace_path": _optional(str),
    "markov_order": int,
    "divergence": float,
    "concentration": float,
    "concentration_spread": float,
    "model_seed": int,
    "seeds": _int_list,
    "max_batches": _optional(int),
    "max_tokens": _optional(int),
    "l_max": int,
    "count_token_bits": _parse_bool,
    "t_slm": float,
    "t_llm": float,
    "bandwidth": float,
    "rtt": float,
    "carrier": str,
    "out": _optional(str),
}
assert set(_PARSERS) == {f.name for f in fields(ExperimentConfig)}


def parse_config(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Parse the flat config format; every bad line or field is reported at once."""
    values, problems = {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            problems.append(f"line {lineno}: expected key = value")
            continue
        if key not in _PARSERS:
            problems.append(f"{key}: unknown key (line {lineno})")
            continue
        if key in values:
            problems.append(f"{key}: set twice (line {lineno})")
            continue
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            problems.append(f"{key}: {exc} (line {lineno})")
    if problems:
        raise ConfigError(problems)
    cfg = replace(base or ExperimentConfig(), **values)
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: ExperimentConfig) -> list:
    """``key = value`` lines that ``parse_config`` reads back to ``cfg``."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            text = ", ".join("1/V" if x is None else _fmt(x) for x in v)
        elif v is None:
            text = "none"
        else:
            text = _fmt(v)
        lines.append(f"{f.name} = {text}")
    return lines


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class GridPoint:
    scheme: Scheme
    temperature: float
    k: Optional[int] = None
    alpha: Optional[float] = None
    eta: Optional[float] = None
    beta_init: Optional[float] = None

    def params(self, cfg: ExperimentConfig) -> DraftParams:
        kw = dict(scheme=self.scheme, ell=cfg.ell, k=self.k, budget=cfg.budget,
                  l_max=cfg.l_max, count_token_bits=cfg.count_token_bits)
        if self.scheme is Scheme.C_SQS:
            kw.update(alpha=self.alpha, eta=self.eta, beta_init=self.beta_init)
        return DraftParams(**kw)


def grid_points(cfg: ExperimentConfig) -> list:
    points = []
    for name in cfg.schemes:
        scheme = Scheme.parse(name)
        for t in cfg.temperatures:
            if scheme is Scheme.K_SQS:
                points.extend(GridPoint(scheme, t, k=k) for k in cfg.k_grid)
            elif scheme is Scheme.C_SQS:
                points.extend(GridPoint(scheme, t, alpha=a, eta=e, beta_init=b)
                              for a, e, b in itertools.product(
                                  cfg.alpha_grid, cfg.eta_grid, cfg.beta_init_grid))
            else:
                points.append(GridPoint(scheme, t))
    return points


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class RunMetrics:
    scheme: str
    temperature: float
    k: Optional[int]
    alpha: Optional[float]
    eta: Optional[float]
    beta_init: Optional[float]
    seed: Optional[int]
    batches: int
    tokens_generated: int
    rejected_resampled: int
    resampling_rate: float
    avg_total_time: float  # seconds per generated token
    avg_batch_time: float
    time_slm: float
    time_uplink: float
    time_llm: float
    avg_bits_per_batch: float
    max_bits_per_batch: float
    avg_batch_length: float
    avg_dropped_mass: float
    theorem1_rhs: float
    theorem2_rhs: float
    beta_final: float


METRIC_COLUMNS = tuple(f.name for f in fields(RunMetrics))


def _rate(x: int, n: int) -> float:
    return x / n if n else 0.0


def theorem1_terms(model: ModelPair, params: DraftParams, tokens, prompt=()) -> np.ndarray:
    """Per-position bound terms ``[TV(q, p), dropped mass, K / (4 ell)]`` along ``tokens``.

    The threshold, if any, is replayed sequentially over the output, which is
    what check-pointing reproduces on the edge.
    """
    ctx = [int(t) for t in prompt]
    state = None
    if params.scheme is Scheme.C_SQS:
        state = conformal.ThresholdState(params.initial_beta(model.vocab_size),
                                         params.eta, params.alpha)
    out = np.empty((len(tokens), 3))
    tv_memo, sparse_memo = {}, {}
    for i, tok in enumerate(tokens):
        key = model.cache_key(ctx)
        tv = tv_memo.get(key) if key is not None else None
        if tv is None:
            tv = tv_distance(model.draft_dist(ctx), model.target_dist(ctx))
            if key is not None:
                tv_memo[key] = tv
        if state is not None:
            sparse = sparsify(model.draft_dist(ctx), params, state.beta)
            conformal.update(state, sparse.dropped_mass)
            stats = (sparse.dropped_mass, sparse.k)
        else:
            stats = sparse_memo.get(key) if key is not None else None
            if stats is None:
                sparse = sparsify(model.draft_dist(ctx), params)
                stats = (sparse.dropped_mass, sparse.k)
                if key is not None:
                    sparse_memo[key] = stats
        out[i] = (tv, stats[0], stats[1] / (4.0 * params.ell))
        ctx.append(int(tok))
    return out


@dataclass
class RunRecord:
    """Everything one seeded run produced, beyond its summary metrics."""

    metrics: RunMetrics
    outcomes: list
    edge: EdgeNode
    timings: list


def _drive(carrier: str, edge: EdgeNode, cloud: CloudNode, max_batches, max_tokens) -> list:
    if carrier == "direct":
        return run_direct(edge, cloud, max_batches, max_tokens)
    from .transport import session
    return session(carrier, edge, cloud, max_batches=max_batches, max_tokens=max_tokens).outcomes


def run_single(cfg: ExperimentConfig, point: GridPoint, seed: int,
               model: Optional[ModelPair] = None, with_theorem1: bool = True) -> RunRecord:
    model = model or cfg.build_model(point.temperature)
    params = point.params(cfg)
    edge = EdgeNode(model, params, seed)
    cloud = CloudNode(model, seed)
    outcomes = _drive(cfg.carrier, edge, cloud, cfg.max_batches, cfg.max_tokens)
    return summarize(cfg.latency, point, seed, model, params, edge, outcomes, with_theorem1)


def summarize(latency: LatencyModel, point: GridPoint, seed, model: ModelPair,
              params: DraftParams, edge: EdgeNode, outcomes, with_theorem1: bool = True) -> RunRecord:
    timings = [latency.batch(o.L_t, o.bits_used) for o in outcomes]
    n_batches = len(outcomes)
    tokens = sum(len(o.tokens_emitted) for o in outcomes)
    rejected = sum(o.rejected_resampled for o in outcomes)
    total = sum(t.total for t in timings)
    dropped = [r.dropped_mass for r in edge.committed]
    rhs1 = math.nan
    if with_theorem1:
        rhs1 = float(theorem1_terms(model, params, edge.context).sum())
    rhs2 = math.nan
    beta_final = math.nan
    if edge.threshold is not None:
        beta_final = edge.threshold.beta
        if edge.threshold.accepted_count_total:
            rhs2 = conformal.average_dropped_bound(
                edge.threshold, edge.threshold.accepted_count_total,
                params.initial_beta(model.vocab_size))
    bits = [o.bits_used for o in outcomes]
    metrics = RunMetrics(
        scheme=point.scheme.label, temperature=point.temperature, k=point.k, alpha=point.alpha,
        eta=point.eta, beta_init=(params.initial_beta(model.vocab_size)
                                  if point.scheme is Scheme.C_SQS else None),
        seed=seed, batches=n_batches, tokens_generated=tokens, rejected_resampled=rejected,
        resampling_rate=_rate(rejected, n_batches),
        avg_total_time=_rate(total, tokens),
        avg_batch_time=_rate(total, n_batches),
        time_slm=sum(t.slm for t in timings), time_uplink=sum(t.uplink for t in timings),
        time_llm=sum(t.llm for t in timings),
        avg_bits_per_batch=_rate(sum(bits), n_batches),
        max_bits_per_batch=max(bits, default=0.0),
        avg_batch_length=_rate(sum(o.L_t for o in outcomes), n_batches),
        avg_dropped_mass=float(np.mean(dropped)) if dropped else 0.0,
        theorem1_rhs=rhs1, theorem2_rhs=rhs2, beta_final=beta_final)
    return RunRecord(metrics, outcomes, edge, timings)


@dataclass(frozen=True)
class Aggregate:
    point: GridPoint
    mean: dict
    stderr: dict
    runs: tuple


_NUMERIC = tuple(c for c in METRIC_COLUMNS
                 if c not in ("scheme", "temperature", "k", "alpha", "eta", "beta_init", "seed"))


def aggregate(point: GridPoint, runs) -> Aggregate:
    mean, stderr = {}, {}
    for col in _NUMERIC:
        vals = np.array([getattr(r, col) for r in runs], dtype=float)
        mean[col] = float(vals.mean())
        if vals.size < 2:
            stderr[col] = 0.0
        elif not np.all(np.isfinite(vals)):
            stderr[col] = math.nan
        else:
            stderr[col] = float(vals.std(ddof=1) / math.sqrt(vals.size))
    return Aggregate(point, mean, stderr, tuple(runs))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list  # RunMetrics, grid point major, seed minor
    aggregates: list


def run_experiment(cfg: ExperimentConfig, with_theorem1: bool = True) -> ExperimentResult:
    cfg.validate()
    runs, aggs = [], []
    models = {}
    for point in grid_points(cfg):
        if point.temperature not in models:
            models[point.temperature] = cfg.build_model(point.temperature)
        model = models[point.temperature]
        point_runs = [run_single(cfg, point, seed, model, with_theorem1).metrics
                      for seed in cfg.seeds]
        runs.extend(point_runs)
        aggs.append(aggregate(point, point_runs))
    return ExperimentResult(cfg, runs, aggs)


# ---------------------------------------------------------------------------
# bound checks


@dataclass(frozen=True)
class Theorem1Result:
    runs: int
    mean_rejections: float
    mean_rhs: float
    stderr: float  # of the per-run gap rhs - rejections
    rejections: tuple
    rhs: tuple

    @property
    def holds(self) -> bool:
        return self.mean_rejections <= self.mean_rhs + 4.0 * self.stderr


def evaluate_theorem1(model: ModelPair, params: DraftParams, runs: int = 200, batches: int = 50,
                      seed0: int = 0) -> Theorem1Result:
    """Monte Carlo check of the expected-rejection bound.

    Each run is an independent seeded session of ``batches`` batches; its
    right-hand side is evaluated exactly along the output it produced.
    """
    if runs < 1 or batches < 1:
        raise InvalidArgument("need at least one run of one batch")
    n_rej, rhs = [], []
    for r in range(runs):
        edge = EdgeNode(model, params, seed0 + r)
        outcomes = run_direct(edge, CloudNode(model, seed0 + r), max_batches=batches)
        n_rej.append(sum(o.rejected_resampled for o in outcomes))
        rhs.append(float(theorem1_terms(model, params, edge.context).sum()))
    gap = np.array(rhs) - np.array(n_rej)
    stderr = float(gap.std(ddof=1) / math.sqrt(runs)) if runs > 1 else 0.0
    return Theorem1Result(runs, float(np.mean(n_rej)), float(np.mean(rhs)), stderr,
                          tuple(n_rej), tuple(rhs))


@dataclass(frozen=True)
class Theorem2Check:
    tokens: int
    max_excess: float  # max over prefixes of running average minus bound; <= 0 passes
    telescoping_gap: float
    beta_min: float
    beta_max: float
    max_step: float
    stated_excess: float = -math.inf  # same, with the constant |beta_1| + 1 + eta alpha only

    def violations(self, state_eta: float, alpha: float, tol: float = 1e-9) -> list:
        out = []
        if self.max_excess > 0:
            out.append(f"average dropped mass exceeds the bound by {self.max_excess:.3g}")
        if abs(self.telescoping_gap) > tol:
            out.append(f"telescoping identity off by {self.telescoping_gap:.3g}")
        lo, hi = -state_eta * (1 - alpha), 1 + state_eta * alpha
        if not (lo <= self.beta_min and self.beta_max <= hi):
            out.append(f"beta left [{lo}, {hi}]: saw [{self.beta_min}, {self.beta_max}]")
        if self.max_step > state_eta * max(alpha, 1 - alpha) * (1 + 1e-9):
            out.append(f"threshold step {self.max_step} outside the envelope")
        return out


def check_theorem2(edge: EdgeNode) -> Theorem2Check:
    """Prefix-wise check of the average dropped-mass guarantee for a C-SQS edge."""
    state = edge.threshold
    if state is None:
        raise InvalidArgument("edge has no conformal threshold")
    dropped = np.array([r.dropped_mass for r in edge.committed])
    t = np.arange(1, dropped.size + 1)
    avg = np.cumsum(dropped) / t
    beta1 = state.beta_start
    stated = abs(beta1) + 1 + state.eta * state.alpha
    looser = max(stated, abs(beta1) + 1 + state.eta)

    def excess(c):
        if state.eta == 0 or not t.size:
            return -math.inf
        return float(np.max(avg - (state.alpha + c / (state.eta * t))))

    return Theorem2Check(int(dropped.size), excess(looser), conformal.telescoping_gap(state),
                         state.beta_min, state.beta_max, state.max_step, excess(stated))


# ---------------------------------------------------------------------------
# CSV

CSV_COLUMNS = ("row",) + METRIC_COLUMNS


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_csv(result: Optional[ExperimentResult], path, config: Optional[ExperimentConfig] = None) -> None:
    """One row per (grid point, seed), then a mean and a stderr row per grid point.

    Comment lines at the top echo the configuration and the column order. Reruns
    with the same configuration produce identical bytes.
    """
    cfg = config or (result.config if result is not None else None)
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            if cfg is not None:
                fh.write(f"# B = {_fmt(cfg.budget)}, ell = {cfg.ell}\r\n")
                for line in format_config(cfg):
                    fh.write(f"# {line}\r\n")
            fh.write("# resampled token statistics: drafted position T+1, fresh after full acceptance\r\n")
            fh.write("# columns: " + ",".join(CSV_COLUMNS) + "\r\n")
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            if result is None:
                return
            for agg in result.aggregates:
                for run in agg.runs:
                    w.writerow(["seed"] + [_cell(v) for v in asdict(run).values()])
                for label, stats in (("mean", agg.mean), ("stderr", agg.stderr)):
                    first = agg.runs[0]
                    ident = dict(scheme=first.scheme, temperature=first.temperature, k=first.k,
                                 alpha=first.alpha, eta=first.eta, beta_init=first.beta_init,
                                 seed=None)
                    w.writerow([label] + [_cell(ident[c] if c in ident else stats[c])
                                          for c in METRIC_COLUMNS])
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


def read_csv_rows(path) -> list:
    """Data rows of a file written by ``emit_csv`` as dicts of strings."""
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
