"""Workload hierarchy and synthetic generators.

A :class:`Sample` carries one routing profile per model layer; a profile is the
descending-sorted, normalized vector of block importance scores that a block
sparse attention indexer would emit for that sequence.  Lengths come from a
:class:`LengthDistributionSpec`, profiles from a :class:`ConcentrationSpec`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING, Any, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ConfigError, PlanError

if TYPE_CHECKING:
    from .sab import PackingPlan

BLOCK_SIZE = 256
DEFAULT_NUM_LAYERS = 36

LENGTH_KINDS = ("bimodal", "long_tail", "histogram_file", "fixed")


def num_blocks(length: int, block_size: int = BLOCK_SIZE) -> int:
    return max(1, math.ceil(length / block_size))


def _cumulative(scores: np.ndarray) -> np.ndarray:
    cum = np.empty(scores.shape[:-1] + (scores.shape[-1] + 1,))
    cum[..., 0] = 0.0
    np.cumsum(scores, axis=-1, out=cum[..., 1:])
    np.minimum(cum, 1.0, out=cum)
    cum[..., -1] = 1.0
    return cum


@dataclass(frozen=True, eq=False)
class RoutingProfile:
    """Descending normalized block scores ``r_1 >= r_2 >= ... >= r_m``."""

    scores: np.ndarray

    @classmethod
    def from_raw(cls, values: Sequence[float] | np.ndarray) -> RoutingProfile:
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ConfigError("routing scores must be a non-empty vector", "scores")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ConfigError("routing scores must be finite and non-negative", "scores")
        total = arr.sum()
        if total <= 0:
            raise ConfigError("routing scores must have positive mass", "scores")
        arr = np.sort(arr)[::-1] / total
        arr.setflags(write=False)
        return cls(arr)

    @property
    def num_blocks(self) -> int:
        return int(self.scores.size)

    @cached_property
    def cumulative(self) -> np.ndarray:
        """``cumulative[k]`` is the coverage at budget ``k`` for ``0 <= k <= m``."""
        cum = _cumulative(self.scores)
        cum.setflags(write=False)
        return cum

    def coverage(self, k: int) -> float:
        if k <= 0:
            return 0.0
        return float(self.cumulative[min(k, self.num_blocks)])

    def budget_for_coverage(self, target: float) -> int:
        """Smallest budget whose coverage reaches ``target``."""
        idx = int(np.searchsorted(self.cumulative, target - 1e-12, side="left"))
        return min(max(idx, 0), self.num_blocks)


@dataclass(frozen=True, eq=False)
class Sample:
    id: int
    length: int
    routing_profiles: tuple[RoutingProfile, ...]

    def __post_init__(self):
        if self.length < 1:
            raise ConfigError(f"sample {self.id}: length must be >= 1", "length")

    @property
    def num_layers(self) -> int:
        return len(self.routing_profiles)

    @cached_property
    def score_matrix(self) -> np.ndarray:
        return np.stack([p.scores for p in self.routing_profiles])


@dataclass(frozen=True, eq=False)
class MicroBatch:
    """Samples executed together; ``length_descriptor`` is their total token count.

    The per-layer profile of a multi-sample micro-batch is the token-weighted
    average of its members' profiles (zero-padded to the longest), re-sorted.
    """

    samples: tuple[Sample, ...]

    def __post_init__(self):
        if not self.samples:
            raise ConfigError("micro-batch must contain at least one sample", "samples")
        layers = {s.num_layers for s in self.samples}
        if len(layers) != 1:
            raise ConfigError("micro-batch members disagree on layer count", "routing_profiles")

    @property
    def length_descriptor(self) -> int:
        return sum(s.length for s in self.samples)

    @property
    def num_layers(self) -> int:
        return self.samples[0].num_layers

    @property
    def sample_ids(self) -> list[int]:
        return [s.id for s in self.samples]

    @cached_property
    def score_matrix(self) -> np.ndarray:
        if len(self.samples) == 1:
            return self.samples[0].score_matrix
        width = max(s.score_matrix.shape[1] for s in self.samples)
        total = float(self.length_descriptor)
        agg = np.zeros((self.num_layers, width))
        for s in self.samples:
            mat = s.score_matrix
            agg[:, : mat.shape[1]] += mat * (s.length / total)
        agg = -np.sort(-agg, axis=1)
        agg /= agg.sum(axis=1, keepdims=True)
        return agg

    @cached_property
    def coverage_matrix(self) -> np.ndarray:
        """Row ``l`` holds the layer-``l`` coverage curve ``C(0..m)``."""
        return _cumulative(self.score_matrix)

    def layer_profile(self, layer: int) -> RoutingProfile:
        row = self.score_matrix[layer].copy()
        row.setflags(write=False)
        return RoutingProfile(row)


@dataclass(frozen=True, eq=False)
class GlobalBatch:
    """The micro-batches one DP rank executes in an iteration, with their base budgets."""

    micro_batches: tuple[MicroBatch, ...]
    base_budgets: tuple[int, ...]
    dp_rank: int = 0

    def __post_init__(self):
        if len(self.micro_batches) != len(self.base_budgets):
            raise ConfigError("one base budget is required per micro-batch", "base_budgets")

    def __len__(self) -> int:
        return len(self.micro_batches)


@dataclass(frozen=True)
class LengthDistributionSpec:
    """Sequence-length distribution.

    ``bimodal``: mixture of two truncated lognormals (``weights``, ``medians``,
    ``sigmas``).  ``long_tail``: truncated Pareto with ``shape``.  ``fixed``:
    every sample has ``length``.  ``histogram_file``: ``bins`` of
    ``(lo, hi, frequency)`` half-open token ranges.
    """

    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    min_length: int = 1
    max_length: int = 131072

    def __post_init__(self):
        _validate_length_spec(self)

    @classmethod
    def fixed(cls, length: int) -> LengthDistributionSpec:
        return cls("fixed", {"length": int(length)}, min_length=int(length), max_length=int(length))

    @classmethod
    def bimodal(
        cls,
        weights=(0.55, 0.45),
        medians=(1536.0, 24576.0),
        sigmas=(0.6, 0.35),
        min_length: int = 128,
        max_length: int = 65536,
    ) -> LengthDistributionSpec:
        """Short/long mixture shaped like an SFT corpus dominated by <4K and >16K sequences."""
        params = {"weights": list(weights), "medians": list(medians), "sigmas": list(sigmas)}
        return cls("bimodal", params, min_length=min_length, max_length=max_length)

    @classmethod
    def long_tail(cls, shape: float = 1.5, min_length: int = 8192, max_length: int = 73728) -> LengthDistributionSpec:
        return cls("long_tail", {"shape": float(shape)}, min_length=min_length, max_length=max_length)

    @classmethod
    def histogram(cls, bins: Sequence[tuple[int, int, float]]) -> LengthDistributionSpec:
        bins = [(int(lo), int(hi), float(f)) for lo, hi, f in bins]
        if not bins:
            raise ConfigError("histogram has no bins", "bins")
        lo = max(1, min(b[0] for b in bins))
        hi = max(b[1] for b in bins) - 1
        return cls("histogram_file", {"bins": bins}, min_length=lo, max_length=max(lo, hi))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "min_length": self.min_length, "max_length": self.max_length, **_plain(self.params)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LengthDistributionSpec:
        data = dict(data)
        kind = data.pop("kind", None)
        if kind not in LENGTH_KINDS:
            raise ConfigError(f"distribution kind must be one of {LENGTH_KINDS}, got {kind!r}", "distribution.kind")
        if kind == "histogram_file" and "path" in data and "bins" not in data:
            return load_histogram(data["path"])
        if kind == "histogram_file":
            return cls.histogram(data["bins"])
        if kind == "fixed":
            return cls.fixed(data["length"])
        bounds = {k: int(data.pop(k)) for k in ("min_length", "max_length") if k in data}
        if kind == "bimodal":
            return cls.bimodal(**data, **bounds)
        return cls.long_tail(**data, **bounds)


def _plain(params: dict[str, Any]) -> dict[str, Any]:
    out = {}
    for key, value in params.items():
        if isinstance(value, (list, tuple)):
            out[key] = [list(v) if isinstance(v, tuple) else v for v in value]
        else:
            out[key] = value
    return out


def _validate_length_spec(spec: LengthDistributionSpec) -> None:
    p = spec.params
    if spec.kind not in LENGTH_KINDS:
        raise ConfigError(f"distribution kind must be one of {LENGTH_KINDS}, got {spec.kind!r}", "kind")
    if spec.min_length < 1 or spec.max_length < spec.min_length:
        raise ConfigError("need 1 <= min_length <= max_length", "min_length")
    if spec.kind == "fixed":
        if int(p.get("length", 0)) < 1:
            raise ConfigError("fixed length must be >= 1", "length")
    elif spec.kind == "bimodal":
        for name in ("weights", "medians", "sigmas"):
            if len(p.get(name, ())) != 2:
                raise ConfigError(f"bimodal.{name} needs exactly two entries", name)
        if any(w < 0 for w in p["weights"]) or sum(p["weights"]) <= 0:
            raise ConfigError("bimodal weights must be non-negative with positive sum", "weights")
        if any(m <= 0 for m in p["medians"]):
            raise ConfigError("bimodal medians must be positive", "medians")
        if any(s <= 0 for s in p["sigmas"]):
            raise ConfigError("bimodal sigmas must be positive", "sigmas")
    elif spec.kind == "long_tail":
        if float(p.get("shape", 0)) <= 0:
            raise ConfigError("long_tail shape must be positive", "shape")
    else:
        bins = p.get("bins", [])
        if not bins:
            raise ConfigError("histogram has no bins", "bins")
        for lo, hi, freq in bins:
            if lo < 0 or hi <= lo:
                raise ConfigError(f"histogram bin [{lo},{hi}) is not a valid half-open range", "bins")
            if freq < 0:
                raise ConfigError(f"histogram bin [{lo},{hi}) has negative frequency", "frequency")
            if hi <= 1:
                raise ConfigError(f"histogram bin [{lo},{hi}) holds no positive length", "bins")
        if sum(b[2] for b in bins) <= 0:
            raise ConfigError("histogram is empty (all frequencies are zero)", "frequency")


def _truncated_lognormal(rng: np.random.Generator, n: int, median: float, sigma: float, lo: float, hi: float):
    mu = math.log(median)
    a = ndtr((math.log(lo) - mu) / sigma)
    b = ndtr((math.log(hi) - mu) / sigma)
    if b - a < 1e-12:
        return np.full(n, min(max(median, lo), hi))
    u = a + (b - a) * rng.random(n)
    return np.exp(mu + sigma * ndtri(u))


def sample_lengths(spec: LengthDistributionSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` integer lengths inside ``[min_length, max_length]``."""
    lo, hi = spec.min_length, spec.max_length
    p = spec.params
    if spec.kind == "fixed":
        return np.full(count, int(p["length"]), dtype=np.int64)
    if spec.kind == "bimodal":
        w = np.asarray(p["weights"], dtype=float)
        mode = (rng.random(count) >= w[0] / w.sum()).astype(int)
        raw = np.empty(count)
        for j in (0, 1):
            idx = np.flatnonzero(mode == j)
            raw[idx] = _truncated_lognormal(rng, idx.size, p["medians"][j], p["sigmas"][j], lo, hi)
    elif spec.kind == "long_tail":
        shape = float(p["shape"])
        u = rng.random(count)
        ratio = (lo / hi) ** shape
        raw = lo / (1.0 - u * (1.0 - ratio)) ** (1.0 / shape)
    else:
        bins = p["bins"]
        freqs = np.array([b[2] for b in bins], dtype=float)
        choice = rng.choice(len(bins), size=count, p=freqs / freqs.sum())
        u = rng.random(count)
        starts = np.array([max(b[0], 1) for b in bins], dtype=float)
        ends = np.array([b[1] for b in bins], dtype=float)
        raw = np.floor(starts[choice] + u * (ends[choice] - starts[choice]))
    return np.clip(np.rint(raw), lo, hi).astype(np.int64)


def load_histogram(path: str | Path) -> LengthDistributionSpec:
    """Parse ``lo_tokens,hi_tokens,frequency`` records (``#`` starts a comment)."""
    bins = []
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [t.strip() for t in line.split(",")]
        try:
            if len(parts) != 3:
                raise ValueError("expected 3 fields")
            lo, hi, freq = (int(t) for t in parts)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: malformed histogram row {raw!r} ({exc})", f"line {lineno}") from None
        if lo < 0 or hi <= lo or freq < 0:
            raise ConfigError(f"{path}:{lineno}: invalid histogram row {raw!r}", f"line {lineno}")
        bins.append((lo, hi, freq))
    if not bins:
        raise ConfigError(f"{path}: histogram is empty", "bins")
    return LengthDistributionSpec.histogram(bins)


@dataclass(frozen=True)
class ConcentrationSpec:
    """Dirichlet concentration for synthetic routing profiles.

    Each sequence draws ``alpha_seq = median_alpha * exp(seq_sigma * z)``; each
    layer multiplies it by ``exp(layer_sigma * z')``.  Smaller alpha puts more
    mass on fewer blocks (a more concentrated coverage curve).
    """

    median_alpha: float = 0.15
    seq_sigma: float = 0.8
    layer_sigma: float = 0.4
    min_alpha: float = 1e-3
    max_alpha: float = 1e3
    # alpha_seq scales by (length / reference_length) ** -length_exponent
    length_exponent: float = 0.0
    reference_length: int = 8192

    def __post_init__(self):
        if self.median_alpha <= 0:
            raise ConfigError("median_alpha must be positive", "median_alpha")
        if self.seq_sigma < 0 or self.layer_sigma < 0:
            raise ConfigError("sigmas must be non-negative", "seq_sigma")
        if not 0 < self.min_alpha <= self.max_alpha:
            raise ConfigError("need 0 < min_alpha <= max_alpha", "min_alpha")
        if self.reference_length < 1:
            raise ConfigError("reference_length must be >= 1", "reference_length")

    def to_dict(self) -> dict[str, float]:
        return {
            "median_alpha": self.median_alpha,
            "seq_sigma": self.seq_sigma,
            "layer_sigma": self.layer_sigma,
            "min_alpha": self.min_alpha,
            "max_alpha": self.max_alpha,
            "length_exponent": self.length_exponent,
            "reference_length": self.reference_length,
        }


def _dirichlet_profile(rng: np.random.Generator, m: int, alpha: float) -> RoutingProfile:
    if m == 1:
        arr = np.ones(1)
    else:
        arr = rng.dirichlet(np.full(m, alpha))
        if not np.all(np.isfinite(arr)) or arr.sum() <= 0:
            arr = np.zeros(m)
            arr[0] = 1.0
    arr = np.sort(arr)[::-1]
    arr = arr / arr.sum()
    arr.setflags(write=False)
    return RoutingProfile(arr)


def make_sample(
    sample_id: int,
    length: int,
    alpha_seq: float,
    rng: np.random.Generator,
    concentration: ConcentrationSpec,
    num_layers: int,
    block_size: int = BLOCK_SIZE,
) -> Sample:
    m = num_blocks(length, block_size)
    factors = np.exp(concentration.layer_sigma * rng.standard_normal(num_layers))
    alphas = np.clip(alpha_seq * factors, concentration.min_alpha, concentration.max_alpha)
    profiles = tuple(_dirichlet_profile(rng, m, float(a)) for a in alphas)
    return Sample(sample_id, int(length), profiles)


def generate_samples(
    spec: LengthDistributionSpec,
    count: int,
    concentration: ConcentrationSpec | None = None,
    seed: int | np.random.SeedSequence = 0,
    num_layers: int = DEFAULT_NUM_LAYERS,
    block_size: int = BLOCK_SIZE,
    start_id: int = 0,
) -> list[Sample]:
    if count < 1:
        raise ConfigError("count must be >= 1", "count")
    if num_layers < 1:
        raise ConfigError("num_layers must be >= 1", "num_layers")
    concentration = concentration or ConcentrationSpec()
    rng = np.random.default_rng(seed)
    lengths = sample_lengths(spec, count, rng)
    seq_alpha = concentration.median_alpha * np.exp(concentration.seq_sigma * rng.standard_normal(count))
    if concentration.length_exponent:
        seq_alpha = seq_alpha * (lengths / concentration.reference_length) ** -concentration.length_exponent
    return [
        make_sample(start_id + i, int(lengths[i]), float(seq_alpha[i]), rng, concentration, num_layers, block_size)
        for i in range(count)
    ]


def assemble_global_batch(
    samples: Sequence[Sample],
    plan: PackingPlan,
    dp_rank: int,
    base_budget: int = 32,
) -> GlobalBatch:
    """Materialize rank ``dp_rank``'s micro-batches from ``plan``."""
    by_id: dict[int, Sample] = {}
    for s in samples:
        if s.id in by_id:
            raise PlanError(f"duplicate sample id {s.id} in input")
        by_id[s.id] = s
    planned = [i for rank in plan.micro_batch_bins for mb in rank for i in mb]
    if len(planned) != len(set(planned)):
        dup = sorted({i for i in planned if planned.count(i) > 1})
        raise PlanError(f"plan assigns sample ids {dup} more than once")
    missing = sorted(set(by_id) - set(planned))
    extra = sorted(set(planned) - set(by_id))
    if missing or extra:
        raise PlanError(f"plan/sample mismatch: missing {missing}, unknown {extra}")
    if not 0 <= dp_rank < len(plan.micro_batch_bins):
        raise PlanError(f"dp_rank {dp_rank} out of range for {len(plan.micro_batch_bins)} ranks")
    mbs = tuple(MicroBatch(tuple(by_id[i] for i in ids)) for ids in plan.micro_batch_bins[dp_rank])
    return GlobalBatch(mbs, tuple([base_budget] * len(mbs)), dp_rank)
