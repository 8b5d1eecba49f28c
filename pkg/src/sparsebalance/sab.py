"""Sparsity-aware batching.

Samples are weighted by the predicted latency at their estimated attention
budget, then packed twice with a balanced partition solver: first across DP
ranks, then into micro-batches within each rank.  Packing never crosses the
global batch.  :func:`plan_lbb` is the length-weighted baseline and
:func:`plan_in_order` the unbalanced stream-order baseline.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dst import BudgetDecision
from .errors import ConfigError
from .predictor import DEFAULT_BUDGET_GRID, ProfileTable
from .workload import Sample

DEFAULT_BIN_EDGES = (1, 2048, 4096, 8192, 12288, 16384, 20480, 24576, 32768, 49152)


@dataclass(frozen=True)
class BatchingConfig:
    gbs: int = 16
    mbs: int = 2
    dp: int = 2

    def __post_init__(self):
        for name in ("gbs", "mbs", "dp"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", f"batching.{name}")
        if self.gbs % (self.mbs * self.dp):
            raise ConfigError(
                f"gbs={self.gbs} is not divisible by mbs*dp={self.mbs * self.dp}", "batching.gbs"
            )

    @property
    def micro_batches_per_rank(self) -> int:
        return self.gbs // (self.mbs * self.dp)

    @property
    def samples_per_rank(self) -> int:
        return self.gbs // self.dp


@dataclass(frozen=True)
class SparsityEstimator:
    """Per-length-bin EMA of the final budgets DST produced.

    Bin ``i`` holds lengths in ``[bin_edges[i], bin_edges[i+1])``; the last bin is
    open-ended and lengths below the first edge fall in bin 0.
    """

    bin_edges: tuple[int, ...] = DEFAULT_BIN_EDGES
    budget_grid: tuple[int, ...] = DEFAULT_BUDGET_GRID
    default_budget: int = 32
    ema_alpha: float = 0.2
    ema_budget: tuple[float, ...] = ()
    updated: tuple[bool, ...] = ()

    def __post_init__(self):
        edges = tuple(int(e) for e in self.bin_edges)
        grid = tuple(int(k) for k in self.budget_grid)
        if not edges or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ConfigError("bin_edges must be non-empty and strictly ascending", "sab.bin_edges")
        if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("budget_grid must be non-empty and strictly ascending", "sab.budget_grid")
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ConfigError(f"ema_alpha must lie in (0, 1], got {self.ema_alpha}", "sab.ema_alpha")
        if not grid[0] <= self.default_budget <= grid[-1]:
            raise ConfigError("default_budget must lie within the budget grid range", "sab.default_budget")
        ema = tuple(float(v) for v in self.ema_budget) or (float(self.default_budget),) * len(edges)
        upd = tuple(bool(v) for v in self.updated) or (False,) * len(edges)
        if len(ema) != len(edges) or len(upd) != len(edges):
            raise ConfigError("one EMA entry is required per length bin", "sab.ema_budget")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "budget_grid", grid)
        object.__setattr__(self, "ema_budget", ema)
        object.__setattr__(self, "updated", upd)

    def bin_index(self, length: int) -> int:
        idx = int(np.searchsorted(self.bin_edges, length, side="right")) - 1
        return min(max(idx, 0), len(self.bin_edges) - 1)

    def nearest_budget(self, value: float) -> int:
        grid = self.budget_grid
        return min(grid, key=lambda k: (abs(k - value), k))


def estimate_sparsity(est: SparsityEstimator, length: int) -> int:
    idx = est.bin_index(length)
    if not est.updated[idx]:
        return est.default_budget
    return est.nearest_budget(est.ema_budget[idx])


def calibrate(
    est: SparsityEstimator, decisions: Sequence[BudgetDecision], lengths: Sequence[int]
) -> SparsityEstimator:
    """Fold each decision's final budget into the EMA of its length's bin, in order."""
    if len(decisions) != len(lengths):
        raise ValueError(f"{len(decisions)} decisions but {len(lengths)} lengths")
    if not decisions:
        return est
    ema = list(est.ema_budget)
    upd = list(est.updated)
    lo, hi = est.budget_grid[0], est.budget_grid[-1]
    a = est.ema_alpha
    for d, length in zip(decisions, lengths):
        i = est.bin_index(length)
        ema[i] = min(max((1.0 - a) * ema[i] + a * d.k_final, lo), hi)
        upd[i] = True
    return replace(est, ema_budget=tuple(ema), updated=tuple(upd))


def compute_weights(samples: Sequence[Sample], est: SparsityEstimator, table: ProfileTable) -> np.ndarray:
    return np.array([table.predict(s.length, estimate_sparsity(est, s.length)).value_ms for s in samples])


def _max_load_swap(weights, bins, loads, capacity) -> None:
    """Local search on the heaviest bin: apply the best max-reducing swap (or move) until none is left."""
    n_bins = len(bins)
    scale = max(max(loads), 1e-300)
    for _ in range(10 * sum(len(b) for b in bins) ** 2 + 10):
        h = max(range(n_bins), key=lambda b: (loads[b], -b))
        top = loads[h]
        best = None
        for b in range(n_bins):
            if b == h:
                continue
            for pi, i in enumerate(bins[h]):
                wi = weights[i]
                if capacity is None or len(bins[b]) < capacity:
                    new_max = max(top - wi, loads[b] + wi)
                    if new_max < top - 1e-12 * scale and (best is None or new_max < best[0]):
                        best = (new_max, b, pi, None)
                for pj, j in enumerate(bins[b]):
                    d = wi - weights[j]
                    if d <= 0:
                        continue
                    new_max = max(top - d, loads[b] + d)
                    if new_max < top - 1e-12 * scale and (best is None or new_max < best[0]):
                        best = (new_max, b, pi, pj)
        if best is None:
            return
        _, b, pi, pj = best
        i = bins[h][pi]
        if pj is None:
            bins[h].pop(pi)
            bins[b].append(i)
            loads[h] -= weights[i]
            loads[b] += weights[i]
        else:
            j = bins[b][pj]
            bins[h][pi], bins[b][pj] = j, i
            loads[h] += weights[j] - weights[i]
            loads[b] += weights[i] - weights[j]


def bin_packing(
    weights: Sequence[float], num_bins: int, capacity: int | None = None, improve: bool = True
) -> list[list[int]]:
    """Balanced partition of item indices into ``num_bins`` bins.

    Longest-processing-time greedy (heaviest item to the lightest bin with
    room, ties to the lowest bin index) followed by a swap pass that lowers the
    maximum bin load.  ``capacity`` caps the number of items per bin.
    """
    w = [float(v) for v in weights]
    n = len(w)
    if num_bins < 1:
        raise ConfigError("num_bins must be >= 1", "num_bins")
    if num_bins > n:
        raise ConfigError(f"cannot fill {num_bins} bins from {n} items", "num_bins")
    if capacity is not None and capacity * num_bins < n:
        raise ConfigError(f"{n} items do not fit in {num_bins} bins of {capacity}", "capacity")
    bins: list[list[int]] = [[] for _ in range(num_bins)]
    loads = [0.0] * num_bins
    for i in sorted(range(n), key=lambda i: (-w[i], i)):
        b = min(
            (b for b in range(num_bins) if capacity is None or len(bins[b]) < capacity),
            key=lambda b: (loads[b], b),
        )
        bins[b].append(i)
        loads[b] += w[i]
    if improve:
        _max_load_swap(w, bins, loads, capacity)
    return bins


@dataclass
class PackingPlan:
    dp_bins: list[list[int]]
    micro_batch_bins: list[list[list[int]]]
    weights: dict[int, float] = field(default_factory=dict)

    def rank_loads(self) -> list[float]:
        return [sum(self.weights[i] for i in rank) for rank in self.dp_bins]

    def sample_ids(self) -> list[int]:
        return [i for rank in self.micro_batch_bins for mb in rank for i in mb]

    def to_json(self) -> dict:
        return {
            "ranks": [
                [{"samples": list(mb), "weights": [self.weights.get(i, 0.0) for i in mb]} for mb in rank]
                for rank in self.micro_batch_bins
            ]
        }

    @classmethod
    def from_json(cls, data: dict) -> PackingPlan:
        mb_bins, weights = [], {}
        for rank in data["ranks"]:
            mb_bins.append([])
            for mb in rank:
                mb_bins[-1].append([int(i) for i in mb["samples"]])
                weights.update({int(i): float(w) for i, w in zip(mb["samples"], mb["weights"])})
        dp_bins = [[i for mb in rank for i in mb] for rank in mb_bins]
        return cls(dp_bins, mb_bins, weights)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def _check_batch(batch: Sequence[Sample], cfg: BatchingConfig) -> None:
    if len(batch) != cfg.gbs:
        raise ConfigError(f"batch has {len(batch)} samples, expected gbs={cfg.gbs}", "batching.gbs")


def plan_with_weights(batch: Sequence[Sample], weights: Sequence[float], cfg: BatchingConfig) -> PackingPlan:
    """Two-level equal-cardinality packing: DP ranks first, then micro-batches per rank."""
    _check_batch(batch, cfg)
    w = [float(v) for v in weights]
    dp_idx = bin_packing(w, cfg.dp, capacity=cfg.samples_per_rank)
    dp_bins, mb_bins = [], []
    for idx in dp_idx:
        local = bin_packing([w[i] for i in idx], cfg.micro_batches_per_rank, capacity=cfg.mbs)
        mb_bins.append([[batch[idx[j]].id for j in mb] for mb in local])
        dp_bins.append([i for mb in mb_bins[-1] for i in mb])
    return PackingPlan(dp_bins, mb_bins, {s.id: wi for s, wi in zip(batch, w)})


def plan_batching(
    batch: Sequence[Sample], cfg: BatchingConfig, est: SparsityEstimator, table: ProfileTable
) -> PackingPlan:
    return plan_with_weights(batch, compute_weights(batch, est, table), cfg)


def plan_lbb(batch: Sequence[Sample], cfg: BatchingConfig) -> PackingPlan:
    return plan_with_weights(batch, [float(s.length) for s in batch], cfg)


def plan_in_order(batch: Sequence[Sample], cfg: BatchingConfig) -> PackingPlan:
    """Stream order: consecutive samples per rank, consecutive ``mbs`` chunks per micro-batch."""
    _check_batch(batch, cfg)
    per_rank = cfg.samples_per_rank
    dp_bins, mb_bins = [], []
    for r in range(cfg.dp):
        ids = [s.id for s in batch[r * per_rank : (r + 1) * per_rank]]
        dp_bins.append(ids)
        mb_bins.append([ids[j : j + cfg.mbs] for j in range(0, per_rank, cfg.mbs)])
    return PackingPlan(dp_bins, mb_bins, {s.id: float(s.length) for s in batch})
