"""Workload-aware dynamic sparsity tuning.

Every micro-batch is aligned to a shared execution anchor (min, mean or max of
the predicted base-budget latencies).  Micro-batches above the anchor are
compressed, but never so far that the routing-score coverage drops by more than
``threshold_p`` relative to the base budget; those below it are expanded up to
the largest budget that still fits under the anchor.
"""
from __future__ import annotations

import csv
import enum
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .predictor import ProfileTable
from .workload import GlobalBatch, MicroBatch, RoutingProfile

COMPRESSED = "compressed"
EXPANDED = "expanded"
UNCHANGED = "unchanged"


class AnchorStrategy(str, enum.Enum):
    MIN = "min"
    MEAN = "mean"
    MAX = "max"


@dataclass(frozen=True)
class DstConfig:
    threshold_p: float = 0.1
    anchor: AnchorStrategy = AnchorStrategy.MEAN
    # None means "use the profile table's budget grid"
    budget_grid: tuple[int, ...] | None = None
    # "rank": anchor over one DP rank's micro-batches; "global": over every rank's
    anchor_scope: str = "global"

    def __post_init__(self):
        try:
            object.__setattr__(self, "anchor", AnchorStrategy(self.anchor))
        except ValueError:
            raise ConfigError(f"anchor must be min, mean or max, got {self.anchor!r}", "dst.anchor") from None
        if not 0.0 <= self.threshold_p <= 1.0:
            raise ConfigError(f"threshold_p must lie in [0, 1], got {self.threshold_p}", "dst.threshold_p")
        if self.anchor_scope not in ("rank", "global"):
            raise ConfigError(f"anchor_scope must be 'rank' or 'global', got {self.anchor_scope!r}", "dst.anchor_scope")
        if self.budget_grid is not None:
            grid = tuple(int(k) for k in self.budget_grid)
            if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
                raise ConfigError("dst budget grid must be non-empty and strictly ascending", "dst.budget_grid")
            object.__setattr__(self, "budget_grid", grid)

    def grid_for(self, table: ProfileTable) -> np.ndarray:
        if self.budget_grid is None:
            return table.budget_grid
        if tuple(self.budget_grid) != tuple(table.budgets):
            raise ConfigError("dst budget grid differs from the profile table's budget grid", "dst.budget_grid")
        return table.budget_grid

    def to_dict(self) -> dict:
        out = {"threshold_p": self.threshold_p, "anchor": self.anchor.value, "anchor_scope": self.anchor_scope}
        if self.budget_grid is not None:
            out["budget_grid"] = list(self.budget_grid)
        return out


@dataclass(frozen=True, slots=True)
class BudgetDecision:
    micro_batch_id: int
    layer_id: int
    k_base: int
    k_anchor: int
    k_final: int
    coverage_drop: float
    direction: str
    predicted_ms_base: float
    predicted_ms_final: float


def coverage(profile: RoutingProfile, k: int) -> float:
    """Share of routing mass held by the ``k`` top blocks; clamps to 1 past the block count."""
    return profile.coverage(k)


def select_anchor(latencies: Sequence[float], strategy: AnchorStrategy | str) -> float:
    if len(latencies) == 0:
        raise ValueError("cannot select an anchor from an empty latency list")
    strategy = AnchorStrategy(strategy)
    if strategy is AnchorStrategy.MIN:
        return float(min(latencies))
    if strategy is AnchorStrategy.MAX:
        return float(max(latencies))
    return float(sum(latencies) / len(latencies))


def _direction(k_base: int, k_final: int) -> str:
    if k_final < k_base:
        return COMPRESSED
    if k_final > k_base:
        return EXPANDED
    return UNCHANGED


def find_feasible_k(curve: np.ndarray, k_base: int, p: float, grid: np.ndarray) -> int:
    """Smallest grid budget whose coverage drop from ``k_base`` stays within ``p``.

    ``curve[k]`` is the coverage at budget ``k`` for ``k <= m``.
    """
    m = curve.size - 1
    c_base = curve[min(k_base, m)]
    drops = c_base - curve[np.minimum(grid, m)]
    ok = np.flatnonzero(drops <= p)
    if ok.size == 0:
        # only reachable when k_base is off-grid and no grid budget is above it
        return int(grid[-1])
    return int(grid[ok[0]])


def _check_base(k_base: int, grid: np.ndarray) -> None:
    if k_base not in grid:
        raise ConfigError(f"base budget {k_base} is not on the budget grid {list(grid)}", "k_base")


def tune_budget(
    mb: MicroBatch,
    layer: int,
    global_latencies: Sequence[float],
    cfg: DstConfig,
    table: ProfileTable,
    k_base: int,
    micro_batch_id: int = 0,
) -> BudgetDecision:
    """Final budget for one micro-batch at one layer."""
    grid = cfg.grid_for(table)
    _check_base(k_base, grid)
    t_anchor = select_anchor(global_latencies, cfg.anchor)
    x = mb.length_descriptor
    k_anchor = table.align(x, t_anchor).budget
    t_base = table.predict(x, k_base).value_ms
    curve = mb.coverage_matrix[layer]
    m = curve.size - 1
    c_base = curve[min(k_base, m)]
    k_final = k_anchor
    if t_base > t_anchor and c_base - curve[min(k_anchor, m)] > cfg.threshold_p:
        k_final = find_feasible_k(curve, k_base, cfg.threshold_p, grid)
    return BudgetDecision(
        micro_batch_id,
        layer,
        k_base,
        k_anchor,
        k_final,
        float(c_base - curve[min(k_final, m)]),
        _direction(k_base, k_final),
        t_base,
        table.predict(x, k_final).value_ms,
    )


@dataclass
class TuningResult:
    """Decisions for a global batch in micro-batch-major, layer-minor order."""

    decisions: list[BudgetDecision]
    anchor_ms: float
    overhead_ms: float
    num_micro_batches: int
    num_layers: int

    def budgets(self) -> np.ndarray:
        """``(num_micro_batches, num_layers)`` array of final budgets."""
        out = np.array([d.k_final for d in self.decisions], dtype=np.int64)
        return out.reshape(self.num_micro_batches, self.num_layers)

    def for_layer(self, layer: int) -> list[BudgetDecision]:
        return [d for d in self.decisions if d.layer_id == layer]


def base_latencies(gb: GlobalBatch, table: ProfileTable) -> list[float]:
    return [table.predict(mb.length_descriptor, k).value_ms for mb, k in zip(gb.micro_batches, gb.base_budgets)]


def tune_global_batch(
    gb: GlobalBatch,
    cfg: DstConfig,
    table: ProfileTable,
    layer: int | None = None,
    anchor_latencies: Sequence[float] | None = None,
) -> TuningResult:
    """Tune every micro-batch of ``gb`` at ``layer`` (or at all layers when ``None``).

    The anchor is computed once from base-budget latencies and shared by all
    layers.  ``anchor_latencies`` overrides the latency list the anchor is
    selected from, e.g. to anchor across several DP ranks.
    """
    start = time.perf_counter()
    grid = cfg.grid_for(table)
    p = cfg.threshold_p
    rows = [table.row(mb.length_descriptor) for mb in gb.micro_batches]
    t_base = []
    for mb, row, k in zip(gb.micro_batches, rows, gb.base_budgets):
        _check_base(k, grid)
        t_base.append(float(row[int(np.searchsorted(grid, k))]))
    t_anchor = select_anchor(t_base if anchor_latencies is None else anchor_latencies, cfg.anchor)
    layers = None if layer is None else [layer]

    decisions: list[BudgetDecision] = []
    for i, (mb, row, k_base) in enumerate(zip(gb.micro_batches, rows, gb.base_budgets)):
        a_idx = int(np.searchsorted(row, t_anchor, side="right")) - 1
        k_anchor = int(grid[max(a_idx, 0)])
        cov = mb.coverage_matrix if layers is None else mb.coverage_matrix[layers]
        m = cov.shape[1] - 1
        c_base = cov[:, min(k_base, m)]
        drop_anchor = c_base - cov[:, min(k_anchor, m)]
        layer_ids = range(cov.shape[0]) if layers is None else layers
        if t_base[i] > t_anchor and np.any(drop_anchor > p):
            drops = c_base[:, None] - cov[:, np.minimum(grid, m)]
            k_cov = grid[np.argmax(drops <= p, axis=1)]
            k_final = np.where(drop_anchor > p, k_cov, k_anchor)
        else:
            k_final = np.full(cov.shape[0], k_anchor, dtype=np.int64)
        final_drop = c_base - cov[np.arange(cov.shape[0]), np.minimum(k_final, m)]
        t_final = row[np.searchsorted(grid, k_final)]
        tb = t_base[i]
        for lid, kf, dr, tf in zip(layer_ids, k_final.tolist(), final_drop.tolist(), t_final.tolist()):
            decisions.append(BudgetDecision(i, lid, k_base, k_anchor, kf, dr, _direction(k_base, kf), tb, tf))
    overhead = (time.perf_counter() - start) * 1000.0
    n_layers = gb.micro_batches[0].num_layers if layer is None else 1
    return TuningResult(decisions, t_anchor, overhead, len(gb), n_layers)


DECISION_COLUMNS = ("iter", "mb", "layer", "k_base", "k_anchor", "k_final", "cov_drop", "dir", "t_base_ms", "t_final_ms")


def decision_rows(iteration: int, decisions: Iterable[BudgetDecision], mb_offset: int = 0) -> list[list]:
    return [
        [
            iteration,
            d.micro_batch_id + mb_offset,
            d.layer_id,
            d.k_base,
            d.k_anchor,
            d.k_final,
            f"{d.coverage_drop:.9f}",
            d.direction,
            f"{d.predicted_ms_base:.6f}",
            f"{d.predicted_ms_final:.6f}",
        ]
        for d in decisions
    ]


def write_decisions_csv(rows: Iterable[Sequence], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DECISION_COLUMNS)
        writer.writerows(rows)
