"""Profiling-table latency model.

A :class:`ProfileTable` stores the per-layer latency ``M[x, k]`` on a grid of
micro-batch token counts ``x`` and attention budgets ``k``.  ``predict``
interpolates bilinearly inside the grid and clamps (with a flag) outside it;
``align`` returns the largest grid budget whose predicted latency fits a target.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError
from .workload import BLOCK_SIZE


class LatencyEstimate(NamedTuple):
    value_ms: float
    extrapolated: bool


class Alignment(NamedTuple):
    budget: int
    feasible: bool


def _segment(grid: np.ndarray, v: float) -> tuple[int, int, float, bool]:
    """Bracketing indices and interpolation weight of ``v`` on ``grid``."""
    n = grid.size
    if v <= grid[0]:
        return 0, 0, 0.0, bool(v < grid[0])
    if v >= grid[-1]:
        return n - 1, n - 1, 0.0, bool(v > grid[-1])
    i = int(np.searchsorted(grid, v, side="right")) - 1
    lo, hi = grid[i], grid[i + 1]
    return i, i + 1, float((v - lo) / (hi - lo)), False


@dataclass(frozen=True, eq=False)
class ProfileTable:
    length_bins: np.ndarray
    budget_grid: np.ndarray
    latency_ms: np.ndarray
    repaired: bool = False

    def __post_init__(self):
        xs, ks, m = self.length_bins, self.budget_grid, self.latency_ms
        if xs.ndim != 1 or ks.ndim != 1 or xs.size < 2 or ks.size < 2:
            raise ConfigError("profile table needs at least two length bins and two budgets", "grid")
        if np.any(np.diff(xs) <= 0):
            raise ConfigError("length bins must be strictly ascending", "length_bins")
        if np.any(np.diff(ks) <= 0):
            raise ConfigError("budget grid must be strictly ascending", "budget_grid")
        if xs[0] < 1 or ks[0] < 1:
            raise ConfigError("grid values must be >= 1", "grid")
        if m.shape != (xs.size, ks.size):
            raise ConfigError(f"latency matrix shape {m.shape} does not match grid {(xs.size, ks.size)}", "latency_ms")
        if not np.all(np.isfinite(m)) or np.any(m <= 0):
            raise ConfigError("latencies must be finite and positive", "latency_ms")
        for arr in (xs, ks, m):
            arr.setflags(write=False)

    @classmethod
    def build(cls, length_bins, budget_grid, latency_ms) -> ProfileTable:
        """Construct a table, repairing any decrease along the budget axis to the running max."""
        xs = np.asarray(length_bins, dtype=np.float64).copy()
        ks = np.asarray(budget_grid, dtype=np.int64).copy()
        raw = np.asarray(latency_ms, dtype=np.float64)
        fixed = np.maximum.accumulate(raw, axis=1)
        return cls(xs, ks, fixed, repaired=bool(np.any(fixed != raw)))

    @property
    def budgets(self) -> list[int]:
        return [int(k) for k in self.budget_grid]

    def row(self, x: float) -> np.ndarray:
        """Predicted latency at every grid budget for token count ``x``."""
        i0, i1, t, _ = _segment(self.length_bins, x)
        a = self.latency_ms[i0]
        if i0 == i1 or t == 0.0:
            return a
        b = self.latency_ms[i1]
        return np.clip((1.0 - t) * a + t * b, np.minimum(a, b), np.maximum(a, b))

    def predict(self, x: float, k: float) -> LatencyEstimate:
        _, _, _, x_out = _segment(self.length_bins, x)
        j0, j1, t, k_out = _segment(self.budget_grid, k)
        row = self.row(x)
        v0 = float(row[j0])
        if j0 == j1 or t == 0.0:
            return LatencyEstimate(v0, x_out or k_out)
        v1 = float(row[j1])
        value = min(max(v0 + t * (v1 - v0), v0), v1)
        return LatencyEstimate(value, x_out or k_out)

    def align(self, x: float, target_ms: float) -> Alignment:
        row = self.row(x)
        idx = int(np.searchsorted(row, target_ms, side="right")) - 1
        if idx < 0:
            return Alignment(int(self.budget_grid[0]), False)
        return Alignment(int(self.budget_grid[idx]), True)


def predict(table: ProfileTable, x: float, k: float) -> LatencyEstimate:
    return table.predict(x, k)


def align(table: ProfileTable, x: float, target_ms: float) -> Alignment:
    return table.align(x, target_ms)


@dataclass(frozen=True)
class CostModelSpec:
    """Per-layer latency ``c_lin*x + c_attn*x*min(k*block_size, x) + c_fixed`` in ms."""

    c_lin: float = 3.0e-4
    c_attn: float = 4.0e-8
    c_fixed: float = 0.3
    block_size: int = BLOCK_SIZE
    noise_sigma: float = 0.0

    def __post_init__(self):
        for name in ("c_lin", "c_attn", "c_fixed"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"cost coefficient {name} must be non-negative", name)
        if self.c_lin == 0 and self.c_attn == 0 and self.c_fixed == 0:
            raise ConfigError("at least one cost coefficient must be positive", "c_fixed")
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1", "block_size")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative", "noise_sigma")

    def latency(self, x, k):
        x = np.asarray(x, dtype=np.float64)
        k = np.asarray(k, dtype=np.float64)
        return self.c_lin * x + self.c_attn * x * np.minimum(k * self.block_size, x) + self.c_fixed

    def to_dict(self) -> dict:
        return {
            "c_lin": self.c_lin,
            "c_attn": self.c_attn,
            "c_fixed": self.c_fixed,
            "block_size": self.block_size,
            "noise_sigma": self.noise_sigma,
        }


DEFAULT_BUDGET_GRID = tuple(range(4, 65, 4))
DEFAULT_LENGTH_BINS = (256, 512) + tuple(range(1024, 131072 + 1, 1024))


def synthesize_table(
    model: CostModelSpec,
    bins: Sequence[float] = DEFAULT_LENGTH_BINS,
    grid: Sequence[int] = DEFAULT_BUDGET_GRID,
    seed: int = 0,
) -> ProfileTable:
    xs = np.asarray(bins, dtype=np.float64)
    ks = np.asarray(grid, dtype=np.int64)
    cells = model.latency(xs[:, None], ks[None, :])
    if model.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        cells = cells * np.exp(model.noise_sigma * rng.standard_normal(cells.shape))
    return ProfileTable.build(xs, ks, cells)


def _fmt_num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def save_table(table: ProfileTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "k", "latency_ms"])
        for i, x in enumerate(table.length_bins):
            for j, k in enumerate(table.budget_grid):
                writer.writerow([_fmt_num(x), int(k), repr(float(table.latency_ms[i, j]))])


def load_table(path: str | Path) -> ProfileTable:
    """Read a ``x,k,latency_ms`` CSV; rows may come in any order."""
    cells: dict[tuple[float, int], float] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "k", "latency_ms"]:
            raise ConfigError(f"{path}:1: expected header 'x,k,latency_ms', got {header!r}", "header")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 fields, got {len(row)}", f"line {lineno}")
            try:
                x = float(row[0])
                kf = float(row[1])
                lat = float(row[2])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-numeric field in {row!r}", f"line {lineno}") from None
            if not kf.is_integer():
                raise ConfigError(f"{path}:{lineno}: budget {row[1]!r} is not an integer", f"line {lineno}")
            key = (x, int(kf))
            if key in cells:
                raise ConfigError(f"{path}:{lineno}: duplicate cell x={row[0]}, k={row[1]}", f"line {lineno}")
            cells[key] = lat
    if not cells:
        raise ConfigError(f"{path}: table has no rows", "rows")
    xs = sorted({x for x, _ in cells})
    ks = sorted({k for _, k in cells})
    mat = np.empty((len(xs), len(ks)))
    for i, x in enumerate(xs):
        for j, k in enumerate(ks):
            if (x, k) not in cells:
                raise ConfigError(f"{path}: missing cell (x={_fmt_num(x)}, k={k}); grid is not rectangular", "cells")
            mat[i, j] = cells[(x, k)]
    return ProfileTable.build(xs, ks, mat)
