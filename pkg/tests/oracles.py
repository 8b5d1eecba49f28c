"""Independent reference implementations used as test oracles.

Each one recomputes a result from its definition by brute force, sharing no
code with the package beyond plain data containers.
"""
from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np


def coverage_sum(scores: Sequence[float], k: int) -> float:
    """Coverage as the left-to-right sum of the ``k`` largest scores, clamped to 1 from ``k = m`` on.

    Summation order matters at the p = 0 boundary, where drops of one ulp decide
    feasibility; adding the largest scores first is the natural reading of the sum.
    """
    top = sorted((float(v) for v in scores), reverse=True)
    if k >= len(top):
        return 1.0
    total = 0.0
    for v in top[: max(k, 0)]:
        total += v
    return min(total, 1.0)


def brute_force_k_final(
    scores: Sequence[float],
    grid: Sequence[int],
    latency_at: Sequence[float],
    k_base: int,
    t_anchor: float,
    p: float,
) -> int:
    """Final budget from the feasible-set definition.

    ``latency_at[j]`` is the predicted latency at ``grid[j]``.  Feasible budgets
    meet both the anchor and the coverage bound; a non-bottleneck takes the
    largest latency-feasible budget; a bottleneck takes the largest feasible
    budget, or (feasible set empty) the smallest budget meeting the coverage
    bound alone.
    """
    grid = list(grid)
    t_base = latency_at[grid.index(k_base)]
    lat_ok = [k for k, t in zip(grid, latency_at) if t <= t_anchor]
    if t_base <= t_anchor:
        return max(lat_ok)
    # same left-to-right sums as coverage_sum, built once
    top = sorted((float(v) for v in scores), reverse=True)
    prefix = [0.0]
    for v in top:
        prefix.append(prefix[-1] + v)

    def cov(k: int) -> float:
        return 1.0 if k >= len(top) else min(prefix[max(k, 0)], 1.0)

    c_base = cov(k_base)
    cov_ok = [k for k in grid if c_base - cov(k) <= p]
    feasible = [k for k in lat_ok if k in cov_ok]
    if feasible:
        return max(feasible)
    return min(cov_ok)


def equal_card_partitions(n: int, num_bins: int, cap: int | None):
    """Every assignment of ``n`` items to bins (bin labels canonicalized) respecting ``cap``."""
    seen = set()
    for labels in itertools.product(range(num_bins), repeat=n):
        # canonical relabeling: first occurrence order
        remap, canon = {}, []
        for lab in labels:
            remap.setdefault(lab, len(remap))
            canon.append(remap[lab])
        key = tuple(canon)
        if key in seen:
            continue
        seen.add(key)
        counts = np.bincount(canon, minlength=num_bins)
        if cap is not None and counts.max() > cap:
            continue
        yield key


def optimal_max_load(weights: Sequence[float], num_bins: int, cap: int | None = None) -> float:
    """Exact min over partitions of the max bin load, by exhaustive search with pruning."""
    w = sorted(weights, reverse=True)
    n = len(w)
    best = [float("inf")]
    loads = [0.0] * num_bins
    counts = [0] * num_bins

    def rec(i: int):
        if i == n:
            best[0] = min(best[0], max(loads))
            return
        tried = set()
        for b in range(num_bins):
            if cap is not None and counts[b] >= cap:
                continue
            key = (loads[b], counts[b])
            if key in tried:
                continue
            tried.add(key)
            if loads[b] + w[i] >= best[0]:
                continue
            loads[b] += w[i]
            counts[b] += 1
            rec(i + 1)
            loads[b] -= w[i]
            counts[b] -= 1

    rec(0)
    return best[0]


def one_f_one_b_makespan_uniform(pp: int, m: int, f: float, b: float) -> float:
    """Closed-form 1F1B makespan, no communication, every micro-batch costing ``f``/``b`` on every stage."""
    return (m + pp - 1) * (f + b)


def serial_sum(fwd: Sequence[float], bwd: Sequence[float]) -> float:
    return float(sum(fwd) + sum(bwd))


def ema_reference(start: float, observations: Sequence[float], alpha: float) -> float:
    v = start
    for o in observations:
        v = (1 - alpha) * v + alpha * o
    return v
