"""One-iteration DP x PP training simulator with a non-interleaved 1F1B schedule.

Per-layer latencies come from the profile table; a stage's time for a
micro-batch is the sum over its layers, with backward = forward x
``fwd_bwd_ratio``.  The iteration ends when the slowest DP rank finishes its
pipeline, plus a fixed gradient-sync cost.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dst import BudgetDecision, DstConfig, TuningResult, tune_global_batch
from .errors import ConfigError
from .predictor import ProfileTable
from .sab import (
    BatchingConfig,
    PackingPlan,
    SparsityEstimator,
    calibrate,
    plan_batching,
    plan_in_order,
    plan_lbb,
)
from .workload import (
    BLOCK_SIZE,
    ConcentrationSpec,
    GlobalBatch,
    LengthDistributionSpec,
    MicroBatch,
    Sample,
    assemble_global_batch,
    generate_samples,
)

STRATEGIES = ("baseline", "dst", "sab", "lbb", "sab_dst", "lbb_dst")
FWD, BWD = "fwd", "bwd"


@dataclass(frozen=True)
class ClusterConfig:
    dp: int = 2
    pp: int = 4
    layers_per_stage: int = 9
    fwd_bwd_ratio: float = 2.0
    comm_ms: float = 0.5
    dp_sync_ms: float = 20.0

    def __post_init__(self):
        for name in ("dp", "pp", "layers_per_stage"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", f"cluster.{name}")
        if not self.fwd_bwd_ratio > 0:
            raise ConfigError("fwd_bwd_ratio must be positive", "cluster.fwd_bwd_ratio")
        if self.comm_ms < 0 or self.dp_sync_ms < 0:
            raise ConfigError("communication costs must be non-negative", "cluster.comm_ms")

    @property
    def num_layers(self) -> int:
        return self.pp * self.layers_per_stage

    def to_dict(self) -> dict:
        return {
            "dp": self.dp,
            "pp": self.pp,
            "layers_per_stage": self.layers_per_stage,
            "fwd_bwd_ratio": self.fwd_bwd_ratio,
            "comm_ms": self.comm_ms,
            "dp_sync_ms": self.dp_sync_ms,
        }


@dataclass(frozen=True)
class ScenarioSpec:
    strategy: str
    dst_config: DstConfig | None = None
    iterations: int | None = None
    seed: int | None = None
    name: str | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}", "scenarios")
        if self.uses_dst and self.dst_config is None:
            raise ConfigError(f"strategy {self.strategy} needs a dst config", "dst")
        if not self.uses_dst and self.dst_config is not None:
            raise ConfigError(f"strategy {self.strategy} does not take a dst config", "dst")

    @property
    def uses_dst(self) -> bool:
        return self.strategy.endswith("dst")

    @property
    def label(self) -> str:
        return self.name or self.strategy


@dataclass
class ScheduleResult:
    iter_ms: float
    per_mb_ms: list[float]
    imbalance: float
    bubble_ms: float
    critical_lb_ms: float
    dst_overhead_ms: float = 0.0
    sab_overhead_ms: float = 0.0
    avg_budget: float = 0.0
    mean_cov_drop: float = 0.0
    max_cov_drop: float = 0.0
    busy_ms: float = 0.0
    num_compressed: int = 0
    num_expanded: int = 0
    # T_max * pp + sum(T_other) + dp_sync_ms; reported for comparison with critical_lb_ms
    naive_lb_ms: float = 0.0

    @property
    def max_mb_ms(self) -> float:
        return max(self.per_mb_ms)

    @property
    def mean_mb_ms(self) -> float:
        return sum(self.per_mb_ms) / len(self.per_mb_ms)

    @property
    def total_ms(self) -> float:
        """Iteration time with the measured planning/tuning overheads charged on the critical path."""
        return self.iter_ms + self.dst_overhead_ms + self.sab_overhead_ms


def imbalance_ratio(times: Sequence[float]) -> float:
    """Max over mean of per-micro-batch execution times."""
    if len(times) == 0:
        raise ValueError("imbalance of an empty list")
    mean = sum(times) / len(times)
    return max(times) / mean if mean > 0 else 1.0


# ---------------------------------------------------------------- stage times


def _grid_index(table: ProfileTable, budgets: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(table.budget_grid, budgets)
    ok = (idx < table.budget_grid.size) & (table.budget_grid[np.minimum(idx, table.budget_grid.size - 1)] == budgets)
    if not np.all(ok):
        raise ConfigError("layer budgets must lie on the profile table's budget grid", "budgets")
    return idx


def micro_batch_time(
    mb: MicroBatch,
    budgets: Sequence[int],
    table: ProfileTable,
    cluster: ClusterConfig,
    phase: str = FWD,
) -> float:
    """Time of one pipeline stage on ``mb``: the sum of its layers' predictions."""
    x = mb.length_descriptor
    total = sum(table.predict(x, k).value_ms for k in budgets)
    return total * cluster.fwd_bwd_ratio if phase == BWD else total


def stage_times(
    micro_batches: Sequence[MicroBatch], budgets: np.ndarray, table: ProfileTable, cluster: ClusterConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Forward and backward times, each shaped ``(pp, num_micro_batches)``.

    ``budgets`` is ``(num_micro_batches, num_layers)`` with grid budgets.
    """
    budgets = np.asarray(budgets)
    n = len(micro_batches)
    if budgets.shape != (n, cluster.num_layers):
        raise ConfigError(
            f"budgets shape {budgets.shape} does not match ({n}, {cluster.num_layers})", "budgets"
        )
    idx = _grid_index(table, budgets)
    lat = np.empty(budgets.shape)
    for j, mb in enumerate(micro_batches):
        lat[j] = table.row(mb.length_descriptor)[idx[j]]
    fwd = lat.reshape(n, cluster.pp, cluster.layers_per_stage).sum(axis=2).T
    return fwd, fwd * cluster.fwd_bwd_ratio


# ------------------------------------------------------------------- pipeline


def one_f_one_b_order(stage: int, pp: int, m: int) -> list[tuple[str, int]]:
    warmup = min(pp - stage - 1, m)
    order = [(FWD, j) for j in range(warmup)]
    for i in range(m - warmup):
        order.append((FWD, warmup + i))
        order.append((BWD, i))
    order.extend((BWD, j) for j in range(m - warmup, m))
    return order


@dataclass
class PipelineTimeline:
    # (phase, micro-batch, start, end) per stage, in execution order
    ops: list[list[tuple[str, int, float, float]]]
    completion_ms: float
    busy_ms: list[float]
    lower_bound_ms: float

    @property
    def bubble_ms(self) -> list[float]:
        return [self.completion_ms - b for b in self.busy_ms]


def pipeline_lower_bound(fwd: np.ndarray, bwd: np.ndarray, comm_ms: float) -> float:
    """Critical-path bound built around each micro-batch's round trip.

    For micro-batch ``j``: stage-0 work ordered before its forward, plus its own
    stage-0 forward and backward, plus the larger of its round trip through
    the remaining stages and the stage-0 work scheduled inside that window,
    plus stage-0 work ordered after its backward.  With stage-uniform times and
    no other stage-0 work inside the window this is ``T_j * pp + sum(T_other)``.

    The simpler ``T_max * pp + sum(T_other)`` is not a bound for 1F1B: stage-0
    work that overlaps the straggler's round trip is counted twice.  With
    pp=2 and micro-batches (f=1, b=2), (f=10, b=20) the makespan is 61 while
    that formula gives 63.
    """
    pp, m = fwd.shape
    order = one_f_one_b_order(0, pp, m)
    dur = [fwd[0, j] if ph == FWD else bwd[0, j] for ph, j in order]
    prefix = np.concatenate([[0.0], np.cumsum(dur)])
    pos_f = {j: i for i, (ph, j) in enumerate(order) if ph == FWD}
    pos_b = {j: i for i, (ph, j) in enumerate(order) if ph == BWD}
    best = 0.0
    for j in range(m):
        f, b = pos_f[j], pos_b[j]
        before = prefix[f]
        inside = prefix[b] - prefix[f + 1]
        after = prefix[-1] - prefix[b + 1]
        trip = float(fwd[1:, j].sum() + bwd[1:, j].sum()) + 2 * (pp - 1) * comm_ms
        best = max(best, before + fwd[0, j] + max(inside, trip) + bwd[0, j] + after)
    return float(best)


def naive_critical_path(fwd: np.ndarray, bwd: np.ndarray) -> float:
    """``T_max * pp + sum(T_other)`` over stage-0 forward+backward times (not a valid bound, see above)."""
    t = fwd[0] + bwd[0]
    return float(t.max() * fwd.shape[0] + t.sum() - t.max())


def simulate_pipeline(fwd: np.ndarray, bwd: np.ndarray, comm_ms: float = 0.0) -> PipelineTimeline:
    """Event-driven 1F1B over ``pp`` stages; ``fwd``/``bwd`` are ``(pp, m)`` op durations."""
    fwd = np.asarray(fwd, dtype=np.float64)
    bwd = np.asarray(bwd, dtype=np.float64)
    pp, m = fwd.shape
    if m == 0:
        raise ValueError("pipeline needs at least one micro-batch")
    orders = [one_f_one_b_order(s, pp, m) for s in range(pp)]
    end_f = np.full((pp, m), np.nan)
    end_b = np.full((pp, m), np.nan)
    free = [0.0] * pp
    ptr = [0] * pp
    ops: list[list[tuple[str, int, float, float]]] = [[] for _ in range(pp)]
    remaining = sum(len(o) for o in orders)
    while remaining:
        progressed = False
        for s in range(pp):
            while ptr[s] < len(orders[s]):
                phase, j = orders[s][ptr[s]]
                if phase == FWD:
                    dep = 0.0 if s == 0 else end_f[s - 1, j] + comm_ms
                    dur = fwd[s, j]
                else:
                    dep = end_f[s, j] if s == pp - 1 else end_b[s + 1, j] + comm_ms
                    dur = bwd[s, j]
                if math.isnan(dep):
                    break
                start = max(free[s], dep)
                end = start + dur
                (end_f if phase == FWD else end_b)[s, j] = end
                free[s] = end
                ops[s].append((phase, j, start, end))
                ptr[s] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise RuntimeError("1F1B schedule deadlocked")
    completion = max(free)
    busy = [float(fwd[s].sum() + bwd[s].sum()) for s in range(pp)]
    return PipelineTimeline(ops, completion, busy, pipeline_lower_bound(fwd, bwd, comm_ms))


# ------------------------------------------------------------------ iteration


@dataclass
class IterationOutcome:
    result: ScheduleResult
    estimator: SparsityEstimator
    plan: PackingPlan
    tuning: list[TuningResult] = field(default_factory=list)
    timelines: list[PipelineTimeline] = field(default_factory=list)


def make_plan(
    strategy: str, samples: Sequence[Sample], batching: BatchingConfig, est: SparsityEstimator, table: ProfileTable
) -> PackingPlan:
    if strategy.startswith("sab"):
        return plan_batching(samples, batching, est, table)
    if strategy.startswith("lbb"):
        return plan_lbb(samples, batching)
    return plan_in_order(samples, batching)


def simulate_iteration(
    samples: Sequence[Sample],
    scenario: ScenarioSpec,
    table: ProfileTable,
    cluster: ClusterConfig,
    batching: BatchingConfig,
    est: SparsityEstimator,
    base_budget: int = 32,
) -> IterationOutcome:
    """Plan, tune and simulate one iteration; returns the result and the calibrated estimator."""
    if batching.dp != cluster.dp:
        raise ConfigError(f"batching dp={batching.dp} differs from cluster dp={cluster.dp}", "batching.dp")
    if any(s.num_layers != cluster.num_layers for s in samples):
        raise ConfigError("sample layer count differs from pp * layers_per_stage", "cluster.layers_per_stage")

    t0 = time.perf_counter()
    plan = make_plan(scenario.strategy, samples, batching, est, table)
    sab_overhead = 0.0
    if scenario.strategy not in ("baseline", "dst"):
        sab_overhead = (time.perf_counter() - t0) * 1000.0
    batches = [assemble_global_batch(samples, plan, r, base_budget) for r in range(cluster.dp)]

    tunings: list[TuningResult] = []
    dst_overhead = 0.0
    if scenario.uses_dst:
        cfg = scenario.dst_config
        anchor_list = None
        if cfg.anchor_scope == "global":
            anchor_list = [
                table.predict(mb.length_descriptor, k).value_ms
                for gb in batches
                for mb, k in zip(gb.micro_batches, gb.base_budgets)
            ]
        for gb in batches:
            tr = tune_global_batch(gb, cfg, table, anchor_latencies=anchor_list)
            tunings.append(tr)
            dst_overhead = max(dst_overhead, tr.overhead_ms)

    timelines: list[PipelineTimeline] = []
    per_mb: list[float] = []
    bound = 0.0
    naive = 0.0
    busy = 0.0
    bubbles = 0.0
    for r, gb in enumerate(batches):
        if tunings:
            budgets = tunings[r].budgets()
        else:
            budgets = np.array([[k] * cluster.num_layers for k in gb.base_budgets], dtype=np.int64)
        fwd, bwd = stage_times(gb.micro_batches, budgets, table, cluster)
        tl = simulate_pipeline(fwd, bwd, cluster.comm_ms)
        timelines.append(tl)
        per_mb.extend(((fwd + bwd).mean(axis=0)).tolist())
        bound = max(bound, tl.lower_bound_ms)
        naive = max(naive, naive_critical_path(fwd, bwd))
        busy += sum(tl.busy_ms)
    completion = max(tl.completion_ms for tl in timelines)
    for tl in timelines:
        bubbles += sum(completion - b for b in tl.busy_ms)

    decisions = [d for tr in tunings for d in tr.decisions]
    if decisions:
        avg_budget = float(np.mean([d.k_final for d in decisions]))
        drops = [d.coverage_drop for d in decisions]
        mean_drop, max_drop = float(np.mean(drops)), float(max(drops))
        n_comp = sum(d.direction == "compressed" for d in decisions)
        n_exp = sum(d.direction == "expanded" for d in decisions)
        lengths, obs = [], []
        for gb, tr in zip(batches, tunings):
            for d in tr.decisions:
                for s in gb.micro_batches[d.micro_batch_id].samples:
                    obs.append(d)
                    lengths.append(s.length)
        est = calibrate(est, obs, lengths)
    else:
        avg_budget = float(base_budget)
        mean_drop = max_drop = 0.0
        n_comp = n_exp = 0

    result = ScheduleResult(
        iter_ms=completion + cluster.dp_sync_ms,
        per_mb_ms=per_mb,
        imbalance=imbalance_ratio(per_mb),
        bubble_ms=bubbles,
        critical_lb_ms=bound + cluster.dp_sync_ms,
        dst_overhead_ms=dst_overhead,
        sab_overhead_ms=sab_overhead,
        avg_budget=avg_budget,
        mean_cov_drop=mean_drop,
        max_cov_drop=max_drop,
        busy_ms=busy,
        num_compressed=n_comp,
        num_expanded=n_exp,
        naive_lb_ms=naive + cluster.dp_sync_ms,
    )
    return IterationOutcome(result, est, plan, tunings, timelines)


# ------------------------------------------------------------------ scenarios


@dataclass(frozen=True)
class WorkloadSpec:
    distribution: LengthDistributionSpec = field(default_factory=LengthDistributionSpec.bimodal)
    concentration: ConcentrationSpec = field(default_factory=ConcentrationSpec)
    batching: BatchingConfig = field(default_factory=BatchingConfig)
    base_budget: int = 32
    block_size: int = BLOCK_SIZE
    iterations: int = 50
    seed: int = 0


def iteration_samples(workload: WorkloadSpec, iteration: int, num_layers: int, seed: int | None = None) -> list[Sample]:
    """The global batch of one iteration; a pure function of (seed, iteration)."""
    seed = workload.seed if seed is None else seed
    gbs = workload.batching.gbs
    return generate_samples(
        workload.distribution,
        gbs,
        workload.concentration,
        seed=np.random.SeedSequence([seed, iteration]),
        num_layers=num_layers,
        block_size=workload.block_size,
        start_id=iteration * gbs,
    )


@dataclass
class ScenarioRun:
    spec: ScenarioSpec
    results: list[ScheduleResult]
    decisions: list[list[BudgetDecision]] = field(default_factory=list)
    plans: list[PackingPlan] = field(default_factory=list)

    def mean(self, attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in self.results]))

    def percentile(self, attr: str, q: float) -> float:
        return float(np.percentile([getattr(r, attr) for r in self.results], q))


@dataclass
class ComparisonReport:
    runs: dict[str, ScenarioRun]
    baseline: str = "baseline"

    def speedup(self, label: str, attr: str = "iter_ms") -> float:
        return self.runs[self.baseline].mean(attr) / self.runs[label].mean(attr)

    def summary(self) -> dict[str, dict]:
        out = {}
        for label, run in self.runs.items():
            out[label] = {
                "strategy": run.spec.strategy,
                "dst": run.spec.dst_config.to_dict() if run.spec.dst_config else None,
                "iterations": len(run.results),
                "mean_iter_ms": run.mean("iter_ms"),
                "p50_iter_ms": run.percentile("iter_ms", 50),
                "p90_iter_ms": run.percentile("iter_ms", 90),
                "mean_imbalance": run.mean("imbalance"),
                "mean_bubble_ms": run.mean("bubble_ms"),
                "mean_avg_budget": run.mean("avg_budget"),
                "mean_cov_drop": run.mean("mean_cov_drop"),
                "max_cov_drop": max(r.max_cov_drop for r in run.results),
                "speedup": self.speedup(label),
                "mean_dst_overhead_ms": run.mean("dst_overhead_ms"),
                "mean_sab_overhead_ms": run.mean("sab_overhead_ms"),
                "speedup_with_overhead": self.speedup(label, "total_ms"),
            }
        return out


def run_scenarios(
    specs: Sequence[ScenarioSpec],
    workload: WorkloadSpec,
    table: ProfileTable,
    cluster: ClusterConfig,
    estimator: SparsityEstimator | None = None,
    keep_decisions: bool = False,
    keep_plans: bool = False,
) -> ComparisonReport:
    """Run every scenario over identical per-iteration sample streams.

    A baseline run is added when ``specs`` has none, so speedups are always defined.
    """
    estimator = estimator or SparsityEstimator(budget_grid=tuple(table.budgets), default_budget=workload.base_budget)
    specs = list(specs)
    if not any(s.strategy == "baseline" and s.label == "baseline" for s in specs):
        specs.insert(0, ScenarioSpec("baseline"))
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"scenario labels must be unique, got {labels}", "scenarios")
    cache: dict[tuple[int, int], list[Sample]] = {}
    runs: dict[str, ScenarioRun] = {}
    for spec in specs:
        iters = spec.iterations or workload.iterations
        seed = workload.seed if spec.seed is None else spec.seed
        est = estimator
        run = ScenarioRun(spec, [])
        for it in range(iters):
            key = (seed, it)
            if key not in cache:
                cache[key] = iteration_samples(workload, it, cluster.num_layers, seed)
            out = simulate_iteration(cache[key], spec, table, cluster, workload.batching, est, workload.base_budget)
            est = out.estimator
            run.results.append(out.result)
            if keep_decisions:
                run.decisions.append([d for tr in out.tuning for d in tr.decisions])
            if keep_plans:
                run.plans.append(out.plan)
        runs[spec.label] = run
    return ComparisonReport(runs)


ITERATION_COLUMNS = (
    "scenario",
    "iter",
    "iter_ms",
    "imbalance",
    "max_mb_ms",
    "mean_mb_ms",
    "bubble_ms",
    "dst_overhead_ms",
    "avg_budget",
    "mean_cov_drop",
)


def iteration_rows(report: ComparisonReport) -> Iterable[list]:
    for label, run in report.runs.items():
        for i, r in enumerate(run.results):
            yield [
                label,
                i,
                f"{r.iter_ms:.6f}",
                f"{r.imbalance:.6f}",
                f"{r.max_mb_ms:.6f}",
                f"{r.mean_mb_ms:.6f}",
                f"{r.bubble_ms:.6f}",
                f"{r.dst_overhead_ms:.6f}",
                f"{r.avg_budget:.6f}",
                f"{r.mean_cov_drop:.9f}",
            ]
