"""Workload-aware sparse attention load balancing: latency prediction, dynamic
budget tuning, sparsity-aware batching and a DP x PP pipeline simulator."""
from .config import RunConfig
from .dst import AnchorStrategy, BudgetDecision, DstConfig, TuningResult, find_feasible_k, tune_budget, tune_global_batch
from .errors import ConfigError, PlanError
from .predictor import CostModelSpec, ProfileTable, align, load_table, predict, save_table, synthesize_table
from .sab import (
    BatchingConfig,
    PackingPlan,
    SparsityEstimator,
    bin_packing,
    calibrate,
    estimate_sparsity,
    plan_batching,
    plan_in_order,
    plan_lbb,
)
from .sim import (
    STRATEGIES,
    ClusterConfig,
    ComparisonReport,
    ScenarioSpec,
    ScheduleResult,
    WorkloadSpec,
    run_scenarios,
    simulate_iteration,
    simulate_pipeline,
)
from .workload import (
    ConcentrationSpec,
    GlobalBatch,
    LengthDistributionSpec,
    MicroBatch,
    RoutingProfile,
    Sample,
    assemble_global_batch,
    generate_samples,
)

__version__ = "0.1.0"
