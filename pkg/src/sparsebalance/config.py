"""YAML run configuration.

A run file looks like::

    seed: 0
    iterations: 50
    base_budget: 32
    cluster: {dp: 2, pp: 4, layers_per_stage: 9, fwd_bwd_ratio: 2.0, comm_ms: 0.5, dp_sync_ms: 20.0}
    batching: {gbs: 16, mbs: 2}
    workload:
      distribution: {kind: bimodal}
      concentration: {median_alpha: 0.15}
    profile:
      table: null            # CSV path; synthesized from cost_model when null
      cost_model: {c_lin: 0.0003, c_attn: 4.0e-08, c_fixed: 0.3, noise_sigma: 0.0}
      budget_grid: [4, 8, ..., 64]
    dst: {threshold_p: 0.1, anchor: mean, anchor_scope: global}
    sab: {ema_alpha: 0.2}
    scenarios: [baseline, dst, sab, lbb, sab_dst, lbb_dst]
    output: {dir: out, svg: true, decisions: false, plans: false}

Every section is optional.  A scenario is either a strategy name or a mapping
``{strategy, name, threshold_p, anchor}`` whose DST keys override ``dst``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .dst import DstConfig
from .errors import ConfigError
from .predictor import (
    DEFAULT_BUDGET_GRID,
    DEFAULT_LENGTH_BINS,
    CostModelSpec,
    ProfileTable,
    load_table,
    synthesize_table,
)
from .sab import DEFAULT_BIN_EDGES, BatchingConfig, SparsityEstimator
from .sim import STRATEGIES, ClusterConfig, ScenarioSpec, WorkloadSpec
from .workload import ConcentrationSpec, LengthDistributionSpec

DEFAULT_SCENARIOS = STRATEGIES


def _section(data: dict, key: str) -> dict:
    value = data.get(key)
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"'{key}' must be a mapping", key)
    return dict(value)


def _build(cls, values: dict, prefix: str):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{prefix}: {exc}", prefix) from None
    except ConfigError as exc:
        if exc.field and not exc.field.startswith(prefix.split(".")[0]):
            raise ConfigError(str(exc), f"{prefix}.{exc.field}") from None
        raise


def _check_keys(values: dict, allowed: set[str], prefix: str) -> None:
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in '{prefix}'", f"{prefix}.{unknown[0]}")


@dataclass(frozen=True)
class ProfileSettings:
    table: str | None = None
    cost_model: CostModelSpec = field(default_factory=CostModelSpec)
    budget_grid: tuple[int, ...] = DEFAULT_BUDGET_GRID
    length_bins: tuple[int, ...] = DEFAULT_LENGTH_BINS
    seed: int = 0

    def load(self, base_dir: Path | None = None) -> ProfileTable:
        if self.table is None:
            return synthesize_table(self.cost_model, self.length_bins, self.budget_grid, seed=self.seed)
        path = Path(self.table)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        try:
            return load_table(path)
        except OSError as exc:
            raise ConfigError(f"cannot read profile table {path}: {exc.strerror}", "profile.table") from None

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"table": self.table, "cost_model": self.cost_model.to_dict(), "seed": self.seed}
        out["budget_grid"] = list(self.budget_grid)
        if tuple(self.length_bins) != DEFAULT_LENGTH_BINS:
            out["length_bins"] = list(self.length_bins)
        return out


@dataclass(frozen=True)
class OutputSettings:
    dir: str = "out"
    svg: bool = True
    decisions: bool = False
    plans: bool = False

    def to_dict(self) -> dict:
        return {"dir": self.dir, "svg": self.svg, "decisions": self.decisions, "plans": self.plans}


@dataclass(frozen=True)
class EstimatorSettings:
    bin_edges: tuple[int, ...] = DEFAULT_BIN_EDGES
    ema_alpha: float = 0.2

    def __post_init__(self):
        # the estimator itself checks the rest once the table's grid is known
        SparsityEstimator(bin_edges=self.bin_edges, ema_alpha=self.ema_alpha)

    def to_dict(self) -> dict:
        return {"bin_edges": list(self.bin_edges), "ema_alpha": self.ema_alpha}


@dataclass(frozen=True)
class ScenarioEntry:
    strategy: str
    name: str | None = None
    threshold_p: float | None = None
    anchor: str | None = None

    def to_value(self) -> str | dict:
        if self.name is None and self.threshold_p is None and self.anchor is None:
            return self.strategy
        out: dict[str, Any] = {"strategy": self.strategy}
        for key in ("name", "threshold_p", "anchor"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out

    @property
    def label(self) -> str:
        return self.name or self.strategy


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    iterations: int = 50
    base_budget: int = 32
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    gbs: int = 16
    mbs: int = 2
    distribution: LengthDistributionSpec = field(default_factory=LengthDistributionSpec.bimodal)
    concentration: ConcentrationSpec = field(default_factory=ConcentrationSpec)
    profile: ProfileSettings = field(default_factory=ProfileSettings)
    dst: DstConfig = field(default_factory=DstConfig)
    sab: EstimatorSettings = field(default_factory=EstimatorSettings)
    scenarios: tuple[ScenarioEntry, ...] = tuple(ScenarioEntry(s) for s in DEFAULT_SCENARIOS)
    output: OutputSettings = field(default_factory=OutputSettings)

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1", "iterations")
        # raises on gbs divisibility
        self.batching
        grid = tuple(self.profile.budget_grid)
        if self.profile.table is None and self.base_budget not in grid:
            raise ConfigError(f"base_budget {self.base_budget} is not on the budget grid {list(grid)}", "base_budget")
        if self.dst.budget_grid is not None and self.profile.table is None and tuple(self.dst.budget_grid) != grid:
            raise ConfigError("dst.budget_grid differs from profile.budget_grid", "dst.budget_grid")
        if not self.scenarios:
            raise ConfigError("at least one scenario is required", "scenarios")
        labels = [s.label for s in self.scenarios]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"scenario labels must be unique, got {labels}", "scenarios")
        for s in self.scenarios:
            if s.strategy not in STRATEGIES:
                raise ConfigError(f"strategy must be one of {STRATEGIES}, got {s.strategy!r}", "scenarios")
            if not s.strategy.endswith("dst") and (s.threshold_p is not None or s.anchor is not None):
                raise ConfigError(f"scenario {s.label} sets DST keys but strategy {s.strategy} has no DST", "scenarios")
        # surfaces invalid per-scenario DST overrides at load time
        self.scenario_specs()

    @property
    def batching(self) -> BatchingConfig:
        return BatchingConfig(gbs=self.gbs, mbs=self.mbs, dp=self.cluster.dp)

    @property
    def workload(self) -> WorkloadSpec:
        return WorkloadSpec(
            distribution=self.distribution,
            concentration=self.concentration,
            batching=self.batching,
            base_budget=self.base_budget,
            iterations=self.iterations,
            seed=self.seed,
        )

    def scenario_specs(self) -> list[ScenarioSpec]:
        out = []
        for s in self.scenarios:
            cfg = None
            if s.strategy.endswith("dst"):
                cfg = self.dst
                if s.threshold_p is not None:
                    cfg = replace(cfg, threshold_p=float(s.threshold_p))
                if s.anchor is not None:
                    cfg = replace(cfg, anchor=s.anchor)
            out.append(ScenarioSpec(s.strategy, cfg, name=s.name))
        return out

    def estimator(self, table: ProfileTable) -> SparsityEstimator:
        return SparsityEstimator(
            bin_edges=self.sab.bin_edges,
            budget_grid=tuple(table.budgets),
            default_budget=self.base_budget,
            ema_alpha=self.sab.ema_alpha,
        )

    def load_table(self, base_dir: Path | None = None) -> ProfileTable:
        table = self.profile.load(base_dir)
        if self.base_budget not in table.budgets:
            raise ConfigError(f"base_budget {self.base_budget} is not on the table's budget grid", "base_budget")
        self.dst.grid_for(table)
        return table

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "iterations": self.iterations,
            "base_budget": self.base_budget,
            "cluster": self.cluster.to_dict(),
            "batching": {"gbs": self.gbs, "mbs": self.mbs},
            "workload": {"distribution": self.distribution.to_dict(), "concentration": self.concentration.to_dict()},
            "profile": self.profile.to_dict(),
            "dst": self.dst.to_dict(),
            "sab": self.sab.to_dict(),
            "scenarios": [s.to_value() for s in self.scenarios],
            "output": self.output.to_dict(),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @classmethod
    def from_dict(cls, data: dict | None) -> RunConfig:
        data = dict(data or {})
        _check_keys(
            data,
            {"seed", "iterations", "base_budget", "cluster", "batching", "workload", "profile", "dst", "sab", "scenarios", "output"},
            "config",
        )
        kw: dict[str, Any] = {}
        for key in ("seed", "iterations", "base_budget"):
            if key in data:
                try:
                    kw[key] = int(data[key])
                except (TypeError, ValueError):
                    raise ConfigError(f"'{key}' must be an integer", key) from None

        kw["cluster"] = _build(ClusterConfig, _section(data, "cluster"), "cluster")

        batching = _section(data, "batching")
        _check_keys(batching, {"gbs", "mbs"}, "batching")
        for key, value in batching.items():
            try:
                kw[key] = int(value)
            except (TypeError, ValueError):
                raise ConfigError(f"'batching.{key}' must be an integer", f"batching.{key}") from None

        workload = _section(data, "workload")
        _check_keys(workload, {"distribution", "concentration"}, "workload")
        if "distribution" in workload:
            kw["distribution"] = LengthDistributionSpec.from_dict(_section(workload, "distribution"))
        kw["concentration"] = _build(ConcentrationSpec, _section(workload, "concentration"), "workload.concentration")

        profile = _section(data, "profile")
        _check_keys(profile, {"table", "cost_model", "budget_grid", "length_bins", "seed"}, "profile")
        pkw: dict[str, Any] = {"table": profile.get("table")}
        pkw["cost_model"] = _build(CostModelSpec, _section(profile, "cost_model"), "profile.cost_model")
        for key in ("budget_grid", "length_bins"):
            if profile.get(key) is not None:
                pkw[key] = tuple(int(v) for v in profile[key])
        if "seed" in profile:
            pkw["seed"] = int(profile["seed"])
        kw["profile"] = ProfileSettings(**pkw)

        dst = _section(data, "dst")
        _check_keys(dst, {"threshold_p", "anchor", "anchor_scope", "budget_grid"}, "dst")
        if dst.get("budget_grid") is not None:
            dst["budget_grid"] = tuple(dst["budget_grid"])
        kw["dst"] = _build(DstConfig, dst, "dst")

        sab = _section(data, "sab")
        _check_keys(sab, {"bin_edges", "ema_alpha"}, "sab")
        if "bin_edges" in sab:
            sab["bin_edges"] = tuple(int(v) for v in sab["bin_edges"])
        kw["sab"] = _build(EstimatorSettings, sab, "sab")

        if "scenarios" in data:
            raw = data["scenarios"]
            if not isinstance(raw, list):
                raise ConfigError("'scenarios' must be a list", "scenarios")
            entries = []
            for item in raw:
                if isinstance(item, str):
                    entries.append(ScenarioEntry(item))
                elif isinstance(item, dict):
                    _check_keys(item, {"strategy", "name", "threshold_p", "anchor"}, "scenarios")
                    if "strategy" not in item:
                        raise ConfigError("scenario mapping needs a 'strategy'", "scenarios")
                    entries.append(ScenarioEntry(**item))
                else:
                    raise ConfigError(f"bad scenario entry {item!r}", "scenarios")
            kw["scenarios"] = tuple(entries)

        out = _section(data, "output")
        _check_keys(out, {"dir", "svg", "decisions", "plans"}, "output")
        kw["output"] = OutputSettings(**out)
        return cls(**kw)

    @classmethod
    def from_yaml(cls, text: str) -> RunConfig:
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}", "config") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config root must be a mapping", "config")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", "config") from None
        return cls.from_yaml(text)

    def with_overrides(self, **changes) -> RunConfig:
        return replace(self, **changes)
