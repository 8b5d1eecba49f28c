"""Command-line front end.

Subcommands ``gen-profile``, ``gen-workload``, ``run``, ``sweep`` and ``report``.
Exit codes: 0 on success, 1 on configuration errors, 2 on runtime errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, ScenarioEntry
from .dst import DECISION_COLUMNS, decision_rows
from .errors import ConfigError
from .predictor import DEFAULT_BUDGET_GRID, DEFAULT_LENGTH_BINS, CostModelSpec, save_table, synthesize_table
from .sim import ITERATION_COLUMNS, ComparisonReport, iteration_rows, iteration_samples, run_scenarios
from .workload import LengthDistributionSpec, load_histogram

log = logging.getLogger("sparsebalance")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
SWEEP_AXES = ("p", "anchor", "mbs")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}", "argv")


def _int_list(text: str, name: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"--{name} must be a comma-separated list of integers, got {text!r}", name) from None
    if not values:
        raise ConfigError(f"--{name} is empty", name)
    return values


def _setup_logging() -> None:
    level = os.environ.get("SPARSEBALANCE_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _output_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.output_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_dir(args) -> Path | None:
    return Path(args.config).resolve().parent if args.config else None


# ------------------------------------------------------------------ gen-profile


def cmd_gen_profile(args) -> int:
    model = CostModelSpec(
        c_lin=args.c_lin, c_attn=args.c_attn, c_fixed=args.c_fixed, block_size=args.block_size, noise_sigma=args.noise
    )
    grid = _int_list(args.k_grid, "k-grid") if args.k_grid else DEFAULT_BUDGET_GRID
    bins = _int_list(args.x_grid, "x-grid") if args.x_grid else DEFAULT_LENGTH_BINS
    seed = 0 if args.seed is None else args.seed
    table = synthesize_table(model, bins, grid, seed=seed)
    path = Path(args.out) if args.out else Path(args.output_dir or ".") / "profile.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        save_table(table, path)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}", "out") from None
    print(
        f"wrote {path}: {table.length_bins.size} lengths [{int(table.length_bins[0])}..{int(table.length_bins[-1])}]"
        f" x {table.budget_grid.size} budgets {table.budgets}; repaired={table.repaired}"
    )
    return EXIT_OK


# ------------------------------------------------------------------ gen-workload


def cmd_gen_workload(args) -> int:
    cfg = _load_config(args)
    if args.histogram:
        cfg = replace(cfg, distribution=load_histogram(args.histogram))
    elif args.distribution:
        cfg = replace(cfg, distribution=LengthDistributionSpec.from_dict({"kind": args.distribution}))
    iterations = args.iterations or cfg.iterations
    out = _output_dir(args, cfg)
    path = out / "workload.csv"
    wl = cfg.workload
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "sample_id", "length", "num_blocks", "mean_k90"])
        for it in range(iterations):
            for s in iteration_samples(wl, it, cfg.cluster.num_layers):
                k90 = np.mean([p.budget_for_coverage(0.9) for p in s.routing_profiles])
                writer.writerow([it, s.id, s.length, s.routing_profiles[0].num_blocks, f"{k90:.3f}"])
    print(f"wrote {path}: {iterations} iterations x {cfg.gbs} samples ({cfg.distribution.kind})")
    return EXIT_OK


# ------------------------------------------------------------------ run


def write_iterations_csv(report: ComparisonReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ITERATION_COLUMNS)
        writer.writerows(iteration_rows(report))


def speedup_svg(labels: Sequence[str], speedups: Sequence[float], title: str = "Speedup over baseline") -> str:
    """Self-contained bar chart with a dashed reference line at 1.0."""
    width, height = max(320, 90 * len(labels) + 80), 300
    left, right, top, bottom = 56, 16, 36, 56
    plot_w, plot_h = width - left - right, height - top - bottom
    vmax = max([1.0, *speedups]) * 1.15
    bar_w = plot_w / max(len(labels), 1)

    def y(v: float) -> float:
        return top + plot_h * (1.0 - v / vmax)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
    ]
    ticks = np.linspace(0.0, vmax, 6)
    for t in ticks:
        parts.append(
            f'<text x="{left - 6}" y="{y(t) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{t:.2f}</text>'
        )
    for i, (label, v) in enumerate(zip(labels, speedups)):
        x0 = left + i * bar_w + bar_w * 0.15
        parts.append(
            f'<rect x="{x0:.1f}" y="{y(v):.1f}" width="{bar_w * 0.7:.1f}" height="{top + plot_h - y(v):.1f}" fill="#4C72B0"/>'
        )
        cx = left + (i + 0.5) * bar_w
        parts.append(
            f'<text x="{cx:.1f}" y="{y(v) - 4:.1f}" text-anchor="middle" font-family="sans-serif" font-size="11">{v:.3f}x</text>'
        )
        parts.append(
            f'<text x="{cx:.1f}" y="{top + plot_h + 16}" text-anchor="middle" font-family="sans-serif" font-size="11">{label}</text>'
        )
    parts.append(
        f'<line x1="{left}" y1="{y(1.0):.1f}" x2="{left + plot_w}" y2="{y(1.0):.1f}" stroke="#C44E52" stroke-dasharray="5,4"/>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _write_json(data, path: Path) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=False) + "\n")


def cmd_run(args) -> int:
    cfg = _load_config(args)
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations)
    if args.scenarios:
        cfg = replace(cfg, scenarios=tuple(ScenarioEntry(s.strip()) for s in args.scenarios.split(",") if s.strip()))
    table = cfg.load_table(_config_dir(args))
    out = _output_dir(args, cfg)
    keep_decisions = cfg.output.decisions or args.decisions
    keep_plans = cfg.output.plans or args.plans
    log.info("running %d scenarios x %d iterations", len(cfg.scenarios), cfg.iterations)
    report = run_scenarios(
        cfg.scenario_specs(),
        cfg.workload,
        table,
        cfg.cluster,
        estimator=cfg.estimator(table),
        keep_decisions=keep_decisions,
        keep_plans=keep_plans,
    )
    write_iterations_csv(report, out / "iterations.csv")
    summary = report.summary()
    _write_json({"config": cfg.to_dict(), "scenarios": summary}, out / "comparison.json")
    if cfg.output.svg:
        labels = list(summary)
        (out / "speedup.svg").write_text(speedup_svg(labels, [summary[k]["speedup"] for k in labels]))
    if keep_decisions:
        rows = []
        for label, run in report.runs.items():
            for it, decisions in enumerate(run.decisions):
                rows.extend([label, *r] for r in decision_rows(it, decisions))
        with open(out / "decisions.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["scenario", *DECISION_COLUMNS])
            writer.writerows(rows)
    if keep_plans:
        plans = {label: [p.to_json() for p in run.plans] for label, run in report.runs.items() if run.plans}
        _write_json(plans, out / "plans.json")
    print(_format_summary(summary))
    return EXIT_OK


def _format_summary(summary: dict) -> str:
    head = f"{'scenario':<14} {'iter_ms':>10} {'imbalance':>10} {'speedup':>8} {'w/ ovh':>8} {'max_drop':>9}"
    lines = [head]
    for label, row in summary.items():
        lines.append(
            f"{label:<14} {row['mean_iter_ms']:>10.2f} {row['mean_imbalance']:>10.3f} {row['speedup']:>8.3f}"
            f" {row['speedup_with_overhead']:>8.3f} {row['max_cov_drop']:>9.4f}"
        )
    return "\n".join(lines)


# ------------------------------------------------------------------ sweep


def _sweep_point(cfg: RunConfig, axis: str, value, strategy: str, table_dir: str | None) -> dict:
    if axis == "p":
        cfg = replace(cfg, dst=replace(cfg.dst, threshold_p=float(value)))
    elif axis == "anchor":
        cfg = replace(cfg, dst=replace(cfg.dst, anchor=value))
    else:
        cfg = replace(cfg, mbs=int(value))
    cfg = replace(cfg, scenarios=(ScenarioEntry("baseline"), ScenarioEntry(strategy)))
    table = cfg.load_table(Path(table_dir) if table_dir else None)
    report = run_scenarios(cfg.scenario_specs(), cfg.workload, table, cfg.cluster, estimator=cfg.estimator(table))
    summary = report.summary()
    return {"value": value, "speedup": summary[strategy]["speedup"], "scenarios": summary}


def _parse_sweep_values(axis: str, text: str) -> list:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ConfigError("--values is empty", "values")
    try:
        if axis == "p":
            return [float(v) for v in items]
        if axis == "mbs":
            return [int(v) for v in items]
    except ValueError:
        raise ConfigError(f"cannot parse --values {text!r} for axis {axis}", "values") from None
    return items


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {args.axis!r}", "axis")
    cfg = _load_config(args)
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations)
    values = _parse_sweep_values(args.axis, args.values)
    # validate every point before running any of them
    for v in values:
        if args.axis == "p":
            replace(cfg.dst, threshold_p=v)
        elif args.axis == "anchor":
            replace(cfg.dst, anchor=v)
        else:
            replace(cfg, mbs=v)
    if not args.strategy.endswith("dst") and args.axis != "mbs":
        raise ConfigError(f"axis {args.axis} needs a DST strategy, got {args.strategy}", "strategy")
    out = _output_dir(args, cfg)
    table_dir = str(_config_dir(args)) if args.config else None
    jobs = max(1, args.jobs or 1)
    if jobs == 1:
        points = [_sweep_point(cfg, args.axis, v, args.strategy, table_dir) for v in values]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(values))) as pool:
            futures = [pool.submit(_sweep_point, cfg, args.axis, v, args.strategy, table_dir) for v in values]
            points = [f.result() for f in futures]
    _write_json({"axis": args.axis, "strategy": args.strategy, "config": cfg.to_dict(), "points": points}, out / "sweep.json")
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([args.axis, "speedup", "mean_iter_ms", "mean_imbalance", "max_cov_drop"])
        for p in points:
            row = p["scenarios"][args.strategy]
            writer.writerow([p["value"], f"{p['speedup']:.6f}", f"{row['mean_iter_ms']:.6f}", f"{row['mean_imbalance']:.6f}", f"{row['max_cov_drop']:.9f}"])
    if cfg.output.svg:
        (out / "sweep.svg").write_text(
            speedup_svg([f"{args.axis}={p['value']}" for p in points], [p["speedup"] for p in points], f"{args.strategy} speedup vs {args.axis}")
        )
    print(f"{args.axis:>8} {'speedup':>8}")
    for p in points:
        print(f"{str(p['value']):>8} {p['speedup']:>8.3f}")
    return EXIT_OK


# ------------------------------------------------------------------ report


def cmd_report(args) -> int:
    path = Path(args.input) if args.input else Path(args.output_dir or "out") / "comparison.json"
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}", "input") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}", "input") from None
    if "scenarios" not in data or not isinstance(data["scenarios"], dict):
        raise ConfigError(f"{path} has no 'scenarios' mapping", "input")
    summary = data["scenarios"]
    print(_format_summary(summary))
    if args.svg:
        labels = list(summary)
        Path(args.svg).write_text(speedup_svg(labels, [summary[k]["speedup"] for k in labels]))
    return EXIT_OK


# ------------------------------------------------------------------ entry point


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags without defaults so they never clobber values given before the subcommand
    def default(value):
        return argparse.SUPPRESS if suppress else value

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=default(None), help="top-level seed (overrides the config)")
    common.add_argument("--config", default=default(None), help="YAML run configuration")
    common.add_argument("--output-dir", default=default(None), help="directory for generated files")
    common.add_argument("--jobs", type=int, default=default(1), help="parallel worker processes for sweeps")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = _Parser(prog="sparsebalance", description="Sparse-attention load-balancing simulator", parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-profile", parents=[common], help="synthesize a latency profile table")
    p.add_argument("--c-lin", type=float, default=CostModelSpec.c_lin)
    p.add_argument("--c-attn", type=float, default=CostModelSpec.c_attn)
    p.add_argument("--c-fixed", type=float, default=CostModelSpec.c_fixed)
    p.add_argument("--block-size", type=int, default=CostModelSpec.block_size)
    p.add_argument("--noise", type=float, default=0.0, help="lognormal noise sigma; the table is repaired to be monotone")
    p.add_argument("--k-grid", default=None, help="comma-separated budget grid")
    p.add_argument("--x-grid", default=None, help="comma-separated token-count grid")
    p.add_argument("--out", default=None, help="output CSV (default: <output-dir>/profile.csv)")
    p.set_defaults(func=cmd_gen_profile)

    p = sub.add_parser("gen-workload", parents=[common], help="sample the per-iteration workload to CSV")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--distribution", choices=("bimodal", "long_tail"), default=None)
    p.add_argument("--histogram", default=None, help="'lo,hi,freq' histogram file")
    p.set_defaults(func=cmd_gen_workload)

    p = sub.add_parser("run", parents=[common], help="simulate the configured scenarios")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--scenarios", default=None, help="comma-separated strategies")
    p.add_argument("--decisions", action="store_true", help="also write decisions.csv")
    p.add_argument("--plans", action="store_true", help="also write plans.json")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="sweep p, anchor or mbs")
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--strategy", default="sab_dst")
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="print a comparison table from a run's JSON")
    p.add_argument("--input", default=None, help="comparison.json (default: <output-dir>/comparison.json)")
    p.add_argument("--svg", default=None, help="also write a speedup chart here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise ConfigError("a subcommand is required: gen-profile, gen-workload, run, sweep or report", "command")
        return args.func(args)
    except ConfigError as exc:
        where = f" [{exc.field}]" if exc.field else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
