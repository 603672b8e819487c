"""Command-line front end.

    placebocil run          --config cfg.json --out runs/a [--seed 7] [--force]
    placebocil ablate       --config cfg.json --out runs/abl [--jobs 4]
    placebocil validate     --config cfg.json
    placebocil bandit-bench --arms 0.9,0.1 --rounds 500 --out runs/bandit

Exit codes: 0 ok, 1 runtime failure, 2 invalid config or usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import (
    ENV_PREFIX,
    ConfigValidationError,
    ExperimentConfig,
    config_from_dict,
    load_config,
)
from .data import ConfigError
from .io import atomic_write_csv, atomic_write_json
from .memory import BUDGET_COLUMNS
from .placebo import PLACEBO_LOG_COLUMNS
from .policy import regret_harness
from .trainer import (
    PHASE_COLUMNS,
    POLICY_TRACE_COLUMNS,
    POLICY_WEIGHT_COLUMNS,
    RunReport,
    run_experiment,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

REPORT_FILE = "run_report.json"
SUMMARY_COLUMNS = ["cell", "seed", "status", "average", "last", "audit_failures", "error"]
CELL_COLUMNS = ["cell", "runs", "failed", "average_median", "average_mean", "last_median"]
BANDIT_COLUMNS = ["round", "seed", "action", "reward", "p_best"]

log = logging.getLogger("placebocil")


class UsageError(ConfigError):
    pass


# ---------------------------------------------------------------- outputs


def write_run_outputs(report: RunReport, out: Path, placebo_log: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / REPORT_FILE, report.to_dict())
    atomic_write_csv(out / "phases.csv", PHASE_COLUMNS, [p.row() for p in report.phases])
    atomic_write_csv(out / "policy_trace.csv", POLICY_TRACE_COLUMNS, report.traces.policy)
    atomic_write_csv(out / "policy_weights.csv", POLICY_WEIGHT_COLUMNS, report.traces.weights)
    atomic_write_csv(out / "budget_trace.csv", BUDGET_COLUMNS, report.traces.budget)
    if placebo_log:
        atomic_write_csv(out / "placebo_log.csv", PLACEBO_LOG_COLUMNS, report.traces.placebos)


def _guard_out(out: Path, force: bool, marker: str) -> None:
    if (out / marker).exists() and not force:
        raise UsageError(f"--out: {out / marker} already exists (pass --force to overwrite)")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    errors = cfg.validate(check_files=True)
    if errors:
        raise ConfigValidationError(errors)
    return cfg


# ---------------------------------------------------------------- commands


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    _guard_out(out, args.force, REPORT_FILE)
    log.info("running seed %d, kd mode %s", cfg.seed, cfg.kd_mode)
    report = run_experiment(cfg)
    write_run_outputs(report, out, cfg.placebo_log)
    if not report.complete:
        print(f"error: run failed: {report.error}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"average {report.average:.4f}  last {report.last:.4f}  -> {out}")
    return EXIT_OK


def ablation_cells(cfg: ExperimentConfig) -> list[tuple[str, dict]]:
    """One-factor-at-a-time cells around the base config, deduplicated."""
    spec = cfg.ablation
    factors = [
        ("kd_mode", spec.kd_modes),
        ("selection", spec.selections),
        ("policy", spec.policies),
        ("u_cap", spec.u_caps),
    ]
    cells: list[tuple[str, dict]] = []
    seen: set[tuple] = set()
    for name, values in factors:
        for value in values:
            overrides = {name: value}
            if name == "policy" and value == "fixed":
                overrides.update(fixed_beta=1.0, fixed_gamma=1.0)
            key = tuple(sorted((k, v) for k, v in overrides.items() if getattr(cfg, k) != v))
            if key in seen:
                continue
            seen.add(key)
            cells.append((f"{name}={value}", overrides))
    return cells


def _run_cell(job: tuple[str, int, dict, str, bool]) -> dict:
    cell, seed, raw, out, placebo_log = job
    row = {"cell": cell, "seed": seed, "status": "ok", "average": None, "last": None,
           "audit_failures": None, "error": ""}
    try:
        cfg = config_from_dict(raw)
        report = run_experiment(cfg)
        write_run_outputs(report, Path(out), placebo_log)
        row.update(average=report.average, last=report.last, audit_failures=report.audit_failures)
        if not report.complete:
            row.update(status="failed", error=report.error or "")
    except Exception as exc:  # a failed cell is recorded, not fatal
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def summarize_cells(rows: list[dict]) -> list[dict]:
    out = []
    for cell in dict.fromkeys(r["cell"] for r in rows):
        mine = [r for r in rows if r["cell"] == cell]
        ok = [r for r in mine if r["status"] == "ok"]
        avgs = [r["average"] for r in ok]
        lasts = [r["last"] for r in ok]
        out.append({
            "cell": cell,
            "runs": len(mine),
            "failed": len(mine) - len(ok),
            "average_median": statistics.median(avgs) if avgs else None,
            "average_mean": statistics.fmean(avgs) if avgs else None,
            "last_median": statistics.median(lasts) if lasts else None,
        })
    return out


def cmd_ablate(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    _guard_out(out, args.force, "summary.csv")
    seeds = [args.seed] if args.seed is not None else list(cfg.ablation.seeds)
    jobs = []
    for cell, overrides in ablation_cells(cfg):
        for seed in seeds:
            raw = cfg.replace(seed=seed, **overrides).to_dict()
            cell_dir = out / "cells" / cell.replace("=", "_") / f"seed_{seed}"
            jobs.append((cell, seed, raw, str(cell_dir), cfg.placebo_log))
    log.info("%d ablation runs across %d workers", len(jobs), args.jobs)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = []
        for job in jobs:
            rows.append(_run_cell(job))
            log.info("%s seed %s: %s", job[0], job[1], rows[-1]["status"])
    atomic_write_csv(out / "summary.csv", SUMMARY_COLUMNS, rows)
    cells = summarize_cells(rows)
    atomic_write_csv(out / "summary_cells.csv", CELL_COLUMNS, cells)
    for c in cells:
        med = "failed" if c["average_median"] is None else f"{c['average_median']:.4f}"
        print(f"{c['cell']:28s} average median {med}  ({c['failed']}/{c['runs']} failed)")
    failed = sum(r["status"] != "ok" for r in rows)
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load(args)
    print(f"config ok: {len(cfg.class_counts)} phases, kd mode {cfg.kd_mode}, seed {cfg.seed}")
    return EXIT_OK


def _bandit_spec(args) -> dict:
    spec = {"arms": [0.9, 0.1], "rounds": 500, "seeds": [0, 1, 2, 3, 4], "xi": 0.2, "floor": 0.05}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigValidationError([f"config: file not found: {path}"])
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigValidationError([f"config: not valid JSON ({exc})"]) from exc
        unknown = sorted(set(loaded) - set(spec))
        if unknown:
            raise ConfigValidationError([f"{k}: unknown field" for k in unknown])
        spec.update(loaded)
    if args.arms is not None:
        spec["arms"] = [float(a) for a in args.arms.split(",") if a.strip()]
    if args.rounds is not None:
        spec["rounds"] = args.rounds
    if args.seed is not None:
        spec["seeds"] = [args.seed]
    errors = []
    if not spec["arms"] or any(not 0.0 <= float(a) <= 1.0 for a in spec["arms"]):
        errors.append("arms: need at least one reward, each in [0, 1]")
    if not isinstance(spec["rounds"], int) or spec["rounds"] < 0:
        errors.append("rounds: must be a nonnegative integer")
    if not spec["seeds"]:
        errors.append("seeds: must be nonempty")
    if not float(spec["xi"]) > 0:
        errors.append("xi: must be positive")
    if not 0.0 <= float(spec["floor"]) < 1.0:
        errors.append("floor: must lie in [0, 1)")
    if errors:
        raise ConfigValidationError(errors)
    return spec


def cmd_bandit_bench(args) -> int:
    spec = _bandit_spec(args)
    out = Path(args.out)
    _guard_out(out, args.force, "bandit_bench.csv")
    rows = []
    finals = []
    for seed in spec["seeds"]:
        res = regret_harness(spec["arms"], spec["rounds"], xi=float(spec["xi"]),
                             floor=float(spec["floor"]), seed=int(seed))
        for t in range(spec["rounds"]):
            rows.append({"round": t + 1, "seed": seed, "action": int(res.actions[t]),
                         "reward": float(res.rewards[t]), "p_best": float(res.best_prob[t])})
        finals.append(float(res.best_prob[-1]) if spec["rounds"] else None)
    atomic_write_csv(out / "bandit_bench.csv", BANDIT_COLUMNS, rows)
    if spec["rounds"]:
        print(f"final best-arm probability, median over seeds: {statistics.median(finals):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="placebocil",
        description="Class-incremental learning with placebo distillation.",
        epilog=f"Top-level config scalars can be overridden with {ENV_PREFIX}<FIELD> "
               "environment variables; command-line flags win over both.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None, out=True):
        p.add_argument("--config", help="JSON config file (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the top-level seed")
        p.add_argument("-v", "--verbose", action="count", default=0)
        if out:
            p.add_argument("--out", default=out_default, help="output directory")
            p.add_argument("--force", action="store_true", help="overwrite existing reports")

    common(sub.add_parser("run", help="run one experiment"), "runs/run")
    p = sub.add_parser("ablate", help="run the one-factor-at-a-time ablation matrix")
    common(p, "runs/ablation")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common(sub.add_parser("validate", help="check a config without running it"), out=False)
    p = sub.add_parser("bandit-bench", help="Exp3 concentration on a fixed-reward bandit")
    common(p, "runs/bandit")
    p.add_argument("--arms", help="comma-separated reward per arm")
    p.add_argument("--rounds", type=int)
    return parser


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "validate": cmd_validate, "bandit-bench": cmd_bandit_bench}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
