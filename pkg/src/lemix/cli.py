"""Command-line experiment runner: ``lemix run|sweep|fit|compare``.

Exit status is 0 on success, 1 for configuration or input errors and 2 for
failures during simulation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Optional

from . import config as cfgmod
from .allocator import Policy, SchedulerParams
from .cluster import fit_coefficients, read_observations
from .engine import run as simulate
from .errors import ComparisonError, ConfigError, LemixError, ProfilingIncompleteError, TraceParseError
from .metrics import MetricsReport, compare, mean_reports, summarize
from .planner import dump_plans
from .workload import make_heterogeneity_sweep

log = logging.getLogger("lemix")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
_INPUT_ERRORS = (ConfigError, TraceParseError, ProfilingIncompleteError, ComparisonError, FileNotFoundError)
SWEEP_AXES = ("rate", "train_rate", "heterogeneity", "policy")
DEFAULT_POLICIES = ("lemix", "separate", "round_robin", "luf")

# SchedulerParams fields that get their own flag; train_rate is the workload's
# training fraction and is set through --train-rate instead.
_PARAM_FLAGS = [f for f in fields(SchedulerParams) if f.name not in ("policy", "train_rate")]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _param_type(f):
    default = f.default
    if isinstance(default, bool):
        return None
    if isinstance(default, int):
        return int
    return float


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config")
    common.add_argument("--policy", help="scheduling policy (lemix, separate, separate_dynamic, round_robin, luf)")
    common.add_argument("--rate", type=float, help="request rate, tasks/s")
    common.add_argument("--train-rate", type=float, help="fraction of training tasks")
    common.add_argument("--seed", type=int, nargs="+", help="one or more seeds (overrides the config list)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--output", help="output directory")
    common.add_argument("--dump-plans", action="store_true", help="write planned paths per decision")
    common.add_argument("--ledger", action="store_true", help="write the per-GPU utilization CSV")
    common.add_argument("-v", "--verbose", action="store_true")
    for f in _PARAM_FLAGS:
        flag = "--" + f.name.replace("_", "-")
        if _param_type(f) is None:
            common.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            common.add_argument(flag, dest=f.name, type=_param_type(f), default=None)

    parser = _Parser(prog="lemix", description="Co-located training/inference scheduling simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("run", parents=[common], help="simulate one config for each seed")
    sw = sub.add_parser("sweep", parents=[common], help="sweep one axis across policies and seeds")
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", nargs="+", required=True)
    sw.add_argument("--policies", nargs="+", help=f"policies to compare (default: {' '.join(DEFAULT_POLICIES)})")
    fit = sub.add_parser("fit", help="fit stage latency coefficients from profiling observations")
    fit.add_argument("observations", help="CSV with stage,op,batch,length,latency")
    fit.add_argument("--output", help="TOML file to write (default: stdout)")
    cmp_ = sub.add_parser("compare", help="compare metrics files against a baseline")
    cmp_.add_argument("reports", nargs="+", help="*.metrics.json files")
    cmp_.add_argument("--baseline", default="separate")
    cmp_.add_argument("--output", help="CSV file to write (default: stdout)")
    return parser


def overrides_from(args) -> dict:
    """Translate command-line flags into a config overlay (flags win)."""
    over: dict = {"workload": {}, "scheduler": {}}
    if args.policy is not None:
        over["scheduler"]["policy"] = Policy.parse(args.policy).value
    if args.rate is not None:
        over["workload"]["rate"] = args.rate
    if args.train_rate is not None:
        over["workload"]["train_rate"] = args.train_rate
    for f in _PARAM_FLAGS:
        v = getattr(args, f.name, None)
        if v is not None:
            over["scheduler"][f.name] = v
    if args.seed is not None:
        over["seeds"] = list(args.seed)
    if args.output is not None:
        over["output_dir"] = args.output
    return {k: v for k, v in over.items() if v != {}}


# -- single runs -----------------------------------------------------------


def run_one(raw: dict, seed: int, stem: str, dump: bool = False, ledger: bool = False) -> dict:
    """Simulate one (config, seed) pair and write its output files.

    Takes the plain config dict so it can run in a worker process.
    """
    cfg = cfgmod.build(raw)
    params = cfg.scheduler_for()
    engine = replace(cfg.engine, record_plans=cfg.engine.record_plans or dump)
    tasks = cfg.tasks(seed)
    result = simulate(cfg.cluster, tasks, params, seed=seed, options=engine)
    report = summarize(result, cfg.cluster, decision_latency=params.resolved_decision_latency)
    report.config_hash = cfg.config_hash
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    stamp = {"config_hash": cfg.config_hash, "seed": seed}
    with open(out / f"{stem}.jsonl", "w", encoding="utf-8") as fh:
        for r in result.records:
            fh.write(json.dumps({**r, **stamp}, sort_keys=True) + "\n")
    report.to_json(out / f"{stem}.metrics.json")
    if ledger:
        result.write_ledger(out / f"{stem}.gpus.csv")
    if dump:
        dump_plans({"config_hash": cfg.config_hash, "seed": seed, "plans": result.plans}, out / f"{stem}.plans.json")
    return report.to_dict()


def _execute(jobs: list, n_workers: int) -> list:
    if n_workers <= 1 or len(jobs) <= 1:
        return [run_one(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        futures = [pool.submit(run_one, *j) for j in jobs]
        return [f.result() for f in futures]


def cmd_run(args) -> int:
    cfg = cfgmod.load(args.config, overrides_from(args))
    policy = cfg.scheduler.policy.value
    jobs = [(cfg.raw, seed, f"{policy}_seed{seed}", args.dump_plans, args.ledger) for seed in cfg.seeds]
    reports = _execute(jobs, args.jobs)
    for rep in reports:
        log.info("%s seed=%d throughput=%.3f slo=%.3f", rep["policy"], rep["seed"], rep["throughput"],
                 rep["slo_attainment"])
    print(f"{len(reports)} run(s) written to {cfg.output_dir} (config {cfg.config_hash})")
    return EXIT_OK


def _axis_overlay(axis: str, value, base_lengths: dict):
    if axis != "policy":
        try:
            float(value)
        except ValueError:
            raise ConfigError("--values", f"{axis} values must be numbers, got {value!r}") from None
    if axis == "rate":
        return {"workload": {"rate": float(value)}}
    if axis == "train_rate":
        return {"workload": {"train_rate": float(value)}}
    if axis == "heterogeneity":
        base = cfgmod._length_dist(base_lengths, "workload.lengths")
        dist = make_heterogeneity_sweep(base, [float(value)])[0]
        table = asdict(dist)
        table["samples"] = list(table["samples"])
        return {"workload": {"lengths": table}}
    return {"scheduler": {"policy": Policy.parse(value).value}}


def cmd_sweep(args) -> int:
    if not args.values:
        raise ConfigError("--values", "give at least one value")
    over = overrides_from(args)
    base = cfgmod.load(args.config, over)  # validate before any run starts
    if args.axis == "policy":
        policies = [None]
    else:
        policies = [Policy.parse(p).value for p in (args.policies or DEFAULT_POLICIES)]
    jobs, keys = [], []
    for value in args.values:
        overlay = _axis_overlay(args.axis, value, base.raw["workload"].get("lengths", {}))
        for policy in policies:
            raw = cfgmod.deep_merge(base.raw, overlay)
            if policy is not None:
                raw = cfgmod.deep_merge(raw, {"scheduler": {"policy": policy}})
            cfg = cfgmod.build(raw)
            name = cfg.scheduler.policy.value
            for seed in cfg.seeds:
                stem = f"{args.axis}-{value}_{name}_seed{seed}"
                jobs.append((cfg.raw, seed, stem, args.dump_plans, args.ledger))
                keys.append((value, name, seed))
    log.info("sweep: %d runs", len(jobs))
    reports = _execute(jobs, args.jobs)
    rows = []
    grouped: dict = {}
    for (value, name, seed), rep in zip(keys, reports):
        grouped.setdefault((value, seed), {})[name] = _report_from(rep)
    for (value, seed), by_policy in grouped.items():
        table = compare(by_policy, baseline="separate")
        for policy, metric, v, b, ratio in table.rows:
            rows.append([args.axis, value, seed, policy, metric, v, b, ratio])
    out = base.output_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"sweep_{args.axis}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "seed", "policy", "metric", "value_metric", "baseline_value", "ratio"])
        w.writerows(rows)
    means = {}
    for (value, name, _), rep in zip(keys, reports):
        means.setdefault(f"{value}/{name}", []).append(_report_from(rep))
    with open(out / f"sweep_{args.axis}.summary.json", "w", encoding="utf-8") as fh:
        json.dump({k: mean_reports(v) for k, v in means.items()} | {"config_hash": base.config_hash},
                  fh, indent=1, sort_keys=True)
    print(f"{len(jobs)} run(s); comparison written to {out / f'sweep_{args.axis}.csv'}")
    return EXIT_OK


def _report_from(d: dict) -> MetricsReport:
    names = {f.name for f in fields(MetricsReport)}
    return MetricsReport(**{k: v for k, v in d.items() if k in names})


def cmd_fit(args) -> int:
    obs = read_observations(args.observations)
    coeffs = fit_coefficients(obs)
    text = cfgmod.coefficients_toml(coeffs)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
        print(f"wrote coefficients for {len(coeffs)} stage(s) to {args.output}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = {}
    for path in args.reports:
        with open(path, encoding="utf-8") as fh:
            rep = _report_from(json.load(fh))
        if rep.policy in reports:
            raise ConfigError("reports", f"two reports for policy {rep.policy!r}; compare one seed at a time")
        reports[rep.policy] = rep
    table = compare(reports, baseline=args.baseline)
    if args.output:
        table.to_csv(args.output)
        print(f"wrote {len(table.rows)} rows to {args.output}")
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["policy", "metric", "value", "baseline_value", "ratio"])
        w.writerows(table.rows)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "fit": cmd_fit, "compare": cmd_compare}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LemixError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
