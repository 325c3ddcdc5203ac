"""Experiment harness CLI.

Subcommands::

    emtk run <config.json> [--out DIR] [--jobs N]
    emtk compare <dir> <dir> ... [--csv PATH]
    emtk presets list

Config files are JSON with a ``version`` field; unknown keys are rejected.
The default output root comes from the EMTK_OUTPUT_ROOT environment
variable (falling back to the current directory).
"""
from __future__ import annotations

import argparse
import csv
import datetime
import json
import math
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .engine import EvolverConfig, run_cea, task_rng
from .polecart import PoleCartParams, make_polecart_tasks
from .problems import BenchmarkSpec, ProblemError, TaskDefinition, make_benchmark
from .recipes import (
    BilevelProblem,
    FidelityStack,
    ScenarioSet,
    build_multifidelity,
    build_multiscenario,
    solve_bilevel,
)
from .transfer import run_adaptive_emt, run_explicit_emt, run_mfea

SCHEMA_VERSION = 1

ENGINE_KINDS = ("cea", "mfea", "adaptive", "explicit")
PROBLEM_KINDS = ("benchmark", "polecart", "multifidelity", "multiscenario", "bilevel")

SUMMARY_COLUMNS = ["engine", "task_id", "metric", "value", "n_runs", "stderr"]


class ConfigError(ValueError):
    pass


def _require_keys(obj: dict, required: set, optional: set, where: str) -> None:
    keys = set(obj)
    missing = required - keys
    unknown = keys - required - optional
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    _require_keys(cfg, {"version", "problem", "engine", "n_runs", "base_seed"},
                  {"budget", "output_dir", "target"}, str(path))
    if cfg["version"] != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported config version {cfg['version']}")
    if int(cfg["n_runs"]) < 1:
        raise ConfigError(f"{path}: n_runs must be >= 1")

    prob = cfg["problem"]
    kind = prob.get("kind")
    if kind not in PROBLEM_KINDS:
        raise ConfigError(f"{path}: problem.kind must be one of {PROBLEM_KINDS}")
    spec = {
        "benchmark": ({"kind", "function", "dims"},
                      {"relatedness", "seed", "shifts"}),
        "polecart": ({"kind", "short_pole_lengths"}, {"max_steps"}),
        "multifidelity": ({"kind", "dim"}, {"cost_ratio", "seed"}),
        "multiscenario": ({"kind", "dim", "n_scenarios"}, {"spread", "seed"}),
        "bilevel": ({"kind", "instance"}, {"upper_pop", "upper_generations"}),
    }[kind]
    _require_keys(prob, *spec, where=f"{path}: problem")

    eng = cfg["engine"]
    ekind = eng.get("kind")
    if ekind not in ENGINE_KINDS:
        raise ConfigError(f"{path}: engine.kind must be one of {ENGINE_KINDS}")
    espec = {
        "cea": (set(), set()),
        "mfea": (set(), {"rmp"}),
        "adaptive": (set(), {"mixture_fraction", "diag_floor"}),
        "explicit": (set(), {"transfer_interval", "n_migrants"}),
    }[ekind]
    _require_keys(eng, espec[0] | {"kind"},
                  espec[1] | {"sbx_eta", "mutation_rate", "mutation_sigma", "elitism"},
                  where=f"{path}: engine")

    budget = cfg.get("budget", {})
    _require_keys(budget, set(), {"pop_size", "generations", "max_evaluations"},
                  where=f"{path}: budget")
    return cfg


def build_problem(prob: dict):
    """Instantiate the problem descriptor; returns (problem, target, descriptor)."""
    kind = prob["kind"]
    if kind == "benchmark":
        spec = BenchmarkSpec(function=prob["function"], dims=prob["dims"],
                             shifts=prob.get("shifts"),
                             relatedness=prob.get("relatedness", 1.0),
                             seed=prob.get("seed", 0))
        return make_benchmark(spec), None
    if kind == "polecart":
        params = PoleCartParams()
        if "max_steps" in prob:
            params.max_steps = int(prob["max_steps"])
        problem = make_polecart_tasks(prob["short_pole_lengths"], params)
        return problem, float(params.max_steps)
    if kind == "multifidelity":
        d = int(prob["dim"])
        stack = _sphere_fidelity_stack(d, prob.get("cost_ratio", 0.1))
        return build_multifidelity(stack), None
    if kind == "multiscenario":
        d = int(prob["dim"])
        n = int(prob["n_scenarios"])
        spread = float(prob.get("spread", 0.25))
        seed = int(prob.get("seed", 0))
        rng = np.random.default_rng(seed)
        tasks = []
        for i in range(n):
            shift = rng.uniform(-spread, spread, size=d)

            def objective(x, _s=shift):
                return -float(np.sum((x - _s) ** 2))

            tasks.append(TaskDefinition(id=i, objective=objective,
                                        lower=np.full(d, -1.0), upper=np.full(d, 1.0)))
        return build_multiscenario(ScenarioSet(tasks)), None
    raise ConfigError(f"problem kind {kind!r} is not runnable here")


def _sphere_fidelity_stack(dim: int, cost_ratio: float) -> FidelityStack:
    """Sphere target with a cheap cosine-perturbed surrogate."""
    lower = np.full(dim, -1.0)
    upper = np.full(dim, 1.0)

    def high(x):
        return -float(np.sum(x * x))

    def low(x):
        return -float(np.sum(x * x) + 0.1 * np.sum(np.cos(3.0 * x)) - 0.1 * dim)

    return FidelityStack(
        high=TaskDefinition(id=0, objective=high, lower=lower, upper=upper),
        lows=[TaskDefinition(id=0, objective=low, lower=lower, upper=upper)],
        cost_ratio=cost_ratio)


QUADRATIC_BILEVEL = {
    "instance": "quadratic",
    # closed form: lower best x_l* = x_u, upper optimum x_u = 0.25, f_u = 0.125
}


def build_bilevel(prob: dict) -> BilevelProblem:
    if prob["instance"] != "quadratic":
        raise ConfigError(f"unknown bilevel instance {prob['instance']!r}")
    return BilevelProblem(
        f_u=lambda xu, xl: float((xu[0] - 0.5) ** 2 + xl[0] ** 2),
        f_l=lambda xu, xl: -float((xl[0] - xu[0]) ** 2),
        lower_u=np.zeros(1), upper_u=np.ones(1),
        lower_l=np.zeros(1), upper_l=np.ones(1))


def make_evolver_config(cfg: dict, seed: int) -> EvolverConfig:
    eng = cfg["engine"]
    budget = cfg.get("budget", {})
    return EvolverConfig(
        pop_size=int(budget.get("pop_size", 100)),
        generations=int(budget.get("generations", 100)),
        max_evaluations=budget.get("max_evaluations"),
        sbx_eta=float(eng.get("sbx_eta", 10.0)),
        mutation_rate=eng.get("mutation_rate"),
        mutation_sigma=float(eng.get("mutation_sigma", 0.05)),
        elitism=int(eng.get("elitism", 1)),
        seed=seed)


def _execute_run(cfg: dict, run_index: int, run_dir: Path) -> dict:
    """One seeded run; writes per-run CSVs and returns the run record."""
    seed = int(cfg["base_seed"]) + run_index
    eng = cfg["engine"]
    run_dir.mkdir(parents=True, exist_ok=True)

    if cfg["problem"]["kind"] == "bilevel":
        problem = build_bilevel(cfg["problem"])
        config = make_evolver_config(cfg, seed)
        result = solve_bilevel(problem, config,
                               upper_pop=int(cfg["problem"].get("upper_pop", 20)),
                               upper_generations=int(cfg["problem"].get(
                                   "upper_generations", 30)))
        with open(run_dir / "bilevel.json", "w") as fh:
            fh.write(result.to_json())
        return {"seed": seed,
                "f_u_best": float(result.f_u_best),
                "x_u_best": [float(v) for v in np.atleast_1d(result.x_u_best)],
                "lower_level_evaluations": result.lower_level_evaluations,
                "upper_level_evaluations": result.upper_level_evaluations}

    problem, target = build_problem(cfg["problem"])
    if cfg.get("target") is not None:
        target = float(cfg["target"])
    config = make_evolver_config(cfg, seed)

    if eng["kind"] == "cea":
        traces, evals_traces, finals = [], [], []
        for t, task in enumerate(problem.tasks):
            res = run_cea(task, config, rng=task_rng(seed, t))
            traces.append(res.best_fitness_trace[0])
            evals_traces.append(res.evaluations_trace[0])
            finals.append(float(res.best_fitness_trace[0][-1]))
        _write_trace_csv(run_dir / "trace.csv", traces, evals_traces)
    else:
        if eng["kind"] == "mfea":
            result = run_mfea(problem, config, rmp=float(eng.get("rmp", 0.3)))
        elif eng["kind"] == "adaptive":
            result = run_adaptive_emt(problem, config)
            result.transfer_trace_to_csv(run_dir / "transfer.csv")
        else:
            result = run_explicit_emt(problem, config,
                                      transfer_interval=int(eng.get("transfer_interval", 5)),
                                      n_migrants=int(eng.get("n_migrants", 1)))
            result.migration_log_to_csv(run_dir / "migration.csv")
        traces = result.best_fitness_trace
        evals_traces = result.evaluations_trace
        finals = [float(tr[-1]) for tr in traces]
        _write_trace_csv(run_dir / "trace.csv", traces, evals_traces)

    record = {"seed": seed, "final_best": finals,
              "evaluations": [int(v) for v in problem.evaluation_counts()],
              "weighted_cost": problem.weighted_cost()}
    if target is not None:
        record["evals_to_target"] = _evals_to_target(traces, evals_traces, target)
        record["success"] = [bool(f >= target) for f in finals]
    return record


def _write_trace_csv(path, traces, evals_traces):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["generation", "task_id", "best_fitness", "evaluations"])
        for task_id, (trace, evals) in enumerate(zip(traces, evals_traces)):
            for gen, best in enumerate(trace):
                writer.writerow([gen, task_id, repr(float(best)), int(evals[gen])])


def _evals_to_target(traces, evals_traces, target):
    out = []
    for trace, evals in zip(traces, evals_traces):
        hit = np.flatnonzero(np.asarray(trace) >= target)
        out.append(int(evals[hit[0]]) if hit.size else None)
    return out


def _read_run_records(out_dir: Path) -> list:
    with open(out_dir / "runs.json") as fh:
        return json.load(fh)


def _aggregate(cfg: dict, records: list) -> dict:
    """Reduce per-run records to the aggregate document (timestamp separate)."""
    agg = {"config": cfg, "n_runs": len(records),
           "seeds": [r["seed"] for r in records], "per_task": {}}
    if cfg["problem"]["kind"] == "bilevel":
        vals = [r["f_u_best"] for r in records]
        agg["per_task"]["0"] = {
            "mean_f_u": statistics.fmean(vals),
            "median_f_u": statistics.median(vals),
            "mean_lower_evaluations": statistics.fmean(
                r["lower_level_evaluations"] for r in records),
        }
        return agg
    n_tasks = len(records[0]["final_best"])
    for t in range(n_tasks):
        finals = [r["final_best"][t] for r in records]
        entry = {
            "mean_best": statistics.fmean(finals),
            "median_best": statistics.median(finals),
            "mean_evaluations": statistics.fmean(r["evaluations"][t] for r in records),
        }
        if "success" in records[0]:
            entry["success_rate"] = statistics.fmean(
                1.0 if r["success"][t] else 0.0 for r in records)
        if "evals_to_target" in records[0]:
            vals = [r["evals_to_target"][t] for r in records]
            vals = [math.inf if v is None else v for v in vals]
            med = statistics.median(vals)
            entry["median_evals_to_target"] = None if math.isinf(med) else med
        agg["per_task"][str(t)] = entry
    return agg


def _write_summary(out_dir: Path, cfg: dict, agg: dict) -> None:
    rows = []
    engine = cfg["engine"]["kind"]
    n_runs = agg["n_runs"]
    for task_id, entry in agg["per_task"].items():
        for metric, value in entry.items():
            rows.append([engine, task_id, metric,
                         "" if value is None else repr(float(value)), n_runs, ""])
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        writer.writerows(rows)
    widths = [10, 8, 24, 16]
    print("  ".join(h.ljust(w) for h, w in zip(["engine", "task", "metric", "value"], widths)))
    for row in rows:
        print("  ".join(str(v).ljust(w) for v, w in zip([row[0], row[1], row[2], row[3]], widths)))


def _run_worker(args):
    cfg, r, run_dir = args
    return r, _execute_run(cfg, r, Path(run_dir))


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    root = args.out or cfg.get("output_dir") or os.environ.get("EMTK_OUTPUT_ROOT", ".")
    out_dir = Path(root)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)

    n_runs = int(cfg["n_runs"])
    jobs = [(cfg, r, str(out_dir / "runs" / f"run_{r:04d}")) for r in range(n_runs)]
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = dict(pool.map(_run_worker, jobs))
        else:
            results = dict(map(_run_worker, jobs))
    except Exception as exc:  # noqa: BLE001 - any run error is a hard failure
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    records = [results[r] for r in range(n_runs)]  # reduce in run-index order
    with open(out_dir / "runs.json", "w") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)

    agg = _aggregate(cfg, _read_run_records(out_dir))
    with open(out_dir / "aggregate.json", "w") as fh:
        json.dump(agg, fh, indent=2, sort_keys=True)
    with open(out_dir / "timestamp.txt", "w") as fh:
        fh.write(datetime.datetime.now(datetime.timezone.utc).isoformat())
    _write_summary(out_dir, cfg, agg)
    return 0


def cmd_compare(args) -> int:
    aggs = []
    for d in args.reports:
        with open(Path(d) / "aggregate.json") as fh:
            aggs.append((d, json.load(fh)))
    if len(aggs) < 2:
        print("need at least two report directories", file=sys.stderr)
        return 2
    ref = aggs[0][1]["config"]["problem"]
    for d, agg in aggs[1:]:
        if agg["config"]["problem"] != ref:
            print(f"{d}: problem preset differs from {aggs[0][0]}", file=sys.stderr)
            return 2

    metrics = sorted({m for _, a in aggs for e in a["per_task"].values() for m in e
                      if e[m] is not None})
    rows = []
    for d, agg in aggs:
        engine = agg["config"]["engine"]["kind"]
        for task_id, entry in sorted(agg["per_task"].items()):
            for metric in metrics:
                if metric in entry:
                    value = entry[metric]
                    rows.append([engine, task_id, metric,
                                 "" if value is None else repr(float(value)),
                                 agg["n_runs"], ""])
    header = "  ".join(h.ljust(w) for h, w in
                       zip(["engine", "task", "metric", "value", "n_runs"],
                           [10, 6, 26, 18, 6]))
    print(header)
    for row in rows:
        print("  ".join(str(v).ljust(w) for v, w in
                        zip(row[:5], [10, 6, 26, 18, 6])))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SUMMARY_COLUMNS)
            writer.writerows(rows)
    return 0


def cmd_presets(args) -> int:
    if args.what != "list":
        print("usage: emtk presets list", file=sys.stderr)
        return 2
    print("problem kinds:", ", ".join(PROBLEM_KINDS))
    print("engine kinds: ", ", ".join(ENGINE_KINDS))
    print("polecart task family: short pole lengths 0.60 / 0.65 / 0.70")
    print("bilevel instances: quadratic")
    print("benchmark base functions: sphere, rastrigin, ackley")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emtk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a seeded experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="compare >= 2 report directories")
    p_cmp.add_argument("reports", nargs="+")
    p_cmp.add_argument("--csv", default=None)
    p_cmp.set_defaults(func=cmd_compare)

    p_pre = sub.add_parser("presets", help="list available presets")
    p_pre.add_argument("what")
    p_pre.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
