"""Command line interface: ``run``, ``sweep``, ``synth`` and ``report``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .data import (DataError, SyntheticSpec, generate_synthetic, load_csv, r_squared,
                   recovery_check, synthetic_features, ground_truth_genotype,
                   VERIFICATION_SEED_OFFSET, write_csv)
from .expression import evaluate, to_infix, usage_stats
from .gomea import RunConfig, run
from .gp import GpConfig, gp_run

log = logging.getLogger("modgomea")

SWEEP_COLUMNS = [
    "algo", "trees", "depth", "pop", "terminal_policy", "repetition", "seed", "dataset",
    "r2_train", "r2_test", "recovered", "nodes", "nodes_expanded", "nodes_deduplicated",
    "subexpr_used", "subexpr_reused", "subexpr_as_function", "evaluations", "generations",
    "evals_per_individual_generation", "stop_reason", "wall_seconds", "error",
]
WALL_TIME_KEYS = ("elapsed_seconds", "wall_seconds")


class CliError(Exception):
    pass


# -- plans ------------------------------------------------------------------

@dataclass
class Plan:
    """One run: algorithm, data source, representation, budget and output."""
    algo: str = "gomea"
    dataset: Optional[str] = None
    synthetic: Optional[int] = None
    trees: int = 4
    depth: int = 4
    pop: int = 1024
    seed: int = 0
    budget_seconds: Optional[float] = None
    budget_generations: Optional[int] = None
    linear_scaling: bool = False
    terminal_policy: str = "full"
    batch_max: int = 2048
    coefficients: Optional[bool] = None
    target: Optional[str] = None
    split: Optional[float] = None
    out: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.algo not in ("gomea", "gp"):
            raise CliError(f"unknown algorithm {self.algo!r}; expected gomea or gp")
        if (self.dataset is None) == (self.synthetic is None):
            raise CliError("give exactly one of --dataset or --synthetic")
        if self.budget_seconds is None and self.budget_generations is None:
            raise CliError("give --budget-seconds and/or --budget-generations")
        if self.dataset is not None and not Path(self.dataset).is_file():
            raise CliError(f"dataset not found: {self.dataset}")
        self.config().validate()
        return self

    def config(self) -> RunConfig:
        cls = GpConfig if self.algo == "gp" else RunConfig
        coefs = self.coefficients
        if coefs is None:
            coefs = self.synthetic is None
        kw = dict(n_trees=self.trees, tree_depth=self.depth, population_size=self.pop,
                  seed=self.seed, time_budget=self.budget_seconds,
                  max_generations=self.budget_generations, linear_scaling=self.linear_scaling,
                  subexpr_terminal_policy=self.terminal_policy, max_batch=self.batch_max,
                  use_coefficients=coefs)
        names = set(cls.field_names())
        for key, value in self.extra.items():
            if key not in names:
                raise CliError(f"unknown configuration key {key!r}")
            kw[key] = value
        try:
            return cls(**kw).validate()
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid configuration: {exc}") from None

    def load_dataset(self):
        if self.synthetic is not None:
            spec = SyntheticSpec(int(self.synthetic), seed=self.seed)
            return generate_synthetic(spec, 1.0 if self.split is None else self.split)
        return load_csv(self.dataset, self.target, 0.75 if self.split is None else self.split,
                        self.seed)


_PLAN_FIELDS = {f.name: f.type for f in fields(Plan) if f.name != "extra"}


def _coerce(text: str):
    low = text.strip().lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if "," in text:
        return tuple(s.strip() for s in text.split(",") if s.strip())
    return text.strip()


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = _coerce(value)
    return out


def _merge(file_values: dict, cli_values: dict) -> dict:
    merged = dict(file_values)
    merged.update({k: v for k, v in cli_values.items() if v is not None})
    return merged


def plan_from(values: dict) -> Plan:
    kw, extra = {}, {}
    for key, value in values.items():
        if key in _PLAN_FIELDS:
            kw[key] = value
        else:
            extra[key] = value
    return Plan(extra=extra, **kw)


# -- running ------------------------------------------------------------------

def _verification_r2(genotype, scale, spec: SyntheticSpec):
    X = synthetic_features(spec, n_samples=10_000, seed=spec.seed + VERIFICATION_SEED_OFFSET)
    truth = evaluate(ground_truth_genotype(spec.id), X)
    pred = scale[0] + scale[1] * evaluate(genotype, X)
    if not np.all(np.isfinite(pred)):
        return -math.inf
    return r_squared(pred, truth)


def execute(plan: Plan, quiet: bool = True, linkage_hook=None) -> tuple[dict, object, object]:
    """Run one plan; returns (summary, result, dataset)."""
    config = plan.config()
    dataset = plan.load_dataset()
    def progress(entry, _population):
        log.info("gen %d  best_r2 %.6f  evals %d  archive %d", entry["generation"],
                 entry["best_r2"], entry["evaluations"], entry["archive_size"])
    callback = None if quiet else progress
    started = time.perf_counter()
    if plan.algo == "gp":
        result = gp_run(config, dataset, callback=callback)
    else:
        result = run(config, dataset, callback=callback, linkage_hook=linkage_hook)
    best = result.archive.best()
    summary = {
        "algo": plan.algo,
        "dataset": plan.dataset if plan.dataset else f"synthetic-{plan.synthetic}",
        "seed": plan.seed,
        "config": config.to_dict(),
        "generations": result.generations,
        "evaluations": result.evaluations,
        "stop_reason": result.stop_reason,
        "fos_size": result.fos_size,
    }
    if best is None:
        summary.update(r2_train=None, r2_test=None, recovered=None, usage=None,
                       best_expression=None, scale=None)
    else:
        g = best.genotype
        scale = g.fitness.scale
        r2_test = None
        if plan.synthetic is not None and dataset.test.size == 0:
            r2_test = _verification_r2(g, scale, dataset.ground_truth)
        elif dataset.test.size >= 2:
            pred = scale[0] + scale[1] * evaluate(g, dataset.X_test)
            try:
                r2_test = r_squared(pred, dataset.y_test) if np.all(np.isfinite(pred)) \
                    else -math.inf
            except DataError:
                r2_test = None
        recovered = None
        if plan.synthetic is not None:
            recovered = bool(recovery_check(g, dataset.ground_truth,
                                            scale if config.linear_scaling else None))
        summary.update(r2_train=best.r2, r2_test=r2_test, recovered=recovered,
                       usage=asdict(usage_stats(g)), best_expression=to_infix(g),
                       scale=list(scale))
    gens = max(result.generations, 1)
    summary["evals_per_individual_generation"] = \
        (sum(e["evaluations_generation"] for e in result.log) / gens / config.population_size)
    summary["wall_seconds"] = time.perf_counter() - started
    return summary, result, dataset


def _describe(entry):
    return to_infix(entry.genotype).replace("\n", "; ")


def write_run(out: Path, summary: dict, result, dataset):
    try:
        out.mkdir(parents=True, exist_ok=True)
        with (out / "log.jsonl").open("w") as fh:
            for entry in result.log:
                fh.write(json.dumps(_jsonable(entry)) + "\n")
        with (out / "front.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["size", "r2_train", "r2_test", "expression"])
            for e in sorted(result.archive.entries, key=lambda e: e.size):
                w.writerow([e.size, repr(e.r2), _test_r2(e, dataset), _describe(e)])
        (out / "best.txt").write_text((summary.get("best_expression") or "") + "\n")
        (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2) + "\n")
    except OSError as exc:
        raise CliError(f"cannot write results to {exc.filename or out}: {exc.strerror}") \
            from None


def _test_r2(entry, dataset):
    if dataset.test.size < 2:
        if dataset.ground_truth is None:
            return ""
        return repr(_verification_r2(entry.genotype, entry.genotype.fitness.scale,
                                     dataset.ground_truth))
    a, b = entry.genotype.fitness.scale
    pred = a + b * evaluate(entry.genotype, dataset.X_test)
    if not np.all(np.isfinite(pred)):
        return repr(-math.inf)
    try:
        return repr(r_squared(pred, dataset.y_test))
    except DataError:
        return ""


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# -- sweeps -------------------------------------------------------------------

def _broadcast(name, values, n):
    if len(values) == 1:
        return list(values) * n
    if len(values) != n:
        raise CliError(f"--{name} has {len(values)} values; expected 1 or {n}")
    return list(values)


def sweep_plans(base: dict, algos, trees, depths, pops, reps: int, policies=None):
    """Cells are (algo, trees, depth, policy) tuples zipped with broadcasting,
    crossed with population sizes and repetitions."""
    policies = policies or [base.get("terminal_policy") or "full"]
    n = max(len(algos), len(trees), len(depths), len(policies))
    cells = list(zip(_broadcast("algo", algos, n), _broadcast("trees", trees, n),
                     _broadcast("depth", depths, n), _broadcast("terminal-policy", policies, n)))
    if reps < 1:
        raise CliError("--reps must be at least 1")
    base_seed = int(base.get("seed") or 0)
    plans = []
    for algo, t, d, pol in cells:
        for pop in pops:
            for rep in range(reps):
                values = dict(base, algo=algo, trees=int(t), depth=int(d), pop=int(pop),
                              terminal_policy=pol, seed=base_seed + rep)
                values.pop("out", None)
                plans.append((rep, plan_from(values)))
    return plans


def _sweep_row(rep, plan: Plan, out_dir: Optional[Path]):
    row = {"algo": plan.algo, "trees": plan.trees, "depth": plan.depth, "pop": plan.pop,
           "terminal_policy": plan.terminal_policy, "repetition": rep, "seed": plan.seed,
           "dataset": plan.dataset or f"synthetic-{plan.synthetic}", "error": ""}
    try:
        plan.validate()
        summary, result, dataset = execute(plan)
        if out_dir is not None:
            write_run(out_dir / f"{plan.algo}_{plan.trees}x{plan.depth}_{plan.terminal_policy}"
                      f"_p{plan.pop}" / f"rep{rep}", summary, result, dataset)
    except Exception as exc:  # recorded per row; the sweep goes on
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row
    usage = summary.get("usage") or {}
    row.update(
        r2_train=summary["r2_train"], r2_test=summary["r2_test"],
        recovered="" if summary["recovered"] is None else summary["recovered"],
        nodes=usage.get("nodes_total"), nodes_expanded=usage.get("nodes_expanded"),
        nodes_deduplicated=usage.get("nodes_deduplicated"),
        subexpr_used=usage.get("subexpressions_used"),
        subexpr_reused=usage.get("subexpressions_reused"),
        subexpr_as_function=usage.get("reused_as_function"),
        evaluations=summary["evaluations"], generations=summary["generations"],
        evals_per_individual_generation=summary["evals_per_individual_generation"],
        stop_reason=summary["stop_reason"], wall_seconds=summary["wall_seconds"])
    return row


def _sweep_task(args):
    return _sweep_row(*args)


def run_sweep(plans, out: Path, workers: int = 1, keep_runs: bool = False,
              progress=None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    runs_dir = out / "runs" if keep_runs else None
    tasks = [(rep, plan, runs_dir) for rep, plan in plans]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, SWEEP_COLUMNS, extrasaction="ignore")
        w.writeheader()
        fh.flush()
        if workers > 1:
            from multiprocessing import get_context
            with get_context("spawn").Pool(workers) as pool:
                rows = pool.imap(_sweep_task, tasks)
                for row in rows:
                    w.writerow(row)
                    fh.flush()
                    if progress:
                        progress(row)
        else:
            for task in tasks:
                row = _sweep_task(task)
                w.writerow(row)
                fh.flush()
                if progress:
                    progress(row)
    return path


# -- reporting ----------------------------------------------------------------

REPORT_KEYS = ("algo", "trees", "depth", "pop", "terminal_policy")


def _float(v):
    if v in ("", None):
        return None
    try:
        return float(v)
    except ValueError:
        return None


def summarize(path) -> list[dict]:
    """Per-configuration aggregates of a sweep CSV."""
    try:
        fh = Path(path).open(newline="")
    except OSError as exc:
        raise CliError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        missing = set(SWEEP_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise CliError(f"{path}: not a sweep CSV (missing {sorted(missing)})")
        rows = list(reader)
    groups: dict = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in REPORT_KEYS), []).append(row)
    out = []
    for key, members in groups.items():
        ok = [r for r in members if not r["error"]]
        agg = dict(zip(REPORT_KEYS, key))
        agg["runs"] = len(ok)
        agg["failed"] = len(members) - len(ok)
        r2 = np.array([_float(r["r2_train"]) for r in ok if _float(r["r2_train"]) is not None])
        agg["r2_mean"] = float(r2.mean()) if r2.size else math.nan
        agg["r2_std"] = float(r2.std()) if r2.size else math.nan
        rec = [r["recovered"] for r in ok if r["recovered"] != ""]
        agg["recovery_rate"] = (sum(v == "True" for v in rec) / len(rec)) if rec else None
        for col in ("nodes", "nodes_deduplicated", "subexpr_used", "subexpr_reused",
                    "subexpr_as_function", "evals_per_individual_generation", "generations"):
            vals = [_float(r[col]) for r in ok if _float(r[col]) is not None]
            agg[col] = float(np.mean(vals)) if vals else math.nan
        out.append(agg)
    return out


def format_report(aggregates) -> str:
    lines = []
    head = (f"{'config':<26}{'runs':>5}{'R2 mean':>12}{'R2 std':>10}{'recovered':>10}"
            f"{'nodes':>8}{'dedup':>8}{'evals/ind/gen':>15}")
    lines.append(head)
    for a in aggregates:
        name = f"{a['algo']} {a['trees']}x{a['depth']} p{a['pop']}"
        if a["terminal_policy"] != "full":
            name += f" {a['terminal_policy']}"
        rec = "-" if a["recovery_rate"] is None else f"{a['recovery_rate']:.2f}"
        lines.append(f"{name:<26}{a['runs']:>5}{a['r2_mean']:>12.6f}{a['r2_std']:>10.6f}"
                     f"{rec:>10}{a['nodes']:>8.1f}{a['nodes_deduplicated']:>8.1f}"
                     f"{a['evals_per_individual_generation']:>15.2f}")
    lines.append("")
    lines.append("subexpression use (mean per elite)")
    lines.append(f"{'config':<26}{'used':>8}{'re-used':>10}{'as function':>13}")
    for a in aggregates:
        name = f"{a['algo']} {a['trees']}x{a['depth']} p{a['pop']}"
        lines.append(f"{name:<26}{a['subexpr_used']:>8.2f}{a['subexpr_reused']:>10.2f}"
                     f"{a['subexpr_as_function']:>13.2f}")
    return "\n".join(lines)


# -- argument parsing ---------------------------------------------------------

def _add_common(p, multi=False):
    nargs = "+" if multi else None
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--algo", nargs=nargs, choices=("gomea", "gp"))
    p.add_argument("--dataset", help="CSV file with a header row")
    p.add_argument("--target", help="target column of --dataset (default: last)")
    p.add_argument("--split", type=float, help="train fraction")
    p.add_argument("--synthetic", type=int, choices=range(1, 6), metavar="{1..5}")
    p.add_argument("--trees", type=int, nargs=nargs)
    p.add_argument("--depth", type=int, nargs=nargs)
    p.add_argument("--pop", type=int, nargs=nargs)
    p.add_argument("--seed", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--budget-seconds", type=float)
    p.add_argument("--budget-generations", type=int)
    p.add_argument("--budget-clock", choices=("wall", "cpu"),
                   help="measure --budget-seconds in wall time (default) or process CPU time")
    p.add_argument("--linear-scaling", action="store_true", default=None)
    p.add_argument("--coefficients", action=argparse.BooleanOptionalAction, default=None,
                   help="sample coefficients (default: on for CSV data, off for synthetic)")
    p.add_argument("--terminal-policy", nargs=nargs, choices=("full", "koza"))
    p.add_argument("--batch-max", type=int)
    p.add_argument("--out", help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="modgomea",
                                     description="Modular GP-GOMEA symbolic regression")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one configuration")
    _add_common(p)
    p.add_argument("--dump-linkage", action="store_true",
                   help="write MI matrices and FOS of every generation as CSV")

    p = sub.add_parser("sweep", help="run a grid of configurations")
    _add_common(p, multi=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--keep-runs", action="store_true", help="also write per-run artifacts")

    p = sub.add_parser("synth", help="write synthetic datasets as CSV")
    p.add_argument("--synthetic", type=int, nargs="+", choices=range(1, 6), required=True,
                   metavar="{1..5}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="summarize a sweep CSV")
    p.add_argument("csv")
    p.add_argument("--out", help="also write the aggregates as CSV")
    return parser


_NON_PLAN = ("command", "verbose", "config", "reps", "workers", "keep_runs",
             "dump_linkage")


def _values(args) -> dict:
    file_values = read_config_file(args.config) if args.config else {}
    cli = {k: v for k, v in vars(args).items() if k not in _NON_PLAN}
    merged = _merge(file_values, cli)
    if args.reps is not None:
        merged["reps"] = args.reps
    return merged


def _linkage_writer(out: Path):
    def hook(generation, mis, fos):
        d = out / "linkage"
        d.mkdir(parents=True, exist_ok=True)
        for t, mi in enumerate(mis):
            np.savetxt(d / f"mi_g{generation}_t{t}.csv", mi.matrix, delimiter=",")
        with (d / f"fos_g{generation}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subset", "tree", "loci"])
            for e, (t, loci) in enumerate(fos):
                w.writerow([e, t, " ".join(str(int(i)) for i in loci)])
    return hook


def cmd_run(args) -> int:
    values = _values(args)
    reps = int(values.pop("reps", 1) or 1)
    if not values.get("out"):
        raise CliError("run needs --out")
    base_out = Path(values["out"])
    base_seed = int(values.get("seed") or 0)
    for rep in range(reps):
        plan = plan_from(dict(values, seed=base_seed + rep, algo=values.get("algo") or "gomea"))
        plan.validate()
        out = base_out if reps == 1 else base_out / f"rep{rep}"
        hook = _linkage_writer(out) if args.dump_linkage and plan.algo == "gomea" else None
        summary, result, dataset = execute(plan, quiet=not args.verbose, linkage_hook=hook)
        write_run(out, summary, result, dataset)
        print(f"{out}: R2 train {summary['r2_train']}, stop {summary['stop_reason']}, "
              f"{summary['generations']} generations")
    return 0


def cmd_sweep(args) -> int:
    values = _values(args)
    reps = int(values.pop("reps", 1) or 1)
    out = values.pop("out", None)
    if not out:
        raise CliError("sweep needs --out")
    algos = values.pop("algo", None) or ["gomea"]
    trees = values.pop("trees", None) or [4]
    depths = values.pop("depth", None) or [4]
    pops = values.pop("pop", None) or [1024]
    policies = values.pop("terminal_policy", None) or ["full"]
    as_list = lambda v: list(v) if isinstance(v, (list, tuple)) else [v]
    plans = sweep_plans(values, as_list(algos), as_list(trees), as_list(depths),
                        as_list(pops), reps, as_list(policies))
    for _, plan in plans:
        plan.validate()  # reject bad grids before any compute

    def progress(row):
        state = row["error"] or f"R2 {row.get('r2_train')}"
        print(f"{row['algo']} {row['trees']}x{row['depth']} p{row['pop']} rep {row['repetition']}:"
              f" {state}", flush=True)

    path = run_sweep(plans, Path(out), args.workers, args.keep_runs, progress)
    print(f"wrote {path}")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc.strerror}") from None
    for sid in args.synthetic:
        ds = generate_synthetic(SyntheticSpec(sid, seed=args.seed, n_samples=args.samples))
        path = out / f"synthetic_{sid}_seed{args.seed}.csv"
        write_csv(ds, path)
        print(path)
    return 0


def cmd_report(args) -> int:
    aggregates = summarize(args.csv)
    print(format_report(aggregates))
    if args.out:
        with Path(args.out).open("w", newline="") as fh:
            w = csv.DictWriter(fh, list(aggregates[0]) if aggregates else list(REPORT_KEYS))
            w.writeheader()
            w.writerows(aggregates)
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "synth": cmd_synth, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
