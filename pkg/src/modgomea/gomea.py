"""Modular GP-GOMEA: initialization, fitness, gene-pool optimal mixing and
the generational loop."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .archive import ParetoArchive
from .data import Dataset, DataError
from . import _kernels
from .expression import (ARG, CALL, COEF, COS, FEAT, LOG, SIN, SQRT, FitnessRecord,
                         MultiTreeGenotype, OP_NAMES, _depths_array, node_depths,
                         template_size, usage_stats)
from .linkage import estimate_mi, learn_fos

log = logging.getLogger(__name__)

_OPERATOR_CODES = {name: code for code, name in OP_NAMES.items()}
DEFAULT_OPERATORS = ("+", "-", "*", "/", "sin", "cos", "log", "sqrt")


@dataclass
class RunConfig:
    n_trees: int = 4
    tree_depth: int = 4
    population_size: int = 1024
    seed: int = 0
    operators: tuple = DEFAULT_OPERATORS
    use_coefficients: bool = True
    p_terminal_grow: float = 0.5
    p_coefficient: float = 0.5
    n_coefficient_bins: int = 25
    coeff_mutation_rate: float = 1.0
    coeff_step_init: float = 0.1
    step_decay_factor: float = 10.0
    step_decay_patience: int = 5
    coeff_mutation_per_pass: bool = False
    max_batch: int = 2048
    time_budget: Optional[float] = None
    budget_clock: str = "wall"  # or "cpu": process time, immune to other load
    max_generations: Optional[int] = None
    stagnation_patience: int = 100
    linear_scaling: bool = False
    subexpr_terminal_policy: str = "full"
    r2_stop: float = 1.0
    archive_capacity: int = 100

    def validate(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if self.tree_depth < 0:
            raise ValueError("tree_depth must be non-negative")
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        for name in ("p_terminal_grow", "p_coefficient", "coeff_mutation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.n_coefficient_bins < 1:
            raise ValueError("n_coefficient_bins must be positive")
        if self.coeff_step_init <= 0 or self.step_decay_factor <= 0:
            raise ValueError("coefficient step size and decay factor must be positive")
        if self.max_batch < 1:
            raise ValueError("max_batch must be positive")
        if self.budget_clock not in _CLOCKS:
            raise ValueError("budget_clock must be 'wall' or 'cpu'")
        if self.subexpr_terminal_policy not in ("full", "koza"):
            raise ValueError("subexpr_terminal_policy must be 'full' or 'koza'")
        unknown = set(self.operators) - set(_OPERATOR_CODES)
        if unknown:
            raise ValueError(f"unknown operators: {sorted(unknown)}")
        if not self.operators and self.n_trees == 1:
            raise ValueError("a single tree needs at least one operator")
        return self

    def to_dict(self):
        d = asdict(self)
        d["operators"] = list(self.operators)
        return d

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# -- symbol sampling ---------------------------------------------------------

class SymbolSets:
    """Legal symbols for one tree of the multi-tree."""

    def __init__(self, tree: int, config: RunConfig, n_features: int, coeff_range):
        n = config.n_trees
        self.functions = [(_OPERATOR_CODES[o], 0) for o in config.operators]
        self.functions += [(CALL, j) for j in range(tree)]
        koza = (config.subexpr_terminal_policy == "koza" and 0 < tree < n - 1)
        args = [(ARG, 0), (ARG, 1)] if 0 < tree < n - 1 else []
        feats = [] if koza else [(FEAT, k) for k in range(n_features)]
        self.terminals = feats + args
        self.coefficients = config.use_coefficients and not koza
        if not self.terminals and not self.coefficients:
            raise ValueError(f"tree {tree} has an empty terminal set")
        self.p_coefficient = config.p_coefficient if self.terminals else 1.0
        self.lo, self.hi = coeff_range

    def terminal(self, rng):
        if self.coefficients and rng.random() < self.p_coefficient:
            return COEF, 0, rng.uniform(self.lo, self.hi)
        k, a = self.terminals[rng.integers(len(self.terminals))]
        return k, a, 0.0

    def function(self, rng):
        if not self.functions:
            return self.terminal(rng)
        k, a = self.functions[rng.integers(len(self.functions))]
        return k, a, 0.0


def sample_tree(method: str, sets: SymbolSets, depth: int, rng, p_terminal: float = 0.5):
    """Sample one template with the 'full' or 'grow' method.

    Returns ``(kinds, args, values, decided)`` where ``decided`` marks the
    slots whose symbol the method chose (the rest are intron fill).
    """
    size = template_size(depth)
    depths = node_depths(depth)
    kinds = np.zeros(size, dtype=np.int8)
    args = np.zeros(size, dtype=np.int32)
    values = np.zeros(size)
    decided = np.zeros(size, dtype=bool)

    # fill every slot first: functions inside, terminals on the leaves
    for i in range(size):
        sym = sets.terminal(rng) if depths[i] == depth else sets.function(rng)
        kinds[i], args[i], values[i] = sym
    if method == "full":
        decided[:] = True
        return kinds, args, values, decided
    if method != "grow":
        raise ValueError(f"unknown initialization method {method!r}")

    stack = [0]
    while stack:
        i = stack.pop()
        decided[i] = True
        d = depths[i]
        if d == depth:
            continue  # leaf already holds a terminal
        if rng.random() < p_terminal:
            kinds[i], args[i], values[i] = sets.terminal(rng)
            continue
        k = kinds[i]
        right = i + (1 << (depth - d))
        if k in (SIN, COS, LOG, SQRT):
            stack.append(i + 1)
        elif k in (FEAT, COEF, ARG):
            pass  # terminal-only function fallback
        else:
            stack.append(right)
            stack.append(i + 1)
    return kinds, args, values, decided


def symbol_sets(config: RunConfig, n_features: int, coeff_range) -> list[SymbolSets]:
    return [SymbolSets(t, config, n_features, coeff_range) for t in range(config.n_trees)]


def initialize_population(config: RunConfig, dataset: Dataset, rng):
    """Half-and-half population plus the per-tree MI bias matrices."""
    y = dataset.y_train
    sets = symbol_sets(config, dataset.n_features, (float(y.min()), float(y.max())))
    n, depth, pop = config.n_trees, config.tree_depth, config.population_size
    size = template_size(depth)
    kinds = np.zeros((pop, n, size), dtype=np.int8)
    args = np.zeros((pop, n, size), dtype=np.int32)
    values = np.zeros((pop, n, size))
    for t in range(n):
        full = np.zeros(pop, dtype=bool)
        full[rng.permutation(pop)[: pop // 2]] = True
        for p in range(pop):
            k, a, v, _ = sample_tree("full" if full[p] else "grow", sets[t], depth, rng,
                                     config.p_terminal_grow)
            kinds[p, t], args[p, t], values[p, t] = k, a, v
    population = [MultiTreeGenotype(kinds[p], args[p], values[p], depth) for p in range(pop)]
    assign_coefficient_bins(population, config.n_coefficient_bins)
    ids = np.stack([g.symbol_ids() for g in population])
    bias = [estimate_mi(ids[:, t, :]) for t in range(n)]
    return population, bias


def assign_coefficient_bins(population, n_bins: int = 25):
    """Equal-frequency binning of the coefficient values found at each locus.

    Bin ids are written into ``args`` of the coefficient nodes so that the
    symbol ids used for linkage learning group similar coefficients.
    """
    kinds = np.stack([g.kinds for g in population])
    is_coef = kinds == COEF
    if not is_coef.any():
        return
    values = np.stack([g.values for g in population])
    cut = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    for t, i in zip(*np.nonzero(is_coef.any(axis=0))):
        rows = np.flatnonzero(is_coef[:, t, i])
        vals = values[rows, t, i]
        edges = np.quantile(vals, cut) if n_bins > 1 else np.empty(0)
        bins = np.searchsorted(edges, vals, side="right")
        for r, b in zip(rows, bins):
            population[r].args[t, i] = b


# -- fitness -----------------------------------------------------------------

class Problem:
    """Training data, the current batch and the evaluation counter."""

    def __init__(self, dataset: Dataset, config: RunConfig):
        if dataset.X.shape[0] == 0 or dataset.n_features == 0:
            raise DataError("dataset needs at least one row and one feature")
        if dataset.train.size == 0:
            raise DataError("dataset has no training rows")
        self.config = config
        self.cols = np.ascontiguousarray(dataset.X_train.T)
        self.y = dataset.y_train.copy()
        self.var_y = float(np.var(self.y))
        if self.var_y == 0:
            raise DataError("training targets are constant; R^2 is undefined")
        self.n_train = self.y.size
        self.linear_scaling = config.linear_scaling
        self.evaluations = 0
        self.full_evaluations = 0
        self.batch = None
        self.batch_cols = self.cols
        self.batch_y = self.y

    @property
    def batch_is_full(self) -> bool:
        return self.batch is None

    def new_batch(self, rng) -> bool:
        """Draw this generation's batch.  Returns True if it differs from the
        full training split (fitness must then be recomputed)."""
        if self.n_train <= self.config.max_batch:
            return False
        self.batch = np.sort(rng.choice(self.n_train, self.config.max_batch, replace=False))
        self.batch_cols = np.ascontiguousarray(self.cols[:, self.batch])
        self.batch_y = self.y[self.batch]
        return True

    def _score(self, g: MultiTreeGenotype, cols, y):
        pred = _kernels.evaluate(g.kinds, g.args, g.values, g.depth, _depths_array(g.depth),
                                 cols)
        mse, a, b = _kernels.score(pred, y, self.linear_scaling)
        return float(mse), (float(a), float(b))

    def batch_error(self, g: MultiTreeGenotype) -> tuple[float, tuple]:
        self.evaluations += 1
        return self._score(g, self.batch_cols, self.batch_y)

    def r2_from_batch(self, mse: float, scale) -> Optional[tuple[float, tuple]]:
        if not self.batch_is_full:
            return None
        if not np.isfinite(mse):
            return -np.inf, scale
        return 1.0 - mse / self.var_y, scale

    def full_r2(self, g: MultiTreeGenotype) -> tuple[float, tuple]:
        """R^2 and scaling on the full training split."""
        if self.batch_is_full:
            mse, scale = g.fitness.training_error, g.fitness.scale
        else:
            self.full_evaluations += 1
            mse, scale = self._score(g, self.cols, self.y)
        if not np.isfinite(mse):
            return -np.inf, scale
        return 1.0 - mse / self.var_y, scale

    def assess(self, g: MultiTreeGenotype) -> float:
        """Evaluate ``g`` on the batch and store the result in its record."""
        mse, scale = self.batch_error(g)
        g.fitness = FitnessRecord(mse, -np.inf, scale)
        return mse


def fitness(genotype: MultiTreeGenotype, dataset: Dataset, batch=None,
            config: Optional[RunConfig] = None) -> FitnessRecord:
    """Stand-alone fitness: batch MSE plus R^2 on the full training split."""
    config = config or RunConfig()
    problem = Problem(dataset, config)
    if batch is not None:
        batch = np.asarray(batch)
        if batch.size > config.max_batch:
            raise ValueError(f"batch of {batch.size} rows exceeds max_batch")
        problem.batch = batch
        problem.batch_cols = np.ascontiguousarray(problem.cols[:, batch])
        problem.batch_y = problem.y[batch]
    mse, scale = problem.batch_error(genotype)
    genotype.fitness = FitnessRecord(mse, -np.inf, scale)
    r2, full_scale = problem.full_r2(genotype)
    return FitnessRecord(mse, r2, full_scale)


def offer_to_archive(g: MultiTreeGenotype, problem: Problem, archive: ParetoArchive) -> bool:
    r2, scale = problem.full_r2(g)
    g.fitness.r2 = r2
    if not np.isfinite(r2):
        return False
    stats = usage_stats(g)
    snapshot = g.copy()
    snapshot.fitness = FitnessRecord(g.fitness.training_error, r2, scale)
    return archive.try_insert(stats.nodes_deduplicated, r2, snapshot,
                              {"nodes_expanded": stats.nodes_expanded,
                               "nodes": stats.nodes_total})


# -- variation ----------------------------------------------------------------

@dataclass
class MixingStats:
    evaluated: int = 0
    accepted: int = 0
    identical: int = 0
    intron_only: int = 0
    coefficient_evaluations: int = 0
    trace: Optional[list] = None  # (old_error, new_error, accepted) per evaluated swap

    def merge(self, other: "MixingStats"):
        for name in ("evaluated", "accepted", "identical", "intron_only",
                     "coefficient_evaluations"):
            setattr(self, name, getattr(self, name) + getattr(other, name))


class PackedFos:
    """A flattened FOS as flat arrays: subset ``e`` lives in tree ``tree[e]``
    and covers ``loci[start[e]:start[e + 1]]``."""

    def __init__(self, fos):
        self.subsets = list(fos)
        self.tree = np.array([t for t, _ in fos], dtype=np.int64)
        lengths = [len(loci) for _, loci in fos]
        self.start = np.zeros(len(fos) + 1, dtype=np.int64)
        np.cumsum(lengths, out=self.start[1:])
        self.loci = (np.concatenate([np.asarray(l, dtype=np.int64) for _, l in fos])
                     if fos else np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.subsets)

    def __getitem__(self, e):
        return self.subsets[e]


def stack_population(population):
    """(kinds, args, values) arrays of shape (population, n_trees, n_nodes)."""
    return (np.stack([g.kinds for g in population]),
            np.stack([g.args for g in population]),
            np.stack([g.values for g in population]))


class _Workspace:
    """Snapshot and trace buffers handed to the compiled mixing pass."""

    def __init__(self, n_trees, n_nodes, n_subsets):
        cap = 2 * n_subsets + 2
        self.kinds = np.zeros((cap, n_trees, n_nodes), dtype=np.int8)
        self.args = np.zeros((cap, n_trees, n_nodes), dtype=np.int32)
        self.values = np.zeros((cap, n_trees, n_nodes))
        self.fit = np.zeros((cap, 3))
        self.trace = np.zeros((max(n_subsets, 1), 3))
        self.stats = np.zeros(7, dtype=np.int64)

    def fits(self, n_trees, n_nodes, n_subsets):
        return self.kinds.shape[0] >= 2 * n_subsets + 2 and \
            self.kinds.shape[1:] == (n_trees, n_nodes)


def _replay_snapshots(ws: _Workspace, count: int, depth: int, problem: Problem,
                      archive: Optional[ParetoArchive]):
    """Offer every strict improvement recorded by the compiled pass."""
    if archive is None:
        return
    for s in range(count):
        g = MultiTreeGenotype(ws.kinds[s].copy(), ws.args[s].copy(), ws.values[s].copy(),
                              depth)
        mse, a, b = ws.fit[s]
        g.fitness = FitnessRecord(float(mse), -np.inf, (float(a), float(b)))
        offer_to_archive(g, problem, archive)


def _absorb(stats: Optional[MixingStats], ws: _Workspace, problem: Problem):
    st = ws.stats
    problem.evaluations += int(st[0] + st[4])
    if stats is None:
        return
    stats.evaluated += int(st[0])
    stats.accepted += int(st[1])
    stats.identical += int(st[2])
    stats.intron_only += int(st[3])
    stats.coefficient_evaluations += int(st[4])
    if stats.trace is not None:
        stats.trace.extend((float(o), float(n), bool(a)) for o, n, a in ws.trace[: st[6]])


def coefficient_mutation(g: MultiTreeGenotype, step_size: float, problem: Problem, rng,
                         archive: Optional[ParetoArchive] = None,
                         rate: float = 1.0) -> bool:
    """Perturb coefficients in place; keep all changes only if the batch error
    strictly improves.  Returns True when the mutation was kept."""
    ws = _Workspace(g.n_trees, g.n_nodes, 0)
    fit = np.array([g.fitness.training_error, *g.fitness.scale])
    _kernels.coefficient_mutation(g.kinds, g.args, g.values, fit, g.depth,
                                  _depths_array(g.depth), problem.batch_cols, problem.batch_y,
                                  problem.linear_scaling, step_size, rate,
                                  int(rng.integers(2 ** 32)), ws.kinds, ws.args, ws.values,
                                  ws.fit, ws.stats)
    problem.evaluations += int(ws.stats[4])
    kept = bool(ws.stats[5])
    g.invalidate()  # intron coefficients may have moved even if nothing was kept
    if kept:
        g.fitness = FitnessRecord(float(fit[0]), -np.inf, (float(fit[1]), float(fit[2])))
        _replay_snapshots(ws, 1, g.depth, problem, archive)
    return kept


def gom(individual: MultiTreeGenotype, pool, fos, rng, archive: Optional[ParetoArchive],
        problem: Problem, config: RunConfig, step_size: float,
        stats: Optional[MixingStats] = None, workspace: Optional[_Workspace] = None
        ) -> MultiTreeGenotype:
    """Gene-pool optimal mixing of one individual.

    ``pool`` is the parent population (a list of genotypes, or the arrays
    from :func:`stack_population`); donors are drawn from it uniformly, once
    per subset.  Returns the offspring; ``individual`` is not modified.
    """
    if isinstance(pool, (list, tuple)) and pool and isinstance(pool[0], MultiTreeGenotype):
        pool = stack_population(pool)
    if not isinstance(fos, PackedFos):
        fos = PackedFos(fos)
    n_subsets = len(fos)
    ws = workspace
    if ws is None or not ws.fits(individual.n_trees, individual.n_nodes, n_subsets):
        ws = _Workspace(individual.n_trees, individual.n_nodes, n_subsets)
    ws.stats[:] = 0
    off = individual.copy()
    order = rng.permutation(n_subsets).astype(np.int64)
    donors = rng.integers(pool[0].shape[0], size=n_subsets).astype(np.int64)
    seed = int(rng.integers(2 ** 32))
    mutate = config.use_coefficients and config.coeff_mutation_rate > 0
    fit = np.array([individual.fitness.training_error, *individual.fitness.scale])
    _kernels.gom_pass(off.kinds, off.args, off.values, fit, pool[0], pool[1], pool[2],
                      fos.tree, fos.start, fos.loci, order, donors, problem.batch_cols,
                      problem.batch_y, off.depth, _depths_array(off.depth),
                      problem.linear_scaling, mutate, config.coeff_mutation_per_pass,
                      step_size, config.coeff_mutation_rate, seed, ws.kinds, ws.args,
                      ws.values, ws.fit, ws.trace, ws.stats)
    off.invalidate()
    off.fitness = FitnessRecord(float(fit[0]), -np.inf, (float(fit[1]), float(fit[2])))
    _absorb(stats, ws, problem)
    _replay_snapshots(ws, int(ws.stats[5]), off.depth, problem, archive)
    return off


# -- the generational loop ---------------------------------------------------

@dataclass
class RunResult:
    population: list
    archive: ParetoArchive
    log: list
    generations: int
    evaluations: int
    stop_reason: str
    elapsed_seconds: float
    config: RunConfig
    fos_size: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def elite(self):
        return self.archive.best()


_CLOCKS = {"wall": time.perf_counter, "cpu": time.process_time}


class _Clock:
    def __init__(self, budget, kind="wall"):
        self.now = _CLOCKS[kind]
        self.start = self.now()
        self.budget = budget

    @property
    def elapsed(self):
        return self.now() - self.start

    def expired(self):
        return self.budget is not None and self.elapsed >= self.budget


def population_elite(population):
    return min(population, key=lambda g: g.fitness.training_error)


def _log_entry(generation, population, problem, archive, step, clock, gen_evals, stats=None):
    errors = np.array([g.fitness.training_error for g in population])
    finite = errors[np.isfinite(errors)]
    elite = population_elite(population)
    us = usage_stats(elite)
    best = archive.best()
    entry = {
        "generation": generation,
        "best_mse": float(errors.min()),
        "mean_mse": float(finite.mean()) if finite.size else float("inf"),
        "best_r2": float(best.r2) if best is not None else float("-inf"),
        "evaluations": problem.evaluations,
        "evaluations_generation": gen_evals,
        "nodes": us.nodes_total,
        "nodes_expanded": us.nodes_expanded,
        "nodes_deduplicated": us.nodes_deduplicated,
        "step_size": step,
        "archive_size": len(archive),
    }
    if stats is not None:
        entry.update(swaps_evaluated=stats.evaluated, swaps_accepted=stats.accepted,
                     swaps_identical=stats.identical, swaps_intron_only=stats.intron_only,
                     coefficient_evaluations=stats.coefficient_evaluations)
    entry["elapsed_seconds"] = clock.elapsed
    return entry


def _check_dataset(dataset: Dataset):
    if dataset.X.shape[0] == 0 or dataset.X.shape[1] == 0:
        raise DataError("dataset needs at least one row and one feature")


def run(config: RunConfig, dataset: Dataset, callback: Optional[Callable] = None,
        trace: bool = False, initial_population=None,
        linkage_hook: Optional[Callable] = None) -> RunResult:
    """Run Modular GP-GOMEA until the time or generation budget runs out, the
    archive stagnates, or the best R^2 reaches ``config.r2_stop``.

    ``callback(entry, population)`` is called after every generation and
    ``linkage_hook(generation, mi_matrices, fos)`` after every model build.
    """
    config.validate()
    _check_dataset(dataset)
    clock = _Clock(config.time_budget, config.budget_clock)
    rng = np.random.default_rng(config.seed)
    problem = Problem(dataset, config)
    archive = ParetoArchive(config.archive_capacity)
    problem.new_batch(rng)

    population, bias = initialize_population(config, dataset, rng)
    if initial_population is not None:
        population = [g.copy() for g in initial_population]
        if len(population) != config.population_size:
            raise ValueError("initial population does not match population_size")
    for g in population:
        problem.assess(g)
        offer_to_archive(g, problem, archive)

    fos_size = 0
    generation, step, stagnant = 0, config.coeff_step_init, 0
    history = []
    stop = None
    while stop is None:
        if clock.expired():
            stop = "time"
            break
        if config.max_generations is not None and generation >= config.max_generations:
            stop = "generations"
            break
        generation += 1
        archive.stamp = generation
        insertions = archive.insertions
        evals_before = problem.evaluations
        if problem.new_batch(rng):
            for g in population:
                problem.assess(g)

        assign_coefficient_bins(population, config.n_coefficient_bins)
        ids = np.stack([g.symbol_ids() for g in population])
        mis = [] if linkage_hook is not None else None
        fos = PackedFos(learn_fos(ids, bias, rng, mis))
        if linkage_hook is not None:
            linkage_hook(generation, mis, fos.subsets)
        fos_size = len(fos)
        pool = stack_population(population)
        workspace = _Workspace(config.n_trees, template_size(config.tree_depth), fos_size)

        stats = MixingStats(trace=[] if trace else None)
        offspring = []
        for parent in population:
            if clock.expired():
                stop = "time"
                offspring.append(parent)
                continue
            offspring.append(gom(parent, pool, fos, rng, archive, problem,
                                 config, step, stats, workspace))
        population = offspring

        if archive.insertions != insertions:
            stagnant = 0
        else:
            stagnant += 1
            if stagnant % config.step_decay_patience == 0:
                step /= config.step_decay_factor
        entry = _log_entry(generation, population, problem, archive, step, clock,
                           problem.evaluations - evals_before, stats)
        if trace:
            entry["trace"] = stats.trace
        history.append(entry)
        log.debug("generation %d: best mse %.6g, best r2 %.6g", generation,
                  entry["best_mse"], entry["best_r2"])
        if callback is not None:
            callback(entry, population)
        if stop is not None:
            break
        if entry["best_r2"] >= config.r2_stop:
            stop = "r2"
        elif stagnant >= config.stagnation_patience:
            stop = "stagnation"

    return RunResult(population, archive, history, generation, problem.evaluations,
                     stop, clock.elapsed, config, fos_size)
