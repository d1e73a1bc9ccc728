"""Template-constrained GP on the multi-tree representation.

Each parent produces one offspring by uniform multi-tree crossover, a
per-tree subtree transplant from a second donor and point mutation.  The
next population is chosen by size-4 tournaments over parents and offspring.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .archive import ParetoArchive
from .data import Dataset
from .expression import MultiTreeGenotype, node_depths
from .gomea import (Problem, RunConfig, RunResult, _check_dataset, _Clock, _log_entry,
                    initialize_population, offer_to_archive, symbol_sets)

log = logging.getLogger(__name__)


@dataclass
class GpConfig(RunConfig):
    tournament_size: int = 4
    p_tree_swap: float = 0.5

    def validate(self):
        super().validate()
        if self.tournament_size < 2:
            raise ValueError("tournament_size must be at least 2")
        if self.tournament_size > 2 * self.population_size:
            raise ValueError("tournament larger than parents + offspring")
        if not 0.0 <= self.p_tree_swap <= 1.0:
            raise ValueError("p_tree_swap must lie in [0, 1]")
        return self


def _same_shape(a: MultiTreeGenotype, b: MultiTreeGenotype):
    if a.kinds.shape != b.kinds.shape or a.depth != b.depth:
        raise ValueError(f"genotype shapes differ: {a.kinds.shape} vs {b.kinds.shape}")


def uniform_multitree_crossover(individual: MultiTreeGenotype, donor: MultiTreeGenotype,
                                rng, p_swap: float = 0.5) -> MultiTreeGenotype:
    """Replace each whole tree by the donor's with probability ``p_swap``."""
    _same_shape(individual, donor)
    child = individual.copy()
    swap = rng.random(child.n_trees) < p_swap
    child.kinds[swap] = donor.kinds[swap]
    child.args[swap] = donor.args[swap]
    child.values[swap] = donor.values[swap]
    child.invalidate()
    return child


def _region_map(src: int, src_height: int, dst: int, dst_height: int, out: list):
    """Pair up slots of a subtree of height ``src_height`` with the slots at
    the same positions of a region of height ``dst_height >= src_height``."""
    out.append((src, dst))
    if src_height == 0:
        return
    _region_map(src + 1, src_height - 1, dst + 1, dst_height - 1, out)
    _region_map(src + (1 << src_height), src_height - 1,
                dst + (1 << dst_height), dst_height - 1, out)


def transplant_pairs(donor_slot: int, target_slot: int, depth: int) -> list[tuple[int, int]]:
    """(donor index, target index) pairs copied by a transplant."""
    depths = node_depths(depth)
    h_src = depth - int(depths[donor_slot])
    h_dst = depth - int(depths[target_slot])
    if h_src > h_dst:
        raise ValueError("donor subtree does not fit the target region")
    pairs: list = []
    _region_map(donor_slot, h_src, target_slot, h_dst, pairs)
    return pairs


def subtree_transplant(genotype: MultiTreeGenotype, tree: int, donor: MultiTreeGenotype,
                       rng, target_slot: Optional[int] = None,
                       donor_slot: Optional[int] = None) -> MultiTreeGenotype:
    """Copy a random donor subtree into a random slot of ``tree``.

    The donor slot is drawn among slots at the target's depth or deeper so
    the subtree fits.  Region slots not covered by the donor subtree keep
    their old symbols (they are introns below the copied leaves).
    """
    _same_shape(genotype, donor)
    depth = genotype.depth
    depths = node_depths(depth)
    if target_slot is None:
        target_slot = int(rng.integers(genotype.n_nodes))
    if donor_slot is None:
        eligible = np.flatnonzero(depths >= depths[target_slot])
        donor_slot = int(eligible[rng.integers(eligible.size)])
    child = genotype.copy()
    for s, d in transplant_pairs(donor_slot, target_slot, depth):
        child.kinds[tree, d] = donor.kinds[tree, s]
        child.args[tree, d] = donor.args[tree, s]
        child.values[tree, d] = donor.values[tree, s]
    child.invalidate()
    return child


def mutation_mask_size(n_slots: int, z: float) -> int:
    """``1 + sqrt(slots) * |z|`` rounded half up and clamped to [1, slots]."""
    m = math.floor(1.0 + math.sqrt(n_slots) * abs(z) + 0.5)
    return int(min(max(m, 1), n_slots))


def point_mutation(genotype: MultiTreeGenotype, rng, sets, p_terminal: float = 0.5
                   ) -> MultiTreeGenotype:
    """Resample the symbols of a random mask of slots.

    Leaf slots receive terminals; internal slots receive a terminal with
    probability ``p_terminal`` and a function otherwise, always from the
    tree's own legal symbol sets.
    """
    child = genotype.copy()
    n, size = child.kinds.shape
    depths = node_depths(child.depth)
    m = mutation_mask_size(n * size, rng.standard_normal())
    for flat in rng.choice(n * size, m, replace=False):
        t, i = divmod(int(flat), size)
        if depths[i] == child.depth or rng.random() < p_terminal or not sets[t].functions:
            sym = sets[t].terminal(rng)
        else:
            sym = sets[t].function(rng)
        child.kinds[t, i], child.args[t, i], child.values[t, i] = sym
    child.invalidate()
    return child


def tournament(errors: np.ndarray, size: int, rng) -> int:
    """Index of the lowest error among ``size`` distinct random candidates;
    ties go to the earliest drawn."""
    picks = rng.choice(errors.size, size, replace=False)
    return int(picks[np.argmin(errors[picks])])


def make_offspring(parent, population, rng, sets, config: GpConfig) -> MultiTreeGenotype:
    P = len(population)
    child = uniform_multitree_crossover(parent, population[rng.integers(P)], rng,
                                        config.p_tree_swap)
    for t in range(child.n_trees):
        child = subtree_transplant(child, t, population[rng.integers(P)], rng)
    return point_mutation(child, rng, sets, config.p_terminal_grow)


def gp_run(config: GpConfig, dataset: Dataset, callback: Optional[Callable] = None,
           initial_population=None) -> RunResult:
    """Generational template-constrained GP with the same fitness, batching,
    archive, logging and stopping rules as the GOMEA loop."""
    if not isinstance(config, GpConfig):
        config = GpConfig(**config.to_dict())
    config.validate()
    _check_dataset(dataset)
    clock = _Clock(config.time_budget, config.budget_clock)
    rng = np.random.default_rng(config.seed)
    problem = Problem(dataset, config)
    archive = ParetoArchive(config.archive_capacity)
    problem.new_batch(rng)
    y = dataset.y_train
    sets = symbol_sets(config, dataset.n_features, (float(y.min()), float(y.max())))

    population, _ = initialize_population(config, dataset, rng)
    if initial_population is not None:
        population = [g.copy() for g in initial_population]
        if len(population) != config.population_size:
            raise ValueError("initial population does not match population_size")
    for g in population:
        problem.assess(g)
        offer_to_archive(g, problem, archive)

    generation, stagnant = 0, 0
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

        offspring = []
        for parent in population:
            if clock.expired():
                stop = "time"
                break
            child = make_offspring(parent, population, rng, sets, config)
            problem.assess(child)
            offer_to_archive(child, problem, archive)
            offspring.append(child)

        pool = population + offspring
        errors = np.array([g.fitness.training_error for g in pool])
        population = [pool[tournament(errors, config.tournament_size, rng)]
                      for _ in range(config.population_size)]
        population = [g.copy() for g in population]

        if archive.insertions != insertions:
            stagnant = 0
        else:
            stagnant += 1
        entry = _log_entry(generation, population, problem, archive, None, clock,
                           problem.evaluations - evals_before)
        history.append(entry)
        log.debug("gp generation %d: best mse %.6g", generation, entry["best_mse"])
        if callback is not None:
            callback(entry, population)
        if stop is not None:
            break
        if entry["best_r2"] >= config.r2_stop:
            stop = "r2"
        elif stagnant >= config.stagnation_patience:
            stop = "stagnation"

    return RunResult(population, archive, history, generation, problem.evaluations,
                     stop, clock.elapsed, config, 0,
                     {"tournament_refill": "with replacement across tournaments"})
