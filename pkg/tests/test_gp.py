import copy

import numpy as np
import pytest

from conftest import random_genotype
from modgomea.data import SyntheticSpec, generate_synthetic, ground_truth_genotype
from modgomea.expression import (ARG, CALL, COEF, FEAT, MultiTreeGenotype, node_depths,
                                 template_size)
from modgomea.gomea import RunConfig, initialize_population, symbol_sets
from modgomea.gp import (GpConfig, gp_run, make_offspring, mutation_mask_size, point_mutation,
                         subtree_transplant, tournament, transplant_pairs,
                         uniform_multitree_crossover)

TERMINALS = (FEAT, COEF, ARG)


def marked(n_trees, depth, mark):
    """Genotype whose every slot holds feature ``mark`` (easy to trace)."""
    size = template_size(depth)
    return MultiTreeGenotype(np.full((n_trees, size), FEAT, dtype=np.int8),
                             np.full((n_trees, size), mark, dtype=np.int32),
                             np.zeros((n_trees, size)), depth)


# -- crossover ------------------------------------------------------------------

def test_crossover_with_self(rng):
    g = random_genotype(rng)
    assert uniform_multitree_crossover(g, g.copy(), rng) == g


def test_crossover_frequency(rng):
    a, b = marked(4, 2, 0), marked(4, 2, 1)
    swaps = np.zeros(4)
    n = 10_000
    for _ in range(n):
        child = uniform_multitree_crossover(a, b, rng)
        swaps += child.args[:, 0] == 1
        # whole trees move, never blends
        assert all(len(set(row)) == 1 for row in child.args)
    assert np.all(np.abs(swaps / n - 0.5) <= 0.02)


def test_crossover_single_tree(rng):
    a, b = marked(1, 3, 0), marked(1, 3, 1)
    for _ in range(20):
        child = uniform_multitree_crossover(a, b, rng)
        assert child == a or child == b


def test_crossover_shape_mismatch(rng):
    with pytest.raises(ValueError):
        uniform_multitree_crossover(marked(2, 2, 0), marked(3, 2, 1), rng)


# -- subtree transplant --------------------------------------------------------------

def test_transplant_root_to_root(rng):
    g, d = marked(2, 3, 0), marked(2, 3, 1)
    child = subtree_transplant(g, 1, d, rng, target_slot=0, donor_slot=0)
    assert np.all(child.args[1] == 1) and np.all(child.args[0] == 0)


def test_transplant_leaf_target(rng):
    g, d = marked(1, 3, 0), marked(1, 3, 1)
    leaf = int(np.flatnonzero(node_depths(3) == 3)[2])
    for _ in range(10):
        child = subtree_transplant(g, 0, d, rng, target_slot=leaf)
        assert np.flatnonzero(child.args[0] == 1).tolist() == [leaf]


def test_transplant_shallow_donor_into_deep_region(rng):
    # depth-3 template: slot 1 roots a region of height 2 (7 slots); slot 2
    # roots a donor subtree of height 1 (3 slots)
    pairs = transplant_pairs(donor_slot=2, target_slot=1, depth=3)
    assert pairs == [(2, 1), (3, 2), (4, 5)]
    g, d = marked(1, 3, 0), marked(1, 3, 1)
    child = subtree_transplant(g, 0, d, rng, target_slot=1, donor_slot=2)
    region = range(1, 8)
    changed = [i for i in region if child.args[0, i] == 1]
    assert changed == [1, 2, 5]
    assert sum(child.args[0, i] == 0 for i in region) == 4


def test_transplant_donor_must_fit():
    with pytest.raises(ValueError):
        transplant_pairs(donor_slot=0, target_slot=1, depth=3)


def test_transplant_draws_fitting_donor_slots(rng):
    depths = node_depths(4)
    for _ in range(200):
        g, d = random_genotype(rng, depth=4), random_genotype(rng, depth=4)
        target = int(rng.integers(31))
        child = subtree_transplant(g, 2, d, rng, target_slot=target)
        child.validate(3)
        assert np.array_equal(child.kinds[[0, 1, 3]], g.kinds[[0, 1, 3]])
        outside = np.ones(31, dtype=bool)
        outside[target: target + 2 ** (4 - depths[target] + 1) - 1] = False
        assert np.array_equal(child.kinds[2, outside], g.kinds[2, outside])


# -- point mutation ----------------------------------------------------------------

def test_mask_size():
    assert mutation_mask_size(124, 0.0) == 1
    assert mutation_mask_size(124, 1.0) == 12
    assert mutation_mask_size(124, -1.0) == 12
    assert mutation_mask_size(10, 100.0) == 10
    # round half up: 1 + 2 * 0.75 = 2.5
    assert mutation_mask_size(4, 0.75) == 3


def test_point_mutation_legal(rng):
    data = generate_synthetic(SyntheticSpec(2))
    config = RunConfig(n_trees=4, tree_depth=3)
    sets = symbol_sets(config, data.n_features, (-1.0, 1.0))
    leaf = node_depths(3) == 3
    g = random_genotype(rng, n_trees=4, depth=3, n_features=8)
    for _ in range(300):
        child = point_mutation(g, rng, sets)
        child.validate(8)
        assert np.isin(child.kinds[:, leaf], TERMINALS).all()
        assert not np.isin(child.kinds[0], (CALL, ARG)).any()
        g = child


def test_point_mutation_changes_at_most_mask(rng):
    sets = symbol_sets(RunConfig(n_trees=1, tree_depth=4), 3, (0.0, 1.0))
    g = random_genotype(rng, n_trees=1, depth=4, coefficients=False)
    sizes = []
    for _ in range(100):
        m = mutation_mask_size(31, copy.deepcopy(rng).standard_normal())
        child = point_mutation(g, rng, sets)
        changed = (child.kinds != g.kinds) | (child.args != g.args) | (child.values != g.values)
        assert changed.sum() <= m
        sizes.append(m)
    assert max(sizes) > 1


# -- selection -------------------------------------------------------------------

def test_tournament_never_picks_the_worst(rng):
    errors = rng.normal(size=20)
    for _ in range(500):
        picked = tournament(errors, 4, rng)
        assert (errors > errors[picked]).sum() >= 3


def test_tournament_ties(rng):
    winners = {tournament(np.zeros(8), 4, rng) for _ in range(200)}
    assert len(winners) == 8


def test_tournament_candidates_distinct(rng):
    errors = np.array([0.0, 1.0, 1.0, 1.0])
    assert all(tournament(errors, 4, rng) == 0 for _ in range(20))


def test_gp_config_validation():
    with pytest.raises(ValueError):
        GpConfig(tournament_size=1).validate()


# -- the loop --------------------------------------------------------------------

def test_offspring_legal(rng):
    data = generate_synthetic(SyntheticSpec(4))
    config = GpConfig(n_trees=4, tree_depth=3, population_size=30)
    pop, _ = initialize_population(config, data, rng)
    sets = symbol_sets(config, data.n_features, (-1.0, 1.0))
    for parent in pop:
        make_offspring(parent, pop, rng, sets, config).validate(data.n_features)


def test_gp_clones_of_optimum():
    data = generate_synthetic(SyntheticSpec(2))
    config = GpConfig(population_size=8, use_coefficients=False, max_generations=20)
    res = gp_run(config, data, initial_population=[ground_truth_genotype(2)] * 8)
    assert res.stop_reason == "r2" and res.generations == 1


def test_gp_determinism():
    data = generate_synthetic(SyntheticSpec(5, seed=2))
    config = GpConfig(population_size=32, max_generations=3, seed=5)
    a, b = gp_run(config, data), gp_run(config, data)
    strip = lambda log: [{k: v for k, v in e.items() if k != "elapsed_seconds"} for e in log]
    assert strip(a.log) == strip(b.log)
    assert a.extra["tournament_refill"]


def test_gp_improves_on_average():
    data = generate_synthetic(SyntheticSpec(2))
    curves = []
    for seed in range(10):
        config = GpConfig(population_size=64, max_generations=8, seed=seed,
                          use_coefficients=False)
        curves.append([e["best_mse"] for e in gp_run(config, data).log])
    mean = np.mean(curves, axis=0)
    assert np.all(np.diff(mean) <= 0)
