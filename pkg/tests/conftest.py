import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from modgomea.expression import (ADD, ARG, CALL, COEF, COS, DIV, FEAT, LOG, MUL, SIN, SQRT,
                                 SUB, MultiTreeGenotype, node_depths, template_size)

OPS = (ADD, SUB, MUL, DIV, SIN, COS, LOG, SQRT)


def random_symbol(rng, tree, n_trees, n_features, leaf, p_terminal=0.4, coefficients=True,
                  arguments=True):
    """Uniform legal symbol for a slot; used to build arbitrary genotypes."""
    terminals = [(FEAT, k, 0.0) for k in range(n_features)]
    if coefficients:
        terminals.append((COEF, 0, None))
    if arguments and 0 < tree < n_trees - 1:
        terminals += [(ARG, 0, 0.0), (ARG, 1, 0.0)]
    if leaf or rng.random() < p_terminal:
        k, a, v = terminals[rng.integers(len(terminals))]
    else:
        funcs = [(o, 0, 0.0) for o in OPS] + [(CALL, j, 0.0) for j in range(tree)]
        # favour calls so that nested call chains are common
        if tree > 0 and rng.random() < 0.35:
            funcs = [(CALL, j, 0.0) for j in range(tree)]
        k, a, v = funcs[rng.integers(len(funcs))]
    if k == COEF:
        v = float(np.round(rng.uniform(-3, 3), 3))
    return k, a, v


def random_genotype(rng, n_trees=4, depth=3, n_features=3, **kw) -> MultiTreeGenotype:
    size = template_size(depth)
    depths = node_depths(depth)
    kinds = np.zeros((n_trees, size), dtype=np.int8)
    args = np.zeros((n_trees, size), dtype=np.int32)
    values = np.zeros((n_trees, size))
    for t in range(n_trees):
        for i in range(size):
            kinds[t, i], args[t, i], values[t, i] = random_symbol(
                rng, t, n_trees, n_features, depths[i] == depth, **kw)
    g = MultiTreeGenotype(kinds, args, values, depth)
    g.validate(n_features)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_collection_modifyitems(config, items):
    if os.environ.get("MODGOMEA_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="desk-scale experiment; set MODGOMEA_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 13):
        terminalreporter.write_line(results.get(n, f"criterion {n:>2}: SKIP  not run"))
