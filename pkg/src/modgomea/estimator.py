"""scikit-learn style wrappers around the GOMEA and GP engines."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .expression import evaluate, to_infix, usage_stats
from .gomea import DEFAULT_OPERATORS, RunConfig, run
from .gp import GpConfig, gp_run


class _TemplateRegressor(RegressorMixin, BaseEstimator):
    _config_class = RunConfig

    def __init__(self, n_trees=4, tree_depth=4, population_size=1024, time_budget=None,
                 max_generations=None, use_coefficients=True, linear_scaling=False,
                 subexpr_terminal_policy="full", max_batch=2048, operators=DEFAULT_OPERATORS,
                 stagnation_patience=100, random_state=0):
        self.n_trees = n_trees
        self.tree_depth = tree_depth
        self.population_size = population_size
        self.time_budget = time_budget
        self.max_generations = max_generations
        self.use_coefficients = use_coefficients
        self.linear_scaling = linear_scaling
        self.subexpr_terminal_policy = subexpr_terminal_policy
        self.max_batch = max_batch
        self.operators = operators
        self.stagnation_patience = stagnation_patience
        self.random_state = random_state

    def _config(self):
        seed = self.random_state
        if seed is None:
            seed = int(np.random.default_rng().integers(2 ** 31))
        elif isinstance(seed, np.random.Generator):
            seed = int(seed.integers(2 ** 31))
        return self._config_class(
            n_trees=self.n_trees, tree_depth=self.tree_depth,
            population_size=self.population_size, seed=int(seed),
            operators=tuple(self.operators), use_coefficients=self.use_coefficients,
            linear_scaling=self.linear_scaling,
            subexpr_terminal_policy=self.subexpr_terminal_policy,
            max_batch=self.max_batch, time_budget=self.time_budget,
            max_generations=self.max_generations,
            stagnation_patience=self.stagnation_patience).validate()

    def _run(self, config, dataset):
        return run(config, dataset)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if self.time_budget is None and self.max_generations is None \
                and self.stagnation_patience is None:
            raise ValueError("set time_budget, max_generations or stagnation_patience")
        dataset = Dataset.from_arrays(X, y)
        result = self._run(self._config(), dataset)
        best = result.archive.best()
        if best is None:
            raise RuntimeError("no finite model was found")
        self.result_ = result
        self.archive_ = result.archive
        self.log_ = result.log
        self.genotype_ = best.genotype
        self.scale_ = best.genotype.fitness.scale
        self.expression_ = to_infix(best.genotype)
        self.usage_ = usage_stats(best.genotype)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "genotype_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        a, b = self.scale_
        return a + b * evaluate(self.genotype_, X)

    def front(self):
        """Archive trade-off front as (size, train R^2, expression) rows."""
        check_is_fitted(self, "archive_")
        return self.archive_.front(lambda e: to_infix(e.genotype))


class ModularGPGOMEARegressor(_TemplateRegressor):
    """Multi-tree GP-GOMEA regressor.

    The fitted model is the archive entry with the highest training R^2;
    ``expression_`` holds its infix text with subexpression definitions.
    """


class TemplateGPRegressor(_TemplateRegressor):
    """Template-constrained GP baseline on the same representation."""

    _config_class = GpConfig

    def _run(self, config, dataset):
        return gp_run(config, dataset)
