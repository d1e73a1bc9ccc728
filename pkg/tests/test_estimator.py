import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from modgomea import ModularGPGOMEARegressor, TemplateGPRegressor
from modgomea.expression import evaluate


def data(n=80, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, size=(n, 3))
    return X, X[:, 0] * X[:, 1] + 2.0


def test_fit_predict():
    X, y = data()
    est = ModularGPGOMEARegressor(n_trees=2, tree_depth=2, population_size=256,
                                  max_generations=10, random_state=1).fit(X, y)
    assert est.score(X, y) > 0.99
    assert est.predict(X).shape == (80,)
    assert est.n_features_in_ == 3
    assert est.expression_ and est.usage_.nodes_total >= 1
    rows = est.front()
    assert rows and rows[-1][1] == pytest.approx(est.result_.archive.best().r2)


def test_linear_scaling_in_predictions():
    X, y = data()
    est = ModularGPGOMEARegressor(n_trees=1, tree_depth=2, population_size=32,
                                  max_generations=3, linear_scaling=True,
                                  use_coefficients=False, random_state=0).fit(X, 10 * y + 5)
    a, b = est.scale_
    np.testing.assert_allclose(est.predict(X), a + b * evaluate(est.genotype_, X))


def test_gp_estimator():
    X, y = data()
    est = TemplateGPRegressor(n_trees=2, tree_depth=2, population_size=32,
                              max_generations=3, random_state=0).fit(X, y)
    assert np.isfinite(est.predict(X)).all()


def test_reproducible_and_clonable():
    X, y = data()
    est = ModularGPGOMEARegressor(n_trees=2, tree_depth=2, population_size=16,
                                  max_generations=2, random_state=3)
    a = est.fit(X, y).predict(X)
    b = clone(est).fit(X, y).predict(X)
    assert np.array_equal(a, b)
    assert clone(est).get_params()["population_size"] == 16


def test_errors():
    X, y = data()
    with pytest.raises(NotFittedError):
        ModularGPGOMEARegressor().predict(X)
    with pytest.raises(ValueError):
        ModularGPGOMEARegressor(max_generations=None, stagnation_patience=None).fit(X, y)
    est = ModularGPGOMEARegressor(n_trees=1, tree_depth=1, population_size=8,
                                  max_generations=1).fit(X, y)
    with pytest.raises(ValueError):
        est.predict(X[:, :2])
