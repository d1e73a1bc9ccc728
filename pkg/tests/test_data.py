import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from modgomea.data import (DataError, Dataset, SyntheticSpec, UndefinedR2Error,
                           generate_synthetic, ground_truth_genotype, linear_scaling_fit,
                           load_csv, r_squared, recovery_check, split_rows, synthetic_features,
                           write_csv)
from modgomea.expression import MultiTreeGenotype, dumps, evaluate, loads


def formula(expr_id, X):
    """The benchmark expressions written out directly with numpy."""
    x = X.T
    if expr_id == 1:
        return sum(np.sin(x[i] + x[0]) for i in range(1, 8))
    if expr_id == 2:
        return np.sin(x[2] * x[3]) + sum(np.sin(x[i] * x[0]) for i in range(1, 8))
    if expr_id == 3:
        return sum(np.sqrt(np.abs(np.sin(x[i] * x[0]))) for i in range(1, 5))
    if expr_id == 4:
        f0 = lambda a, b: np.sin(a + b)
        f1 = lambda a, b: np.cos(a * b)
        return f0(f1(x[0], x[1]), f1(x[2], x[3])) + f1(f0(x[0], x[1]), f0(x[2], x[3]))
    f = lambda a, b, c: np.cos(a * np.sin(b / c))
    return f(x[0], x[1], x[2]) + f(x[0], x[2], x[1]) + f(x[1], x[0], x[2]) + f(x[1], x[2], x[0])


@pytest.mark.parametrize("expr_id", [1, 2, 3, 4, 5])
def test_generator_matches_formula(expr_id):
    d = generate_synthetic(SyntheticSpec(expr_id, seed=3))
    assert d.X.shape == (1000, SyntheticSpec(expr_id).n_features)
    np.testing.assert_allclose(d.y, formula(expr_id, d.X), rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("expr_id", [1, 2, 3, 4, 5])
def test_generator_deterministic(expr_id):
    a = generate_synthetic(SyntheticSpec(expr_id, seed=9))
    b = generate_synthetic(SyntheticSpec(expr_id, seed=9))
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    c = generate_synthetic(SyntheticSpec(expr_id, seed=10))
    assert not np.array_equal(a.X, c.X)


def test_feature_counts_and_ranges():
    assert [SyntheticSpec(i).n_features for i in range(1, 6)] == [8, 8, 5, 4, 3]
    X = synthetic_features(SyntheticSpec(1), n_samples=20_000)
    primes = np.array([2, 3, 5, 7, 11, 13, 17, 19])
    assert np.all(X >= 0) and np.all(X <= primes)
    assert np.all(X.max(axis=0) > 0.99 * primes)


def test_expression_one_at_zero():
    g = ground_truth_genotype(1)
    assert evaluate(g, np.zeros((1, 8)))[0] == 0.0


def test_expression_four_at_zero():
    value = evaluate(ground_truth_genotype(4), np.zeros((1, 4)))[0]
    assert value == pytest.approx(math.sin(2.0) + 1.0, abs=1e-15)
    assert round(value, 5) == 1.90930


def test_expression_one_note():
    assert "x8" in generate_synthetic(SyntheticSpec(1)).meta["note"]


def test_invalid_synthetic_id():
    with pytest.raises(DataError):
        SyntheticSpec(6)


def test_ground_truth_only_for_four_by_four():
    with pytest.raises(ValueError):
        ground_truth_genotype(2, n_trees=1, depth=7)


# -- metrics ------------------------------------------------------------------------

def test_r2_examples():
    y = np.array([1.0, 2.0, 3.0])
    assert r_squared(y, y) == 1.0
    assert r_squared(np.full(3, 2.0), y) == 0.0
    assert r_squared(np.array([1.0, 2.0, 4.0]), y) == 0.5


def test_r2_errors():
    with pytest.raises(UndefinedR2Error):
        r_squared(np.ones(3), np.ones(3))
    with pytest.raises(ValueError):
        r_squared(np.ones(2), np.ones(3))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(-100, 100)), st.randoms())
def test_r2_permutation_invariant(p, r):
    y = np.linspace(-3, 7, 20) ** 2
    order = list(range(20))
    r.shuffle(order)
    assert r_squared(p[order], y[order]) == pytest.approx(r_squared(p, y), rel=1e-12, abs=1e-12)


def test_scaling_examples():
    y = np.array([1.0, 4.0, 2.0, 8.0])
    assert linear_scaling_fit(y, y) == (pytest.approx(0.0, abs=1e-15), pytest.approx(1.0))
    a, b = linear_scaling_fit(y, 3.0 + 2.0 * y)
    assert a == pytest.approx(3.0, abs=1e-12) and b == pytest.approx(2.0, abs=1e-12)
    assert linear_scaling_fit(np.full(4, 7.0), y) == (pytest.approx(y.mean()), 0.0)


def test_scaling_needs_two_points():
    with pytest.raises(ValueError):
        linear_scaling_fit(np.ones(1), np.ones(1))


# -- recovery --------------------------------------------------------------------

@pytest.mark.parametrize("expr_id", [2, 3, 4, 5])
def test_ground_truth_recovers(expr_id):
    spec = SyntheticSpec(expr_id, seed=0)
    g = ground_truth_genotype(expr_id)
    d = generate_synthetic(spec)
    assert r_squared(evaluate(g, d.X), d.y) == 1.0
    assert recovery_check(g, spec)
    assert recovery_check(g, spec, scale=(0.0, 1.0))


def test_flipped_operator_not_recovered():
    text = dumps(ground_truth_genotype(2)).splitlines()
    assert text[1].startswith("sin")
    text[1] = "cos" + text[1][3:]
    g = loads("\n".join(text), 8)
    assert not recovery_check(g, SyntheticSpec(2))


def test_constant_not_recovered():
    g = MultiTreeGenotype.from_symbols([["c0"]], 8)
    assert not recovery_check(g, SyntheticSpec(1))


def test_recovery_rejects_real_scaling():
    g = ground_truth_genotype(2)
    assert not recovery_check(g, SyntheticSpec(2), scale=(0.5, 1.0))


def test_recovery_non_finite_fails():
    g = MultiTreeGenotype.from_symbols([["/", "x0", "c0"]], 3)
    assert not recovery_check(g, SyntheticSpec(5))


# -- CSV ---------------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    d = generate_synthetic(SyntheticSpec(4, seed=2))
    path = tmp_path / "d.csv"
    write_csv(d, path)
    back = load_csv(path, split_fraction=1.0)
    assert np.array_equal(back.X, d.X) and np.array_equal(back.y, d.y)
    assert back.feature_names == ["x0", "x1", "x2", "x3"]


def test_csv_three_rows_all_train(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("a,b,y\n1,2,3\n4,5,6\n7,8,10\n")
    d = load_csv(path, split_fraction=1.0)
    assert d.train.tolist() == [0, 1, 2] and d.test.size == 0


def test_csv_target_column(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("a,y,b\n1,2,3\n4,5,6\n")
    d = load_csv(path, "y", split_fraction=1.0)
    assert d.y.tolist() == [2.0, 5.0] and d.feature_names == ["a", "b"]


@pytest.mark.parametrize("body,message", [
    ("a,y\n", "no data rows"),
    ("", "empty file"),
    ("a,y\n1,2\n3\n", "row 3"),
    ("a,y\n1,2\n3,x\n", "column 'y'"),
    ("a,y\n1,nan\n", "missing value"),
])
def test_csv_errors(tmp_path, body, message):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(DataError, match=message):
        load_csv(path)


def test_csv_missing_target(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("a,y\n1,2\n")
    with pytest.raises(DataError, match="'z' not found"):
        load_csv(path, "z")


def test_csv_missing_file(tmp_path):
    with pytest.raises(DataError, match="nope.csv"):
        load_csv(tmp_path / "nope.csv")


def test_airfoil_shape(tmp_path):
    rng = np.random.default_rng(0)
    table = rng.normal(size=(1503, 6))
    path = tmp_path / "airfoil.csv"
    np.savetxt(path, table, delimiter=",", header="f,a,c,v,t,y", comments="")
    d = load_csv(path, split_fraction=0.75)
    assert d.X.shape == (1503, 5)
    assert d.train.size + d.test.size == 1503 and d.train.size == 1127


# -- splits and datasets -------------------------------------------------------------

def test_split_disjoint_and_seeded():
    a = split_rows(100, 0.75, 1)
    b = split_rows(100, 0.75, 1)
    assert np.array_equal(a[0], b[0])
    assert np.intersect1d(*a).size == 0 and a[0].size + a[1].size == 100
    with pytest.raises(DataError):
        split_rows(10, 0.0, 1)


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset.from_arrays(np.array([[np.nan]]), np.array([1.0]))
    with pytest.raises(DataError):
        Dataset.from_arrays(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 1)), np.zeros(3), ["x0"], np.array([0, 1]), np.array([1, 2]))
