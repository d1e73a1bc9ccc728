"""Datasets, synthetic benchmarks and regression metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .expression import MultiTreeGenotype, evaluate, template_size

PRIMES = (2, 3, 5, 7, 11, 13, 17, 19)
SYNTHETIC_FEATURES = {1: 8, 2: 8, 3: 5, 4: 4, 5: 3}
VERIFICATION_SEED_OFFSET = 1_000_003


class DataError(ValueError):
    pass


class UndefinedR2Error(ValueError):
    """R^2 is undefined because the targets have zero variance."""


@dataclass(frozen=True)
class SyntheticSpec:
    id: int
    seed: int = 0
    n_samples: int = 1000

    def __post_init__(self):
        if self.id not in SYNTHETIC_FEATURES:
            raise DataError(f"unknown synthetic expression id {self.id}; expected 1..5")

    @property
    def n_features(self) -> int:
        return SYNTHETIC_FEATURES[self.id]


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list
    train: np.ndarray
    test: np.ndarray
    ground_truth: Optional[SyntheticSpec] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise DataError("X must be 2-d with one row per target value")
        if np.isnan(self.X).any() or np.isnan(self.y).any():
            raise DataError("datasets may not contain missing values")
        if np.intersect1d(self.train, self.test).size:
            raise DataError("train and test rows overlap")

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def X_train(self):
        return self.X[self.train]

    @property
    def y_train(self):
        return self.y[self.train]

    @property
    def X_test(self):
        return self.X[self.test]

    @property
    def y_test(self):
        return self.y[self.test]

    @classmethod
    def from_arrays(cls, X, y, split_fraction=1.0, seed=0, feature_names=None, **kw):
        X = np.asarray(X, dtype=np.float64)
        train, test = split_rows(X.shape[0], split_fraction, seed)
        names = list(feature_names) if feature_names is not None else \
            [f"x{i}" for i in range(X.shape[1])]
        return cls(X, y, names, train, test, **kw)


def split_rows(n_rows: int, train_fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < train_fraction <= 1.0:
        raise DataError(f"train fraction must be in (0, 1], got {train_fraction}")
    order = np.random.default_rng(seed).permutation(n_rows)
    n_train = n_rows if train_fraction == 1.0 else int(round(train_fraction * n_rows))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


# -- synthetic ground truths -------------------------------------------------

def _layout(node, height):
    """Pre-order symbols of a nested ``(symbol, child[, child])`` expression
    laid out on a template of the given height; unused slots get ``x0``."""
    size = template_size(height)
    if isinstance(node, str):
        return [node] + ["x0"] * (size - 1)
    sym, *children = node
    out = [sym]
    for child in children:
        out += _layout(child, height - 1)
    if len(children) == 1:
        out += ["x0"] * template_size(height - 1)
    return out


def _balanced_sum(terms):
    if len(terms) == 1:
        return terms[0]
    half = (len(terms) + 1) // 2
    return ("+", _balanced_sum(terms[:half]), _balanced_sum(terms[half:]))


def ground_truth_genotype(expr_id: int, n_trees: int = 4, depth: int = 4) -> MultiTreeGenotype:
    """Hand-built genotype computing synthetic expression ``expr_id``.

    Only the 4-tree, depth-4 layout is provided.  Trees 1 and 2 hold the
    reusable functions; tree 0 is an unused filler.
    """
    if (n_trees, depth) != (4, 4):
        raise ValueError("ground-truth genotypes are defined for 4 trees of depth 4")
    filler = "x0"
    if expr_id == 1:
        f1 = ("sin", ("+", "a0", "a1"))
        out = _balanced_sum([("f1", f"x{i}", "x0") for i in range(1, 8)])
        trees = [filler, f1, filler, out]
    elif expr_id == 2:
        f1 = ("sin", ("*", "a0", "a1"))
        out = _balanced_sum([("f1", "x2", "x3")] + [("f1", f"x{i}", "x0") for i in range(1, 8)])
        trees = [filler, f1, filler, out]
    elif expr_id == 3:
        f1 = ("sqrt", ("sin", ("*", "a0", "a1")))
        out = _balanced_sum([("f1", f"x{i}", "x0") for i in range(1, 5)])
        trees = [filler, f1, filler, out]
    elif expr_id == 4:
        f1 = ("sin", ("+", "a0", "a1"))
        f2 = ("cos", ("*", "a0", "a1"))
        out = ("+", ("f1", ("f2", "x0", "x1"), ("f2", "x2", "x3")),
               ("f2", ("f1", "x0", "x1"), ("f1", "x2", "x3")))
        trees = [filler, f1, f2, out]
    elif expr_id == 5:
        # cos(a * sin(b / c)) split into two-argument pieces
        f1 = ("sin", ("/", "a0", "a1"))
        f2 = ("cos", ("*", "a0", "a1"))
        out = _balanced_sum([("f2", f"x{a}", ("f1", f"x{b}", f"x{c}"))
                             for a, b, c in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0))])
        trees = [filler, f1, f2, out]
    else:
        raise DataError(f"unknown synthetic expression id {expr_id}")
    return MultiTreeGenotype.from_symbols([_layout(t, depth) for t in trees],
                                          SYNTHETIC_FEATURES[expr_id])


def synthetic_features(spec: SyntheticSpec, n_samples=None, seed=None) -> np.ndarray:
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n = spec.n_samples if n_samples is None else n_samples
    scale = np.array(PRIMES[: spec.n_features], dtype=np.float64)
    return rng.random((n, spec.n_features)) * scale


def generate_synthetic(spec: SyntheticSpec, split_fraction: float = 1.0) -> Dataset:
    X = synthetic_features(spec)
    y = evaluate(ground_truth_genotype(spec.id), X)
    meta = {"synthetic_id": spec.id, "seed": spec.seed}
    if spec.id == 1:
        meta["note"] = "sum over i=1..7: the published index range reaches x8, " \
                       "which has no defined feature"
    train, test = split_rows(len(y), split_fraction, spec.seed)
    return Dataset(X, y, [f"x{i}" for i in range(spec.n_features)], train, test,
                   ground_truth=spec, meta=meta)


def write_csv(dataset: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(dataset.n_features)] + ["y"])
        for row, target in zip(dataset.X, dataset.y):
            w.writerow([repr(float(v)) for v in row] + [repr(float(target))])


def load_csv(path, target_column=None, split_fraction: float = 0.75, seed: int = 0) -> Dataset:
    """Read a header + numeric rows CSV.  The target defaults to the last
    column."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if target_column is None:
            target_idx = len(header) - 1
        elif target_column in header:
            target_idx = header.index(target_column)
        else:
            raise DataError(f"{path}: target column {target_column!r} not found")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(raw)} fields, "
                                f"expected {len(header)}")
            vals = []
            for col, cell in zip(header, raw):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column {col!r}: "
                                    f"non-numeric value {cell!r}") from None
                if math.isnan(v):
                    raise DataError(f"{path}: row {lineno}, column {col!r}: missing value")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.array(rows)
    y = table[:, target_idx]
    X = np.delete(table, target_idx, axis=1)
    names = [h for i, h in enumerate(header) if i != target_idx]
    train, test = split_rows(len(y), split_fraction, seed)
    return Dataset(X, y, names, train, test, meta={"source": str(path)})


# -- metrics -----------------------------------------------------------------

def r_squared(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape or y.size == 0:
        raise ValueError("predictions and targets need equal, non-zero lengths")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise UndefinedR2Error("R^2 undefined for constant targets")
    return float(1.0 - np.sum((y - p) ** 2) / ss_tot)


def linear_scaling_fit(predictions, targets) -> tuple[float, float]:
    """Least-squares ``(a, b)`` for ``targets ~ a + b * predictions``."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape or y.size < 2:
        raise ValueError("linear scaling needs two equal-length vectors of length >= 2")
    pm, ym = p.mean(), y.mean()
    dp = p - pm
    var = np.dot(dp, dp)
    if var == 0 or not np.isfinite(var):
        return float(ym), 0.0
    b = np.dot(dp, y - ym) / var
    return float(ym - b * pm), float(b)


def recovery_check(genotype: MultiTreeGenotype, spec: SyntheticSpec, scale=None,
                   n_samples: int = 10_000, tol: float = 1e-9) -> bool:
    """Whether ``genotype`` reproduces the ground truth of ``spec`` on a fresh
    verification sample.  If the model is used with a linear scaling
    ``(a, b)``, pass it as ``scale``; it must be the identity within 1e-6."""
    if scale is not None:
        a, b = scale
        if abs(a) > 1e-6 or abs(b - 1.0) > 1e-6:
            return False
    X = synthetic_features(spec, n_samples=n_samples, seed=spec.seed + VERIFICATION_SEED_OFFSET)
    truth = evaluate(ground_truth_genotype(spec.id), X)
    pred = evaluate(genotype, X)
    if scale is not None:
        pred = scale[0] + scale[1] * pred
    if not np.all(np.isfinite(pred)):
        return False
    return r_squared(pred, truth) >= 1.0 - tol
