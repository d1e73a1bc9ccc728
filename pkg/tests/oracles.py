"""Independent reference implementations used to cross-check the package.

They are written directly from the template rules (pre-order layout, call
frames, arguments) without sharing code with the package internals.
"""
import math

import numpy as np

ADD, SUB, MUL, DIV, SIN, COS, LOG, SQRT, FEAT, COEF, CALL, ARG = range(12)


def right_child(i, node_depth, depth):
    return i + 2 ** (depth - node_depth)


def depths_of(depth):
    out = []

    def walk(d):
        out.append(d)
        if d < depth:
            walk(d + 1)
            walk(d + 1)

    walk(0)
    return out


def reads_args(kinds, args, depth, t, memo=None):
    """Set of argument indices tree ``t`` actually reads.  An argument
    subtree of a call only counts if the callee reads that slot."""
    memo = {} if memo is None else memo
    if t in memo:
        return memo[t]
    dep = depths_of(depth)
    found = set()

    def walk(i):
        k = kinds[t][i]
        if k == ARG:
            found.add(int(args[t][i]))
            return
        if k in (FEAT, COEF) or dep[i] == depth:
            return
        if k < SIN:
            walk(i + 1)
            walk(right_child(i, dep[i], depth))
        elif k < FEAT:
            walk(i + 1)
        else:
            callee = reads_args(kinds, args, depth, int(args[t][i]), memo)
            if 0 in callee:
                walk(i + 1)
            if 1 in callee:
                walk(right_child(i, dep[i], depth))

    walk(0)
    memo[t] = found
    return found


def evaluate_rowwise(kinds, args, values, depth, X):
    """Scalar, row-by-row evaluation with eager argument evaluation.  Uses
    numpy scalar semantics so that division by zero gives inf/nan."""
    dep = depths_of(depth)
    n = len(kinds)
    out = np.empty(len(X))
    with np.errstate(all="ignore"):
        for r, row in enumerate(np.asarray(X, dtype=np.float64)):
            def node(t, i, a0, a1):
                k = kinds[t][i]
                if k == FEAT:
                    return np.float64(row[args[t][i]])
                if k == COEF:
                    return np.float64(values[t][i])
                if k == ARG:
                    return a0 if args[t][i] == 0 else a1
                left = node(t, i + 1, a0, a1)
                if SIN <= k <= SQRT:
                    return {SIN: np.sin, COS: np.cos,
                            LOG: lambda v: np.log(np.abs(v)),
                            SQRT: lambda v: np.sqrt(np.abs(v))}[k](left)
                right = node(t, right_child(i, dep[i], depth), a0, a1)
                if k == CALL:
                    return node(int(args[t][i]), 0, left, right)
                return {ADD: np.add, SUB: np.subtract, MUL: np.multiply,
                        DIV: np.divide}[k](left, right)

            out[r] = node(n - 1, 0, np.float64(np.nan), np.float64(np.nan))
    return out


def mse(pred, y):
    pred = np.asarray(pred, dtype=np.float64)
    if not np.all(np.isfinite(pred)):
        return math.inf
    return float(np.mean((np.asarray(y) - pred) ** 2))


def r2(pred, y):
    y = np.asarray(y, dtype=np.float64)
    return 1.0 - np.sum((y - pred) ** 2) / np.sum((y - y.mean()) ** 2)
