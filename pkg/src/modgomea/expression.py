"""Multi-tree expression templates.

A genotype is a vector of ``n`` full binary tree templates of equal depth,
each stored as a pre-order array of node symbols.  Only the last tree is the
output; tree ``i`` may call any tree ``j < i`` through a two-argument call
node, and trees other than tree 0 and the output may read the caller's
arguments through argument nodes.

Symbols are stored as three parallel arrays of shape ``(n_trees, n_nodes)``:

* ``kinds``  -- one of the ``ADD .. ARG`` codes below
* ``args``   -- feature index, callee tree index, argument index, or the
  coefficient bin id, depending on the kind
* ``values`` -- coefficient values (ignored for other kinds)
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels

ADD, SUB, MUL, DIV, SIN, COS, LOG, SQRT, FEAT, COEF, CALL, ARG = range(12)

BINARY_OPS = (ADD, SUB, MUL, DIV)
UNARY_OPS = (SIN, COS, LOG, SQRT)
OPERATORS = BINARY_OPS + UNARY_OPS
TERMINAL_KINDS = (FEAT, COEF, ARG)

OP_NAMES = {ADD: "+", SUB: "-", MUL: "*", DIV: "/",
            SIN: "sin", COS: "cos", LOG: "log", SQRT: "sqrt"}
_NAME_TO_OP = {v: k for k, v in OP_NAMES.items()}

# kinds * 2**20 + args gives a categorical id per symbol; coefficients are
# identified by their bin.
SYMBOL_ID_STRIDE = 1 << 20


class GenotypeError(ValueError):
    """Raised for genotypes that violate the template constraints."""


class Symbol(NamedTuple):
    kind: int
    index: int = 0
    value: float = 0.0

    @property
    def is_terminal(self) -> bool:
        return self.kind in TERMINAL_KINDS

    def __str__(self):
        return format_symbol(self.kind, self.index, self.value)


def template_size(depth: int) -> int:
    if depth < 0:
        raise ValueError(f"depth must be non-negative, got {depth}")
    return (1 << (depth + 1)) - 1


def preorder_children(index: int, node_depth: int,
                      template_depth: int) -> Optional[tuple[int, int]]:
    """Return ``(left, right)`` child indices, or None for a leaf slot."""
    size = template_size(template_depth)
    if not 0 <= index < size:
        raise IndexError(f"node index {index} outside template of {size} nodes")
    if not 0 <= node_depth <= template_depth:
        raise IndexError(f"node depth {node_depth} outside template depth {template_depth}")
    if node_depth == template_depth:
        return None
    return index + 1, index + (1 << (template_depth - node_depth))


@lru_cache(maxsize=None)
def _depths_tuple(depth: int) -> tuple[int, ...]:
    out = []

    def walk(d):
        out.append(d)
        if d < depth:
            walk(d + 1)
            walk(d + 1)

    walk(0)
    return tuple(out)


@lru_cache(maxsize=None)
def _depths_array(depth: int) -> np.ndarray:
    return np.array(_depths_tuple(depth), dtype=np.int64)


def node_depths(depth: int) -> np.ndarray:
    """Depth of every slot of a template, in pre-order."""
    return _depths_array(depth).copy()


def subtree_slice(index: int, node_depth: int, template_depth: int) -> slice:
    """Pre-order slots covered by the subtree rooted at ``index``."""
    return slice(index, index + template_size(template_depth - node_depth))


def format_symbol(kind: int, index: int = 0, value: float = 0.0) -> str:
    if kind in OP_NAMES:
        return OP_NAMES[kind]
    if kind == FEAT:
        return f"x{index}"
    if kind == COEF:
        return f"c{format_number(value)}"
    if kind == CALL:
        return f"f{index}"
    if kind == ARG:
        return f"a{index}"
    raise GenotypeError(f"unknown symbol kind {kind}")


def parse_symbol(token: str) -> Symbol:
    if token in _NAME_TO_OP:
        return Symbol(_NAME_TO_OP[token])
    head, rest = token[:1], token[1:]
    try:
        if head == "x":
            return Symbol(FEAT, int(rest))
        if head == "c":
            return Symbol(COEF, 0, float(rest))
        if head == "f":
            return Symbol(CALL, int(rest))
        if head == "a":
            return Symbol(ARG, int(rest))
    except ValueError:
        pass
    raise GenotypeError(f"cannot parse symbol {token!r}")


def format_number(value: float) -> str:
    text = repr(float(value))
    return text[:-2] if text.endswith(".0") else text


@dataclass
class FitnessRecord:
    """Fitness of one genotype.

    ``training_error`` is the selection fitness (batch MSE); ``r2`` is
    measured on the full training split.  ``scale`` holds the linear scaling
    ``(intercept, slope)`` fitted on the full training split.
    """
    training_error: float = np.inf
    r2: float = -np.inf
    scale: tuple[float, float] = (0.0, 1.0)


class MultiTreeGenotype:
    """A vector of equally deep pre-order tree templates.

    Construct through :meth:`from_symbols` or :func:`loads` to get the full
    legality check; the array constructor only checks shapes.
    """

    __slots__ = ("kinds", "args", "values", "depth", "fitness", "_mask")

    def __init__(self, kinds, args, values=None, depth=None, fitness=None):
        self.kinds = np.asarray(kinds, dtype=np.int8)
        self.args = np.asarray(args, dtype=np.int32)
        if self.kinds.ndim != 2 or self.kinds.shape != self.args.shape:
            raise GenotypeError("kinds and args must be equal-shaped 2-d arrays")
        self.values = (np.zeros(self.kinds.shape) if values is None
                       else np.asarray(values, dtype=np.float64))
        if self.values.shape != self.kinds.shape:
            raise GenotypeError("values must match kinds in shape")
        n_nodes = self.kinds.shape[1]
        if depth is None:
            depth = n_nodes.bit_length() - 1
        if template_size(depth) != n_nodes:
            raise GenotypeError(f"{n_nodes} nodes is not a full binary template")
        self.depth = depth
        self.fitness = fitness if fitness is not None else FitnessRecord()
        self._mask = None

    @classmethod
    def from_symbols(cls, trees, n_features: Optional[int] = None):
        """Build from nested lists of :class:`Symbol` (or symbol strings)."""
        if not trees:
            raise GenotypeError("a genotype needs at least one tree")
        n_nodes = len(trees[0])
        kinds = np.zeros((len(trees), n_nodes), dtype=np.int8)
        args = np.zeros((len(trees), n_nodes), dtype=np.int32)
        values = np.zeros((len(trees), n_nodes))
        for t, tree in enumerate(trees):
            if len(tree) != n_nodes:
                raise GenotypeError("all trees must have the same template size")
            for i, sym in enumerate(tree):
                if isinstance(sym, str):
                    sym = parse_symbol(sym)
                kinds[t, i], args[t, i], values[t, i] = sym.kind, sym.index, sym.value
        g = cls(kinds, args, values)
        g.validate(n_features)
        return g

    @property
    def n_trees(self) -> int:
        return self.kinds.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.kinds.shape[1]

    def symbol(self, tree: int, index: int) -> Symbol:
        return Symbol(int(self.kinds[tree, index]), int(self.args[tree, index]),
                      float(self.values[tree, index]))

    def copy(self) -> "MultiTreeGenotype":
        g = MultiTreeGenotype.__new__(MultiTreeGenotype)
        g.kinds = self.kinds.copy()
        g.args = self.args.copy()
        g.values = self.values.copy()
        g.depth = self.depth
        g.fitness = FitnessRecord(self.fitness.training_error, self.fitness.r2,
                                  self.fitness.scale)
        g._mask = self._mask
        return g

    def invalidate(self):
        self._mask = None

    @property
    def structure(self) -> "Structure":
        if self._mask is None:
            self._mask = analyse(self)
        return self._mask

    def symbol_ids(self) -> np.ndarray:
        return self.kinds.astype(np.int64) * SYMBOL_ID_STRIDE + self.args

    def validate(self, n_features: Optional[int] = None):
        leaf = node_depths(self.depth) == self.depth
        n = self.n_trees
        for t in range(n):
            for i in range(self.n_nodes):
                k, a = int(self.kinds[t, i]), int(self.args[t, i])
                if k not in OP_NAMES and k not in (FEAT, COEF, CALL, ARG):
                    raise GenotypeError(f"tree {t} node {i}: unknown kind {k}")
                if leaf[i] and k not in TERMINAL_KINDS:
                    raise GenotypeError(f"tree {t} node {i}: leaf slot holds a function")
                if k == CALL and not 0 <= a < t:
                    raise GenotypeError(
                        f"tree {t} node {i}: call to tree {a} breaks acyclicity")
                if k == ARG:
                    if not 0 <= a <= 1:
                        raise GenotypeError(f"tree {t} node {i}: argument index {a}")
                    if t == 0 or t == n - 1:
                        raise GenotypeError(
                            f"tree {t} node {i}: argument nodes are not allowed here")
                if k == FEAT and (a < 0 or (n_features is not None and a >= n_features)):
                    raise GenotypeError(f"tree {t} node {i}: feature x{a} out of range")
                if k == COEF and not np.isfinite(self.values[t, i]):
                    raise GenotypeError(f"tree {t} node {i}: non-finite coefficient")

    def __eq__(self, other):
        if not isinstance(other, MultiTreeGenotype):
            return NotImplemented
        return (np.array_equal(self.kinds, other.kinds)
                and np.array_equal(self.args, other.args)
                and np.array_equal(self.values, other.values))

    __hash__ = None

    def __repr__(self):
        return f"MultiTreeGenotype(n_trees={self.n_trees}, depth={self.depth})"


class Structure(NamedTuple):
    """Connectivity of a genotype, computed by :func:`analyse`."""
    mask: np.ndarray          # (n_trees, n_nodes) active nodes
    active_trees: np.ndarray  # (n_trees,) bool
    uses_args: tuple          # per tree: frozenset of argument indices read
    calls: tuple              # per tree: callee index per active call node
    linear_size: tuple        # per tree: (own, per-arg0, per-arg1) inlined size


def analyse(g: MultiTreeGenotype) -> Structure:
    # Activity inside a tree depends only on the tree's own symbols and on
    # which argument slots its callees read, so trees can be processed in
    # index order without expanding any call.
    n, size, depth = g.n_trees, g.n_nodes, g.depth
    kinds, args = g.kinds.tolist(), g.args.tolist()
    depths = _depths_tuple(depth)
    local = np.zeros((n, size), dtype=bool)
    uses, calls, lin = [], [], []
    for t in range(n):
        kt, at, lt = kinds[t], args[t], local[t]
        used, callees = set(), []

        def visit(i):
            lt[i] = True
            k = kt[i]
            if (k >= FEAT and k != CALL) or depths[i] == depth:
                if k == ARG:
                    used.add(at[i])
                    return (0, 1, 0) if at[i] == 0 else (0, 0, 1)
                return (1, 0, 0)
            if k < SIN:
                left = visit(i + 1)
                right = visit(i + (1 << (depth - depths[i])))
                return (1 + left[0] + right[0], left[1] + right[1], left[2] + right[2])
            if k < FEAT:
                left = visit(i + 1)
                return (1 + left[0], left[1], left[2])
            m = at[i]
            callees.append(m)
            c0, ca, cb = lin[m]
            out = [c0, 0, 0]
            for slot, coef, child in ((0, ca, i + 1), (1, cb, i + (1 << (depth - depths[i])))):
                if slot in uses[m]:
                    sub = visit(child)
                    out = [out[0] + coef * sub[0], out[1] + coef * sub[1],
                           out[2] + coef * sub[2]]
            return tuple(out)

        lin.append(visit(0))
        uses.append(frozenset(used))
        calls.append(tuple(callees))
    active = np.zeros(n, dtype=bool)
    active[n - 1] = True
    for t in range(n - 1, -1, -1):
        if active[t]:
            for m in calls[t]:
                active[m] = True
    mask = local & active[:, None]
    return Structure(mask, active, tuple(uses), tuple(calls), tuple(lin))


def active_mask(g: MultiTreeGenotype) -> np.ndarray:
    return g.structure.mask


# -- evaluation -------------------------------------------------------------

def evaluate(g: MultiTreeGenotype, X) -> np.ndarray:
    """Output-tree value for every row of ``X`` (rows x features).

    Division is unprotected and ``log``/``sqrt`` act on absolute values, so
    non-finite outputs are possible and returned unchanged.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2-d array")
    return evaluate_columns(g, np.ascontiguousarray(X.T))


def evaluate_columns(g: MultiTreeGenotype, cols: np.ndarray) -> np.ndarray:
    """Like :func:`evaluate` but takes the transposed feature matrix."""
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    return _kernels.evaluate(g.kinds, g.args, g.values, g.depth, _depths_array(g.depth), cols)


# -- inlined expressions ----------------------------------------------------
#
# An inlined expression is a nested tuple: (op_kind, child[, child]) for
# operators, ("x", k) for features and ("c", value) for coefficients.

def inline(g: MultiTreeGenotype):
    """Expand every call so that the result contains only the output tree's
    operators, features and coefficients."""
    st = g.structure
    kinds, args, values = g.kinds.tolist(), g.args.tolist(), g.values.tolist()
    depth = g.depth
    depths = _depths_tuple(depth)

    def node(t, i, a0, a1):
        k = kinds[t][i]
        if k == FEAT:
            return ("x", args[t][i])
        if k == COEF:
            return ("c", values[t][i])
        if k == ARG:
            return a0 if args[t][i] == 0 else a1
        if k < SIN:
            return (k, node(t, i + 1, a0, a1),
                    node(t, i + (1 << (depth - depths[i])), a0, a1))
        if k < FEAT:
            return (k, node(t, i + 1, a0, a1))
        m = args[t][i]
        used = st.uses_args[m]
        b0 = node(t, i + 1, a0, a1) if 0 in used else None
        b1 = node(t, i + (1 << (depth - depths[i])), a0, a1) if 1 in used else None
        return node(m, 0, b0, b1)

    return node(g.n_trees - 1, 0, None, None)


def expression_program(expr):
    """Register program for an inlined expression, in the layout used by the
    compiled interpreter: (ops, first operand, second operand, constants,
    output register)."""
    ops, a, b, v = [], [], [], []

    def emit(op, x=0, y=0, c=0.0):
        ops.append(op)
        a.append(x)
        b.append(y)
        v.append(c)
        return len(ops) - 1

    def node(e):
        head = e[0]
        if head == "x":
            return emit(FEAT, e[1])
        if head == "c":
            return emit(COEF, 0, 0, e[1])
        if head < SIN:
            left = node(e[1])
            return emit(head, left, node(e[2]))
        return emit(head, node(e[1]))

    out = node(expr)
    return (np.array(ops, dtype=np.int64), np.array(a, dtype=np.int64),
            np.array(b, dtype=np.int64), np.array(v, dtype=np.float64), out)


def evaluate_expression(expr, X) -> np.ndarray:
    cols = np.ascontiguousarray(np.asarray(X, dtype=np.float64).T)
    return _kernels.run_program(*expression_program(expr), cols)


def expression_size(expr) -> int:
    if expr[0] in ("x", "c"):
        return 1
    return 1 + sum(expression_size(child) for child in expr[1:])


def expression_to_infix(expr) -> str:
    def node(e):
        head = e[0]
        if head == "x":
            return f"x{e[1]}", False
        if head == "c":
            return format_number(e[1]), False
        if head < SIN:
            return f"({node(e[1])[0]} {OP_NAMES[head]} {node(e[2])[0]})", True
        return _unary_text(head, _bare(node(e[1]))), False

    return _bare(node(expr))


def _bare(item):
    text, wrapped = item
    return text[1:-1] if wrapped else text


def _unary_text(k, inner):
    if k in (LOG, SQRT):
        return f"{OP_NAMES[k]}(abs({inner}))"
    return f"{OP_NAMES[k]}({inner})"


# -- statistics --------------------------------------------------------------

@dataclass(frozen=True)
class UsageStats:
    subexpressions_used: int
    subexpressions_reused: int
    reused_as_function: int
    nodes_total: int
    nodes_expanded: int
    nodes_deduplicated: int


def reference_counts(g: MultiTreeGenotype) -> np.ndarray:
    """Occurrences of active call nodes per callee tree."""
    st = g.structure
    counts = np.zeros(g.n_trees, dtype=np.int64)
    for t in range(g.n_trees):
        if st.active_trees[t]:
            for m in st.calls[t]:
                counts[m] += 1
    return counts


def usage_stats(g: MultiTreeGenotype) -> UsageStats:
    st = g.structure
    refs = reference_counts(g)
    n = g.n_trees
    used = int(st.active_trees[: n - 1].sum())
    reused = [t for t in range(n - 1) if refs[t] >= 2]
    as_function = sum(1 for t in reused if st.uses_args[t])
    expanded = st.linear_size[n - 1][0]
    duplicated = sum((refs[t] - 1) * st.linear_size[t][0] for t in reused)
    return UsageStats(
        subexpressions_used=used,
        subexpressions_reused=len(reused),
        reused_as_function=as_function,
        nodes_total=int(st.mask.sum()),
        nodes_expanded=int(expanded),
        nodes_deduplicated=int(expanded - duplicated),
    )


# -- text formats ------------------------------------------------------------

def to_infix(g: MultiTreeGenotype, inline_calls: bool = False) -> str:
    """Readable form of the genotype.

    With ``inline_calls=False`` the first line is the output expression with
    ``f<j>(...)`` calls, followed by one ``f<j>(a0, a1) = ...`` line per used
    tree.  With ``inline_calls=True`` a single fully expanded line is returned.
    """
    if inline_calls:
        return expression_to_infix(inline(g))
    st = g.structure
    kinds, args, values = g.kinds.tolist(), g.args.tolist(), g.values.tolist()
    depth = g.depth
    depths = _depths_tuple(depth)

    def node(t, i):
        k = kinds[t][i]
        if k == FEAT:
            return f"x{args[t][i]}", False
        if k == COEF:
            return format_number(values[t][i]), False
        if k == ARG:
            return f"a{args[t][i]}", False
        right = i + (1 << (depth - depths[i]))
        if k < SIN:
            return f"({node(t, i + 1)[0]} {OP_NAMES[k]} {node(t, right)[0]})", True
        if k < FEAT:
            return _unary_text(k, _bare(node(t, i + 1))), False
        m = args[t][i]
        if not st.uses_args[m]:
            return f"f{m}", False
        return f"f{m}({_bare(node(t, i + 1))}, {_bare(node(t, right))})", False

    lines = [_bare(node(g.n_trees - 1, 0))]
    for t in range(g.n_trees - 1):
        if st.active_trees[t]:
            params = "(a0, a1)" if st.uses_args[t] else ""
            lines.append(f"f{t}{params} = {_bare(node(t, 0))}")
    return "\n".join(lines)


def dumps(g: MultiTreeGenotype) -> str:
    """One line per tree, pre-order symbols separated by spaces."""
    lines = []
    for t in range(g.n_trees):
        lines.append(" ".join(
            format_symbol(int(k), int(a), float(v))
            for k, a, v in zip(g.kinds[t], g.args[t], g.values[t])))
    return "\n".join(lines) + "\n"


def loads(text: str, n_features: Optional[int] = None) -> MultiTreeGenotype:
    trees = [line.split() for line in text.splitlines() if line.strip()]
    return MultiTreeGenotype.from_symbols(
        [[parse_symbol(tok) for tok in tree] for tree in trees], n_features)
