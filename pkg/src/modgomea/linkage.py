"""Linkage learning: mutual information between template loci and the
linkage-tree family of subsets (FOS) built from it by average linkage."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MiMatrix:
    matrix: np.ndarray   # (l, l), natural-log units
    entropy: np.ndarray  # (l,)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def _entropy_from_counts(counts: np.ndarray, total: int) -> np.ndarray:
    p = counts / total
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def estimate_mi(columns) -> MiMatrix:
    """Plug-in mutual information between every pair of columns.

    ``columns`` is a (population, loci) array of categorical symbol ids.
    """
    data = np.asarray(columns)
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] == 0:
        raise ValueError("estimate_mi needs a non-empty (population, loci) array")
    if data.shape[0] < 2:
        raise ValueError("estimate_mi needs at least two individuals")
    pop, n_loci = data.shape
    dense = np.empty(data.shape, dtype=np.int64)
    n_cats = 1
    for j in range(n_loci):
        _, inv = np.unique(data[:, j], return_inverse=True)
        dense[:, j] = inv.ravel()
        n_cats = max(n_cats, int(inv.max()) + 1)

    marg = np.zeros((n_loci, n_cats))
    for j in range(n_loci):
        marg[j] = np.bincount(dense[:, j], minlength=n_cats)
    h = _entropy_from_counts(marg, pop)

    joint_h = np.empty((n_loci, n_loci))
    block = n_cats * n_cats
    offsets = np.arange(n_loci, dtype=np.int64) * block
    for i in range(n_loci):
        codes = dense[:, i:i + 1] * n_cats + dense + offsets
        counts = np.bincount(codes.ravel(), minlength=n_loci * block)
        joint_h[i] = _entropy_from_counts(counts.reshape(n_loci, block), pop)

    mi = h[:, None] + h[None, :] - joint_h
    mi = 0.5 * (mi + mi.T)
    np.maximum(mi, 0.0, out=mi)  # float noise only; exact MI is >= 0
    np.fill_diagonal(mi, h)
    return MiMatrix(mi, h)


def subtract_bias(current: MiMatrix, initial: MiMatrix) -> MiMatrix:
    if current.matrix.shape != initial.matrix.shape:
        raise ValueError(
            f"MI size mismatch: {current.matrix.shape} vs {initial.matrix.shape}")
    return MiMatrix(np.maximum(current.matrix - initial.matrix, 0.0),
                    current.entropy.copy())


def build_linkage_tree(mi: MiMatrix, include_root: bool, rng) -> list[np.ndarray]:
    """UPGMA over MI similarity.

    Returns the singletons followed by every merged cluster in merge order;
    the final all-loci cluster is dropped when ``include_root`` is false.
    Ties between equally similar pairs are broken uniformly with ``rng``.
    """
    n = mi.size
    subsets = [np.array([i]) for i in range(n)]
    if n == 1:
        return subsets if include_root else []

    sim = np.array(mi.matrix, dtype=np.float64, copy=True)
    np.fill_diagonal(sim, -np.inf)
    members = list(subsets)
    sizes = np.ones(n)
    alive = np.ones(n, dtype=bool)
    iu = np.triu_indices(n, k=1)
    for _ in range(n - 1):
        upper = sim[iu]
        best = upper.max()
        ties = np.flatnonzero(upper == best)
        pick = ties[rng.integers(len(ties))] if len(ties) > 1 else ties[0]
        a, b = iu[0][pick], iu[1][pick]

        merged = np.sort(np.concatenate([members[a], members[b]]))
        subsets.append(merged)
        members[a] = merged
        na, nb = sizes[a], sizes[b]
        row = (na * sim[a] + nb * sim[b]) / (na + nb)
        row[~alive] = -np.inf
        sim[a, :] = row
        sim[:, a] = row
        sim[a, a] = -np.inf
        sim[b, :] = -np.inf
        sim[:, b] = -np.inf
        sizes[a] = na + nb
        alive[b] = False

    if not include_root:
        subsets.pop()
    return subsets


def flatten_foses(per_tree) -> list[tuple[int, np.ndarray]]:
    """Concatenate per-tree FOSes, tagging each subset with its tree index."""
    return [(t, subset) for t, fos in enumerate(per_tree) for subset in fos]


def learn_fos(symbol_ids: np.ndarray, bias, rng, mi_out=None) -> list[tuple[int, np.ndarray]]:
    """Per-tree linkage trees over a population, contracted into one FOS.

    ``symbol_ids`` has shape (population, n_trees, n_nodes); ``bias`` holds the
    initial-population MI matrix per tree (or None to skip subtraction).
    Only the output tree loses its all-loci subset.  If ``mi_out`` is a
    list, the (bias-corrected) MI matrix of every tree is appended to it.
    """
    n_trees = symbol_ids.shape[1]
    foses = []
    for t in range(n_trees):
        mi = estimate_mi(symbol_ids[:, t, :])
        if bias is not None:
            mi = subtract_bias(mi, bias[t])
        if mi_out is not None:
            mi_out.append(mi)
        foses.append(build_linkage_tree(mi, include_root=t < n_trees - 1, rng=rng))
    return flatten_foses(foses)


def flattened_fos_size(n_trees: int, n_nodes: int) -> int:
    return (n_trees - 1) * (2 * n_nodes - 1) + (2 * n_nodes - 2)
