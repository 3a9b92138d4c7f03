"""Brute-force references: exhaustive tree enumeration and finite differences.

Everything here is deliberately naive and shares no code with the chart
kernels it is used to check.
"""

from __future__ import annotations

import math
from functools import lru_cache
from itertools import product

import numpy as np

MAX_N = 12


def catalan(k: int) -> int:
    return math.comb(2 * k, k) // (k + 1)


@lru_cache(maxsize=None)
def _trees(i: int, j: int) -> tuple[tuple[tuple[int, int], ...], ...]:
    if i == j:
        return (((i, i),),)
    out = []
    for r in range(i, j):
        for left in _trees(i, r):
            for right in _trees(r + 1, j):
                out.append(((i, j),) + left + right)
    return tuple(out)


def enumerate_trees(n: int, max_n: int = MAX_N) -> list[list[tuple[int, int]]]:
    """All binary bracketings of ``n`` words, ordered by root split first.

    The order puts lower split points first at every node, so the first
    maximizer in this list is the one CKY's lowest-split tie-break returns.
    """
    if not 1 <= n <= max_n:
        raise ValueError(f"enumeration supports 1 <= n <= {max_n}, got {n}")
    return [list(t) for t in _trees(0, n - 1)]


def _score(scores, tree) -> float:
    total = 0.0
    for i, j in tree:
        if j > i:
            total += float(scores[i, j])
    return total


def _lse(values) -> float:
    m = max(values)
    return m + math.log(sum(math.exp(v - m) for v in values))


def brute_logZ(scores, n: int) -> float:
    return _lse([_score(scores, t) for t in enumerate_trees(n)])


def brute_marginals(scores, n: int) -> np.ndarray:
    trees = enumerate_trees(n)
    values = [_score(scores, t) for t in trees]
    logZ = _lse(values)
    out = np.zeros((n, n))
    for tree, v in zip(trees, values):
        p = math.exp(v - logZ)
        for i, j in tree:
            out[i, j] += p
    return out


def brute_argmax(scores, n: int, tol: float = 1e-12):
    """Best tree and its score; near-ties resolve to the earliest enumerated tree."""
    trees = enumerate_trees(n)
    values = [_score(scores, t) for t in trees]
    best = max(values)
    for tree, v in zip(trees, values):
        if v >= best - tol:
            return sorted(tree), best
    raise AssertionError("unreachable")


def brute_hinge(scores, gold, n: int, margin: float = 1.0) -> float:
    """max over trees of (score + margin * #spans not in gold) - gold score, clamped at 0."""
    gold = set(gold)
    best = max(_score(scores, t) + margin * sum(1 for i, j in t if j > i and (i, j) not in gold)
               for t in enumerate_trees(n))
    return max(0.0, best - _score(scores, gold))


def brute_labeled_logZ(label_scores, n: int) -> float:
    """Log-partition over (bracketing, labeling of every width>=2 span) pairs."""
    label_scores = np.asarray(label_scores)
    n_labels = label_scores.shape[-1]
    values = []
    for tree in enumerate_trees(n):
        wide = [(i, j) for i, j in tree if j > i]
        for labels in product(range(n_labels), repeat=len(wide)):
            values.append(sum(float(label_scores[i, j, l]) for (i, j), l in zip(wide, labels)))
    return _lse(values)


def finite_diff(fn, point, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = fn(x)
        flat[k] = orig - step
        lo = fn(x)
        flat[k] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise ValueError(f"non-finite function value at coordinate {k}")
        g[k] = (hi - lo) / (2 * step)
    return grad
