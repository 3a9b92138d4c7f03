"""Synthetic corpora: a small fixed PCFG and random n-ary trees."""

from __future__ import annotations

import numpy as np

from treecrf.treebank import Tree

LEXICON = {
    "DT": ["the", "a", "this", "every", "some"],
    "NN": ["cat", "dog", "game", "park", "man", "idea", "book", "river", "city", "song"],
    "PRP": ["i", "she", "they", "we"],
    "VB": ["love", "saw", "took", "found", "likes", "wants", "hears"],
    "VI": ["ran", "slept", "left", "smiled"],
    "IN": ["in", "with", "on", "near", "under"],
    "JJ": ["big", "red", "old", "happy", "quiet"],
    "RB": ["really", "very", "quickly", "often", "rarely"],
}

# label -> list of (probability, right-hand side); preterminal categories
# are written in the lexicon and become bare words
GRAMMAR = {
    "S": [(0.55, ["NP", "VP"]), (0.2, ["NP", "VP", "ADVP"]), (0.15, ["ADVP", "NP", "VP"]),
          (0.1, ["VP"])],
    "NP": [(0.35, ["DT", "NN"]), (0.2, ["DT", "ADJP", "NN"]), (0.15, ["NP", "PP"]),
           (0.2, ["PRP"]), (0.1, ["NN"])],
    "VP": [(0.35, ["VB", "NP"]), (0.2, ["VB", "NP", "PP"]), (0.2, ["VI"]),
           (0.15, ["VI", "ADVP"]), (0.1, ["VB", "S"])],
    "PP": [(1.0, ["IN", "NP"])],
    "ADJP": [(0.7, ["JJ"]), (0.3, ["RB", "JJ"])],
    "ADVP": [(1.0, ["RB"])],
}

LABELS = tuple(GRAMMAR)


def _expand(label: str, rng, depth: int, max_depth: int):
    rules = GRAMMAR[label]
    probs = np.array([p for p, _ in rules])
    if depth >= max_depth:
        flat = np.array([0.0 if "S" in rhs or rhs[0] == label else p for p, rhs in rules])
        if flat.sum() > 0:
            probs = flat
    rhs = rules[rng.choice(len(rules), p=probs / probs.sum())][1]
    kids = []
    for sym in rhs:
        if sym in GRAMMAR:
            kids.append(_expand(sym, rng, depth + 1, max_depth))
        else:
            words = LEXICON[sym]
            kids.append(words[rng.integers(len(words))])
    return Tree(label, kids)


def pcfg_corpus(size: int, min_len: int = 4, max_len: int = 10, seed: int = 0,
                max_depth: int = 6) -> list[Tree]:
    """Distinct sentences sampled from the grammar with length in ``[min_len, max_len]``."""
    rng = np.random.default_rng(seed)
    out: list[Tree] = []
    seen: set[tuple[str, ...]] = set()
    while len(out) < size:
        tree = _expand("S", rng, 0, max_depth)
        words = tuple(tree.leaves())
        if min_len <= len(words) <= max_len and words not in seen:
            seen.add(words)
            out.append(tree)
    return out


def random_tree(rng, n: int, labels=("A", "B", "C", "D", "E"), max_arity: int = 5,
                max_unary: int = 3, words=None) -> Tree:
    """A random n-ary tree over ``n`` words with unary chains of up to ``max_unary`` nodes."""
    if words is None:
        words = [f"w{k}" for k in range(n)]

    def chain(node: Tree) -> Tree:
        for _ in range(rng.integers(0, max_unary)):
            node = Tree(labels[rng.integers(len(labels))], [node])
        return node

    def build(lo: int, hi: int, top: bool) -> Tree | str:
        width = hi - lo
        if width == 1 and not top and rng.random() < 0.5:
            return words[lo]
        if width == 1:
            return chain(Tree(labels[rng.integers(len(labels))], [words[lo]]))
        k = int(rng.integers(2, min(max_arity, width) + 1))
        cuts = sorted(rng.choice(np.arange(lo + 1, hi), size=k - 1, replace=False))
        bounds = [lo, *cuts, hi]
        kids = [build(a, b, False) for a, b in zip(bounds, bounds[1:])]
        return chain(Tree(labels[rng.integers(len(labels))], kids))

    return build(0, n, True)
