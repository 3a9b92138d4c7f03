"""Constituency trees and their CNF form, plus EVALB-style scoring.

Trees are plain :class:`Tree` objects whose children are either subtrees or
word strings.  Spans are inclusive word-index pairs ``(i, j)``.  The same
class represents both n-ary trees and their CNF counterparts; use
:func:`is_cnf` to check the binary invariants.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

STAR = "*"
JOIN = "+"

ESCAPES = {"(": "-LRB-", ")": "-RRB-"}
UNESCAPES = {v: k for k, v in ESCAPES.items()}

_BAD_LABEL = re.compile(r"[()\s]")


class TreeError(ValueError):
    """Malformed bracketed text or an invalid tree."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class AlignmentError(ValueError):
    """Gold and predicted trees cover different token sequences."""

    def __init__(self, index: int, message: str = "token sequences differ"):
        super().__init__(f"sentence {index}: {message}")
        self.index = index


class Tree:
    """A labeled tree node; leaves of the tree are word strings."""

    __slots__ = ("label", "children")

    def __init__(self, label: str, children: Sequence["Tree | str"]):
        if _BAD_LABEL.search(label):
            raise TreeError(f"illegal character in label {label!r}")
        if not children:
            raise TreeError(f"empty constituent {label!r}")
        for child in children:
            if isinstance(child, str) and (not child or re.search(r"\s", child)):
                raise TreeError(f"illegal token {child!r}")
        self.label = label
        self.children = list(children)

    def __eq__(self, other):
        if not isinstance(other, Tree):
            return NotImplemented
        return self.label == other.label and self.children == other.children

    def __hash__(self):
        return hash((self.label, tuple(self.children)))

    def __repr__(self):
        return f"Tree({render_bracketed(self)!r})"

    def copy(self) -> "Tree":
        return Tree(self.label, [c.copy() if isinstance(c, Tree) else c for c in self.children])

    def leaves(self) -> list[str]:
        out: list[str] = []
        stack: list[Tree | str] = [self]
        while stack:
            node = stack.pop()
            if isinstance(node, str):
                out.append(node)
            else:
                stack.extend(reversed(node.children))
        return out

    def __len__(self):
        return len(self.leaves())

    def subtrees(self) -> Iterator["Tree"]:
        """Pre-order traversal over internal nodes."""
        stack: list[Tree] = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(c for c in reversed(node.children) if isinstance(c, Tree))

    def constituents(self) -> list[tuple[int, int, str]]:
        """All labeled spans ``(i, j, label)`` in pre-order."""
        out: list[tuple[int, int, str]] = []

        def walk(node: Tree, start: int) -> int:
            slot = len(out)
            out.append((start, start, node.label))
            pos = start
            for child in node.children:
                pos = pos + 1 if isinstance(child, str) else walk(child, pos)
            out[slot] = (start, pos - 1, node.label)
            return pos

        walk(self, 0)
        return out


# ---------------------------------------------------------------------------
# bracketed text


def _tokenize(text: str) -> Iterator[tuple[str, int]]:
    for m in re.finditer(r"\(|\)|[^\s()]+", text):
        yield m.group(), m.start()


def parse_bracketed(text: str, preterminals: bool | str = False) -> Tree:
    """Read one bracketed tree.

    ``preterminals`` controls the POS layer: ``True`` drops every node that
    dominates exactly one word, ``"auto"`` does so only when every word sits
    alone under a non-root node (the usual treebank layout), ``False`` keeps
    the tree as written.  An unlabeled outer bracket around a single tree,
    as in ``( (S ...))``, is removed.
    """
    tokens = list(_tokenize(text))
    if not tokens:
        raise TreeError("empty input", 0)
    stack: list[tuple[str, list, int]] = []
    root = None
    pos = 0
    while pos < len(tokens):
        tok, off = tokens[pos]
        if root is not None:
            raise TreeError("trailing text after tree", off)
        if tok == "(":
            label = ""
            if pos + 1 < len(tokens) and tokens[pos + 1][0] not in "()":
                label = tokens[pos + 1][0]
                pos += 1
            stack.append((label, [], off))
        elif tok == ")":
            if not stack:
                raise TreeError("unbalanced ')'", off)
            label, children, start = stack.pop()
            if not children:
                raise TreeError("empty constituent", start)
            node = Tree(label, children)
            if stack:
                stack[-1][1].append(node)
            else:
                root = node
        else:
            if not stack:
                raise TreeError(f"token {tok!r} outside brackets", off)
            stack[-1][1].append(UNESCAPES.get(tok, tok))
        pos += 1
    if stack:
        raise TreeError("unbalanced '(': input ends inside a constituent", len(text))
    assert root is not None
    if root.label == "" and len(root.children) == 1 and isinstance(root.children[0], Tree):
        root = root.children[0]
    if preterminals == "auto":
        preterminals = has_preterminal_layer(root)
    if preterminals:
        root = drop_preterminals(root)
    return root


def has_preterminal_layer(tree: Tree) -> bool:
    """True when every word is the only child of a non-root node."""
    for node in tree.subtrees():
        words = [c for c in node.children if isinstance(c, str)]
        if words and (node is tree or len(node.children) > 1):
            return False
    return True


def drop_preterminals(tree: Tree) -> Tree:
    def walk(node: Tree) -> Tree | str:
        if len(node.children) == 1 and isinstance(node.children[0], str):
            return node.children[0]
        return Tree(node.label, [walk(c) if isinstance(c, Tree) else c for c in node.children])

    out = walk(tree)
    if isinstance(out, str):
        # a lone preterminal is the whole sentence; keep it as a constituent
        return tree
    return out


def render_bracketed(tree: Tree) -> str:
    parts: list[str] = []

    def walk(node: Tree | str):
        if isinstance(node, str):
            parts.append(ESCAPES.get(node, node))
            return
        parts.append(f"({node.label}")
        for child in node.children:
            parts.append(" ")
            walk(child)
        parts.append(")")

    walk(tree)
    return "".join(parts)


def read_trees(path, preterminals: bool | str = "auto",
               empty_labels: Iterable[str] = ("-NONE-",)) -> list[Tree]:
    """Read a tree file: one bracketed tree per line, blank lines skipped.

    Empty elements are removed before the POS layer is dropped, because the
    empty marker is usually itself a preterminal.
    """
    empty_labels = set(empty_labels)
    trees = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                tree = parse_bracketed(line, preterminals=False)
                if empty_labels:
                    tree = strip_empties(tree, empty_labels)
                if preterminals == "auto":
                    drop = has_preterminal_layer(tree)
                else:
                    drop = bool(preterminals)
                if drop:
                    tree = drop_preterminals(tree)
            except TreeError as e:
                raise TreeError(f"{path}:{lineno}: {e}") from None
            trees.append(tree)
    return trees


def write_trees(path, trees: Iterable[Tree]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for tree in trees:
            f.write(render_bracketed(tree) + "\n")


# ---------------------------------------------------------------------------
# CNF conversion


def collapse_unary(tree: Tree) -> Tree:
    """Join every maximal unary chain of internal nodes into one ``X+Y`` node."""
    labels = [tree.label]
    node = tree
    while len(node.children) == 1 and isinstance(node.children[0], Tree):
        node = node.children[0]
        labels.append(node.label)
    children = [collapse_unary(c) if isinstance(c, Tree) else c for c in node.children]
    return Tree(JOIN.join(labels), children)


def binarize_cnf(tree: Tree, direction: str = "left") -> Tree:
    """Convert an n-ary tree to CNF.

    Unary chains are collapsed first.  A node with k > 2 children is split
    into nested nodes labeled ``label*``; bare words next to siblings get a
    width-1 ``label*`` node of their own, so every word is covered by
    exactly one leaf constituent.
    """
    if direction not in ("left", "right"):
        raise ValueError(f"unknown binarization direction {direction!r}")
    return _binarize(collapse_unary(tree), direction)


def _binarize(node: Tree, direction: str) -> Tree:
    if len(node.children) == 1:
        # a collapsed unary over a word: this is a leaf constituent
        return Tree(node.label, node.children)
    star = node.label + STAR
    kids: list[Tree] = [_binarize(c, direction) if isinstance(c, Tree) else Tree(star, [c])
                        for c in node.children]
    if direction == "left":
        while len(kids) > 2:
            kids = [Tree(star, kids[:2])] + kids[2:]
    else:
        while len(kids) > 2:
            kids = kids[:-2] + [Tree(star, kids[-2:])]
    return Tree(node.label, kids)


def debinarize(tree: Tree) -> Tree:
    """Recover an n-ary tree from a (possibly inconsistent) CNF tree.

    Starred nodes are dissolved into their parent whatever label precedes
    the star; a starred root just loses the marker.  Joined labels are
    expanded back into unary chains.
    """

    def expand(node: Tree) -> list[Tree | str]:
        kids: list[Tree | str] = []
        for child in node.children:
            if isinstance(child, str):
                kids.append(child)
            elif child.label.endswith(STAR):
                kids.extend(expand(child))
            else:
                kids.append(rebuild(child))
        return kids

    def rebuild(node: Tree, label: str | None = None) -> Tree:
        label = node.label if label is None else label
        kids = expand(node)
        parts = label.split(JOIN)
        out = Tree(parts[-1], kids)
        for part in reversed(parts[:-1]):
            out = Tree(part, [out])
        return out

    return rebuild(tree, tree.label.rstrip(STAR) or tree.label)


def is_cnf(tree: Tree) -> bool:
    """Every node is either binary over subtrees or a leaf over one word."""
    for node in tree.subtrees():
        if len(node.children) == 1:
            if not isinstance(node.children[0], str):
                return False
        elif len(node.children) != 2 or not all(isinstance(c, Tree) for c in node.children):
            return False
    return True


def build_cnf_tree(words: Sequence[str], spans: Iterable[tuple[int, int]],
                   labels: dict[tuple[int, int], str] | None = None,
                   default: str = "X") -> Tree:
    """Assemble a CNF tree from a binary bracketing and per-span labels."""
    n = len(words)
    spans = set(spans)
    labels = labels or {}
    if (0, n - 1) not in spans:
        raise TreeError("bracketing has no root span")

    def build(i: int, j: int) -> Tree:
        label = labels.get((i, j), default)
        if i == j:
            return Tree(label, [words[i]])
        for r in range(i, j):
            if (i, r) in spans and (r + 1, j) in spans:
                return Tree(label, [build(i, r), build(r + 1, j)])
        raise TreeError(f"span ({i}, {j}) has no binary split in the bracketing")

    return build(0, n - 1)


# ---------------------------------------------------------------------------
# vocabulary


class LabelVocab:
    """Bidirectional label <-> index map."""

    def __init__(self, labels: Iterable[str]):
        self.labels: list[str] = []
        self.index: dict[str, int] = {}
        for label in labels:
            if label not in self.index:
                self.index[label] = len(self.labels)
                self.labels.append(label)

    def __len__(self):
        return len(self.labels)

    def __contains__(self, label):
        return label in self.index

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.index[key]
        return self.labels[key]

    def __eq__(self, other):
        return isinstance(other, LabelVocab) and self.labels == other.labels

    def __repr__(self):
        return f"LabelVocab({self.labels!r})"


def build_label_vocab(trees: Iterable[Tree]) -> LabelVocab:
    """Labels in order of first appearance (corpus order, then pre-order)."""
    labels: dict[str, None] = {}
    for tree in trees:
        for node in tree.subtrees():
            labels.setdefault(node.label)
    if not labels:
        raise ValueError("cannot build a label vocabulary from an empty corpus")
    return LabelVocab(labels)


# ---------------------------------------------------------------------------
# empties


def strip_empties(tree: Tree, empty_labels: Iterable[str] = ("-NONE-",)) -> Tree:
    """Remove subtrees labeled as empty elements and any nodes left without words."""
    empty_labels = set(empty_labels)

    def walk(node: Tree) -> Tree | None:
        if node.label in empty_labels:
            return None
        kids = []
        for child in node.children:
            if isinstance(child, str):
                kids.append(child)
            else:
                sub = walk(child)
                if sub is not None:
                    kids.append(sub)
        return Tree(node.label, kids) if kids else None

    out = walk(tree)
    if out is None:
        raise TreeError(f"tree is empty after removing {sorted(empty_labels)}")
    return out


# ---------------------------------------------------------------------------
# evaluation

ENGLISH_PUNCT = frozenset({":", "``", "''", ".", "?", "!"})


@dataclass
class EvalParams:
    ignore_labels: set[str] = field(default_factory=lambda: {"TOP", "S1", ""})
    punct_tokens: set[str] = field(default_factory=lambda: set(ENGLISH_PUNCT))
    equivalences: list[set[str]] = field(default_factory=lambda: [{"ADVP", "PRT"}])
    empty_labels: set[str] = field(default_factory=lambda: {"-NONE-"})
    # canonical EVALB deletes punctuation tokens before computing spans
    delete_punct: bool = False

    @classmethod
    def read(cls, path) -> "EvalParams":
        """Parse a ``key = value`` parameter file.

        Keys: ``ignore_labels``, ``punct_tokens``, ``empty_labels`` (each a
        whitespace-separated list), ``equivalent`` (one label set per line,
        repeatable) and ``delete_punct`` (true/false).  A key that appears
        replaces its default.  Lines starting with ``#`` are comments.
        """
        params = cls()
        seen: set[str] = set()
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                # only whole-line comments: "#" is itself a treebank token
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (s.strip() for s in line.split("=", 1))
                values = value.split()
                if key == "equivalent":
                    if "equivalent" not in seen:
                        params.equivalences = []
                    params.equivalences.append(set(values))
                elif key in ("ignore_labels", "punct_tokens", "empty_labels"):
                    setattr(params, key, set(values))
                elif key == "delete_punct":
                    params.delete_punct = value.lower() in ("1", "true", "yes")
                else:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                seen.add(key)
        return params


@dataclass
class PRF:
    matched: int
    predicted: int
    gold: int

    @property
    def precision(self) -> float:
        return self.matched / self.predicted if self.predicted else 1.0

    @property
    def recall(self) -> float:
        return self.matched / self.gold if self.gold else 1.0

    @property
    def fscore(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other: "PRF") -> "PRF":
        return PRF(self.matched + other.matched, self.predicted + other.predicted,
                   self.gold + other.gold)

    def summary(self) -> str:
        return (f"P {100 * self.precision:.2f} R {100 * self.recall:.2f} "
                f"F {100 * self.fscore:.2f}")


def _eval_constituents(tree: Tree, params: EvalParams, canon: dict[str, str],
                       unlabeled: bool) -> tuple[list[str], Counter]:
    words = tree.leaves()
    spans = tree.constituents()
    n = len(words)
    if params.delete_punct:
        keep = [w not in params.punct_tokens for w in words]
        new_index = []
        k = 0
        for flag in keep:
            new_index.append(k)
            k += flag
        moved = []
        for i, j, label in spans:
            if not any(keep[i:j + 1]):
                continue
            first = next(t for t in range(i, j + 1) if keep[t])
            last = next(t for t in range(j, i - 1, -1) if keep[t])
            moved.append((new_index[first], new_index[last], label))
        spans = moved
        words = [w for w, flag in zip(words, keep) if flag]
    out: Counter = Counter()
    for k, (i, j, label) in enumerate(spans):
        if k == 0 and i == 0 and j == n - 1 and label in params.ignore_labels:
            continue
        if i == j and words[i] in params.punct_tokens:
            continue
        out[(i, j, "" if unlabeled else canon.get(label, label))] += 1
    return words, out


def evalb_score(gold: Sequence[Tree], pred: Sequence[Tree],
                params: EvalParams | None = None, unlabeled: bool = False) -> PRF:
    """Corpus-level labeled bracket scores.

    A predicted constituent is correct if a not-yet-matched gold constituent
    has the same span and an equivalent label.  The root is skipped when its
    label is in ``ignore_labels``; width-1 constituents over punctuation
    tokens are skipped.
    """
    params = params or EvalParams()
    if len(gold) != len(pred):
        raise AlignmentError(min(len(gold), len(pred)),
                             f"{len(gold)} gold vs {len(pred)} predicted trees")
    canon: dict[str, str] = {}
    for group in params.equivalences:
        rep = min(group)
        for label in group:
            canon[label] = rep
    total = PRF(0, 0, 0)
    for k, (g, p) in enumerate(zip(gold, pred)):
        if params.empty_labels:
            g = strip_empties(g, params.empty_labels)
            p = strip_empties(p, params.empty_labels)
        gwords, gcons = _eval_constituents(g, params, canon, unlabeled)
        pwords, pcons = _eval_constituents(p, params, canon, unlabeled)
        if gwords != pwords:
            raise AlignmentError(k)
        matched = sum((gcons & pcons).values())
        total = total + PRF(matched, sum(pcons.values()), sum(gcons.values()))
    return total
