r"""Batched dynamic programs over span charts.

A chart is a ``B x N x N`` float array (``N`` = longest sentence in the batch)
plus a vector of sentence lengths.  Cell ``[b, i, j]`` holds the value of the
inclusive span ``(i, j)`` of sentence ``b``; only cells with
``0 <= i <= j < lengths[b]`` are meaningful.

Every recursion runs width by width.  At width ``w`` all spans ``(i, i+w)`` of
every sentence are gathered into one ``B x (N-w) x w`` block of split
candidates and reduced at once, so a batch needs ``N-1`` sequential steps
whatever its size.

Width-1 cells carry no score: every binary bracketing contains all of them,
so they would add the same constant to every tree.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

NEG_INF = -np.inf


def _check(scores, lengths):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 2:
        scores = scores[None]
    if scores.ndim != 3 or scores.shape[1] != scores.shape[2]:
        raise ValueError(f"expected a B x N x N chart, got shape {scores.shape}")
    if lengths is None:
        lengths = np.full(scores.shape[0], scores.shape[1])
    lengths = np.asarray(lengths, dtype=np.int64).reshape(-1)
    if len(lengths) != scores.shape[0]:
        raise ValueError(f"{len(lengths)} lengths for a batch of {scores.shape[0]}")
    if scores.shape[1] == 0 or (lengths < 1).any():
        raise ValueError("sentence length must be at least 1")
    if (lengths > scores.shape[1]).any():
        raise ValueError("length exceeds chart size")
    mask = span_mask(lengths, scores.shape[1])
    if np.isnan(scores[mask]).any():
        raise ValueError("NaN in span scores")
    return scores, lengths, mask


def span_mask(lengths, n: int) -> np.ndarray:
    """Boolean ``B x N x N`` mask of meaningful cells with ``j > i``."""
    lengths = np.asarray(lengths)
    idx = np.arange(n)
    upper = idx[:, None] < idx[None, :]
    inside = idx[None, None, :] < lengths[:, None, None]
    return upper[None] & inside


def _width_index(n: int, w: int):
    """Indices of all spans of width ``w`` and of their split candidates."""
    starts = np.arange(n - w)
    ends = starts + w
    splits = starts[:, None] + np.arange(w)[None, :]  # r in [i, j)
    return starts, ends, splits


def _logsumexp(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


class InsideResult(NamedTuple):
    logZ: np.ndarray
    chart: np.ndarray


def inside(scores, lengths=None, _tape=None) -> InsideResult:
    """Log-partition over binary bracketings for each sentence.

    Returns ``logZ`` (one value per sentence) and the inside chart, whose
    diagonal is 0 and whose padding cells are ``-inf``.
    """
    scores, lengths, mask = _check(scores, lengths)
    B, N, _ = scores.shape
    s = np.where(mask, scores, NEG_INF)
    chart = np.full((B, N, N), NEG_INF)
    diag = np.arange(N)
    chart[:, diag, diag] = np.where(diag[None, :] < lengths[:, None], 0.0, NEG_INF)
    for w in range(1, N):
        starts, ends, splits = _width_index(N, w)
        cand = chart[:, starts[:, None], splits] + chart[:, splits + 1, ends[:, None]]
        total = _logsumexp(cand)
        chart[:, starts, ends] = total + s[:, starts, ends]
        if _tape is not None:
            with np.errstate(invalid="ignore"):
                weights = np.exp(cand - total[..., None])
            _tape.append(np.where(np.isfinite(total)[..., None], weights, 0.0))
    logZ = chart[np.arange(B), 0, lengths - 1]
    return InsideResult(logZ, chart)


def marginals(scores, lengths=None) -> np.ndarray:
    r"""Span marginals :math:`p((i,j) \mid x) = \partial \log Z / \partial s(i,j)`.

    The gradient is accumulated backwards through the width loop of
    :func:`inside`: each span's adjoint is handed to its split candidates in
    proportion to their softmax weights.  Width-1 cells are exactly 1 and
    padding cells 0.
    """
    scores, lengths, mask = _check(scores, lengths)
    B, N, _ = scores.shape
    tape: list[np.ndarray] = []
    inside(scores, lengths, _tape=tape)
    grad = np.zeros((B, N, N))
    grad[np.arange(B), 0, lengths - 1] = 1.0
    for w in range(N - 1, 0, -1):
        starts, ends, splits = _width_index(N, w)
        g = grad[:, starts, ends][..., None] * tape[w - 1]
        # within one width the left (resp. right) index sets are duplicate-free
        grad[:, starts[:, None], splits] += g
        grad[:, splits + 1, ends[:, None]] += g
    out = np.where(mask, grad, 0.0)
    diag = np.arange(N)
    out[:, diag, diag] = (diag[None, :] < lengths[:, None]).astype(float)
    return out


class CKYResult(NamedTuple):
    trees: list[list[tuple[int, int]]]
    scores: np.ndarray


def cky(scores, lengths=None) -> CKYResult:
    """Highest-scoring binary bracketing per sentence.

    Ties between split points go to the lowest one.  Trees are returned as
    sorted span lists including the width-1 spans.
    """
    scores, lengths, mask = _check(scores, lengths)
    B, N, _ = scores.shape
    s = np.where(mask, scores, NEG_INF)
    chart = np.full((B, N, N), NEG_INF)
    back = np.zeros((B, N, N), dtype=np.int64)
    diag = np.arange(N)
    chart[:, diag, diag] = np.where(diag[None, :] < lengths[:, None], 0.0, NEG_INF)
    for w in range(1, N):
        starts, ends, splits = _width_index(N, w)
        cand = chart[:, starts[:, None], splits] + chart[:, splits + 1, ends[:, None]]
        best = cand.argmax(-1)
        chart[:, starts, ends] = np.take_along_axis(cand, best[..., None], -1)[..., 0] \
            + s[:, starts, ends]
        back[:, starts, ends] = starts[None, :] + best
    best_scores = chart[np.arange(B), 0, lengths - 1]
    trees = [_backtrack(back[b], int(lengths[b])) for b in range(B)]
    return CKYResult(trees, best_scores)


def _backtrack(back: np.ndarray, n: int) -> list[tuple[int, int]]:
    spans = []
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        spans.append((i, j))
        if j > i:
            r = int(back[i, j])
            stack.append((r + 1, j))
            stack.append((i, r))
    return sorted(spans)


def mbr_decode(scores, lengths=None) -> list[list[tuple[int, int]]]:
    """CKY over span marginals: the tree with the highest expected span recall."""
    scores, lengths, _ = _check(scores, lengths)
    return cky(marginals(scores, lengths), lengths).trees


def label_aggregate(label_scores, mode: str = "logsumexp"):
    """Reduce a ``B x N x N x L`` label grid to a span chart.

    ``mode="logsumexp"`` gives the span potentials of the one-stage CRF;
    ``mode="max"`` returns ``(chart, argmax_labels)`` for one-stage CKY.
    """
    label_scores = np.asarray(label_scores, dtype=np.float64)
    if label_scores.shape[-1] == 0:
        raise ValueError("empty label set")
    if mode == "logsumexp":
        return _logsumexp(label_scores, axis=-1)
    if mode == "max":
        best = label_scores.argmax(-1)
        return np.take_along_axis(label_scores, best[..., None], -1)[..., 0], best
    raise ValueError(f"unknown aggregation mode {mode!r}")


def tree_score(scores, tree) -> float:
    """Sum of the scores of the tree's spans of width 2 or more."""
    scores = np.asarray(scores, dtype=np.float64)
    tree = list(tree)
    n = len(tree) // 2 + 1
    if len(tree) != 2 * n - 1 or n > scores.shape[-1]:
        raise ValueError(f"tree with {len(tree)} spans does not fit a chart of size {scores.shape[-1]}")
    check_bracketing(tree, n)
    return float(sum(scores[i, j] for i, j in tree if j > i))


def check_bracketing(spans, n: int) -> None:
    """Raise ``ValueError`` unless ``spans`` is a full binary bracketing of ``n`` words."""
    spans = set(spans)
    if len(spans) != 2 * n - 1:
        raise ValueError(f"expected {2 * n - 1} spans for {n} words, got {len(spans)}")
    if (0, n - 1) not in spans:
        raise ValueError("root span missing")
    for i, j in spans:
        if not 0 <= i <= j < n:
            raise ValueError(f"span ({i}, {j}) out of range")
    if any((i, i) not in spans for i in range(n)):
        raise ValueError("missing width-1 span")
    for i, j in spans:
        if i < j and sum((i, r) in spans and (r + 1, j) in spans for r in range(i, j)) != 1:
            raise ValueError(f"span ({i}, {j}) is not split into two children")
