"""From sentences to n-ary trees: score, decode the bracketing, label, debinarize."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from treecrf import chart
from treecrf.scorer import Scorer
from treecrf.treebank import Tree, build_cnf_tree, debinarize


def decode_spans(spans, labels, lengths, decode: str = "viterbi", stage: str = "two"):
    """Bracketings and per-span label indices for a batch of score charts.

    Two-stage: CKY (or MBR) over the span chart, then the best label per
    chosen span.  One-stage: the chart is the best label score per span.
    """
    if decode not in ("viterbi", "mbr"):
        raise ValueError(f"unknown decode mode {decode!r}")
    best_label = labels.argmax(-1)
    if stage == "one":
        if decode == "mbr":
            spans = chart.label_aggregate(labels, "logsumexp")
        else:
            spans = chart.label_aggregate(labels, "max")[0]
    elif stage != "two":
        raise ValueError(f"unknown stage mode {stage!r}")
    if decode == "mbr":
        trees = chart.mbr_decode(spans, lengths)
    else:
        trees = chart.cky(spans, lengths).trees
    out = []
    for b, tree in enumerate(trees):
        out.append([(i, j, int(best_label[b, i, j])) for i, j in tree])
    return out


class Parser:
    def __init__(self, scorer: Scorer, stage: str = "two", decode: str = "viterbi"):
        self.scorer = scorer
        self.stage = stage
        self.decode = decode

    def parse_cnf(self, sentences: Sequence[Sequence[str]], decode: str | None = None) -> list[Tree]:
        spans, labels = self.scorer.score(sentences)
        lengths = np.array([len(s) for s in sentences])
        decoded = decode_spans(spans, labels, lengths, decode or self.decode, self.stage)
        vocab = self.scorer.labels
        out = []
        for words, triples in zip(sentences, decoded):
            names = {(i, j): vocab[l] for i, j, l in triples}
            out.append(build_cnf_tree(list(words), names.keys(), names))
        return out

    def parse(self, sentences: Sequence[Sequence[str]], decode: str | None = None,
              batch_size: int = 64) -> list[Tree]:
        """n-ary trees for whitespace-tokenized sentences, in input order.

        Sentences are grouped by length so each batch pads little.
        """
        order = sorted(range(len(sentences)), key=lambda k: len(sentences[k]))
        out: list[Tree | None] = [None] * len(sentences)
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            trees = self.parse_cnf([sentences[k] for k in chunk], decode)
            for k, tree in zip(chunk, trees):
                out[k] = debinarize(tree)
        return out
