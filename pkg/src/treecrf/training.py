"""Losses and the training loop.

All losses take batched charts (``B x N x N`` or ``B x N x N x L``) with
per-sentence lengths; a single 2-D chart is treated as a batch of one.
Each returns the loss summed over the batch and its adjoint with respect
to the input scores.
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from treecrf import chart
from treecrf.parser import Parser
from treecrf.scorer import Scorer
from treecrf.treebank import EvalParams, Tree, binarize_cnf, evalb_score

logger = logging.getLogger(__name__)

LOSS_MODES = ("two_stage_crf", "one_stage_crf", "max_margin", "two_stage_max_margin")


def _batch(scores, golds, lengths, extra_dims=0):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 2 + extra_dims:
        scores = scores[None]
        golds = [golds]
    if lengths is None:
        lengths = [len(g) // 2 + 1 for g in golds]
    return scores, [list(g) for g in golds], np.asarray(lengths)


def _indicator(golds, shape):
    ind = np.zeros(shape)
    for b, gold in enumerate(golds):
        for i, j, *_ in gold:
            if j > i:
                ind[b, i, j] = 1.0
    return ind


def crf_bracket_loss(scores, gold, lengths=None):
    """``-score(gold) + log Z``; adjoints are marginals minus gold indicators."""
    scores, golds, lengths = _batch(scores, gold, lengths)
    for g, n in zip(golds, lengths):
        chart.check_bracketing([(s[0], s[1]) for s in g], int(n))
    logZ = chart.inside(scores, lengths).logZ
    ind = _indicator(golds, scores.shape)
    gold_score = (np.where(ind > 0, scores, 0.0)).sum(axis=(1, 2))
    mask = chart.span_mask(lengths, scores.shape[1])
    adj = np.where(mask, chart.marginals(scores, lengths) - ind, 0.0)
    return float((logZ - gold_score).sum()), adj


def _log_softmax(x):
    m = x.max(-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(-1, keepdims=True))


def label_loss(label_scores, gold, reduction: str = "mean"):
    """Cross-entropy of the gold label at each gold constituent.

    ``gold`` holds ``(i, j, label_index)`` triples, one list per sentence.
    Per sentence the terms are averaged (``reduction="mean"``) or summed.
    """
    label_scores = np.asarray(label_scores, dtype=np.float64)
    if label_scores.ndim == 3:
        label_scores = label_scores[None]
        gold = [gold]
    L = label_scores.shape[-1]
    adj = np.zeros_like(label_scores)
    total = 0.0
    for b, cons in enumerate(gold):
        if not cons:
            continue
        idx = np.array(cons, dtype=np.int64)
        if ((idx[:, 2] < 0) | (idx[:, 2] >= L)).any():
            raise ValueError(f"gold label outside the {L}-label vocabulary")
        rows = label_scores[b, idx[:, 0], idx[:, 1]]
        logp = _log_softmax(rows)
        k = len(cons) if reduction == "mean" else 1
        total -= logp[np.arange(len(cons)), idx[:, 2]].sum() / k
        g = np.exp(logp)
        g[np.arange(len(cons)), idx[:, 2]] -= 1.0
        np.add.at(adj[b], (idx[:, 0], idx[:, 1]), g / k)
    return float(total), adj


def total_loss(bracket_loss: float, label_loss: float) -> float:
    return bracket_loss + label_loss


def one_stage_crf_loss(label_scores, gold, lengths=None):
    """CRF over labeled bracketings; width-1 constituents are not scored."""
    label_scores, golds, lengths = _batch(label_scores, gold, lengths, extra_dims=1)
    B, N, _, L = label_scores.shape
    agg = chart.label_aggregate(label_scores, "logsumexp")
    logZ = chart.inside(agg, lengths).logZ
    gold_score = np.zeros(B)
    ind = np.zeros_like(label_scores)
    for b, g in enumerate(golds):
        for i, j, l in g:
            if j > i:
                gold_score[b] += label_scores[b, i, j, l]
                ind[b, i, j, l] = 1.0
    mask = chart.span_mask(lengths, N)
    marg = np.where(mask, chart.marginals(agg, lengths), 0.0)
    soft = np.exp(label_scores - agg[..., None])
    adj = marg[..., None] * soft - ind
    return float((logZ - gold_score).sum()), adj


def max_margin_loss(scores, gold, margin: float = 1.0, lengths=None):
    """Structured hinge with a Hamming cost of ``margin`` per wrong span."""
    scores, golds, lengths = _batch(scores, gold, lengths)
    ind = _indicator(golds, scores.shape)
    mask = chart.span_mask(lengths, scores.shape[1])
    aug = np.where(mask, scores + margin * (1.0 - ind), scores)
    best = chart.cky(aug, lengths)
    gold_score = np.where(ind > 0, scores, 0.0).sum(axis=(1, 2))
    loss = np.maximum(0.0, best.scores - gold_score)
    adj = np.zeros_like(scores)
    for b, tree in enumerate(best.trees):
        if loss[b] > 0:
            for i, j in tree:
                if j > i:
                    adj[b, i, j] += 1.0
            adj[b] -= ind[b]
    return float(loss.sum()), adj


def one_stage_max_margin_loss(label_scores, gold, margin: float = 1.0, lengths=None):
    """Hinge over labeled bracketings; a span with a wrong label costs ``margin``."""
    label_scores, golds, lengths = _batch(label_scores, gold, lengths, extra_dims=1)
    N = label_scores.shape[1]
    ind = np.zeros_like(label_scores)
    for b, g in enumerate(golds):
        for i, j, l in g:
            if j > i:
                ind[b, i, j, l] = 1.0
    aug = label_scores + margin * (1.0 - ind)
    best, arg = chart.label_aggregate(aug, "max")
    mask = chart.span_mask(lengths, N)
    result = chart.cky(np.where(mask, best, 0.0), lengths)
    gold_score = (label_scores * ind).sum(axis=(1, 2, 3))
    loss = np.maximum(0.0, result.scores - gold_score)
    adj = np.zeros_like(label_scores)
    for b, tree in enumerate(result.trees):
        if loss[b] > 0:
            for i, j in tree:
                if j > i:
                    adj[b, i, j, arg[b, i, j]] += 1.0
            adj[b] -= ind[b]
    return float(loss.sum()), adj


# ---------------------------------------------------------------------------
# batching


def make_batches(lengths: Sequence[int], batch_words: int, seed=None) -> list[list[int]]:
    """Shuffle sentence indices and pack them greedily under a token budget.

    A sentence longer than the budget forms a batch of its own.  Each batch
    is sorted by descending length.  ``seed`` may be an int or a
    ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(len(lengths))
    batches: list[list[int]] = []
    current: list[int] = []
    words = 0
    for k in order:
        k = int(k)
        if current and words + lengths[k] > batch_words:
            batches.append(current)
            current, words = [], 0
        current.append(k)
        words += lengths[k]
    if current:
        batches.append(current)
    return [sorted(b, key=lambda k: (-lengths[k], k)) for b in batches]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamConfig:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.9
    eps: float = 1e-12
    decay: float = 0.75
    decay_steps: int = 5000
    clip: float = 5.0


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def optimizer_step(params: dict, grads: dict, state: AdamState, hyper: AdamConfig) -> None:
    """One Adam update in place, with bias correction and step-wise lr decay."""
    for k, g in grads.items():
        if params[k].shape != np.shape(g):
            raise ValueError(f"gradient for {k} has shape {np.shape(g)}, expected {params[k].shape}")
    state.step += 1
    t = state.step
    lr = hyper.lr * hyper.decay ** ((t - 1) // hyper.decay_steps)
    c1 = 1 - hyper.beta1 ** t
    c2 = 1 - hyper.beta2 ** t
    for k, g in grads.items():
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        v = state.v[k]
        m *= hyper.beta1
        m += (1 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1 - hyper.beta2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    batch_words: int = 5000
    max_epochs: int = 1000
    patience: int = 100
    loss_mode: str = "two_stage_crf"
    margin: float = 1.0
    label_weight: float = 1.0
    binarize: str = "left"
    decode: str = "viterbi"
    unk_prob: float = 0.0  # chance a singleton word is read as unknown
    seed: int = 0
    optimizer: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if not 0 <= self.unk_prob <= 1:
            raise ValueError("unk_prob must be in [0, 1]")
        if self.batch_words < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("batch_words and max_epochs must be positive, patience >= 0")

    @property
    def stage(self) -> str:
        return "two" if self.loss_mode.startswith("two_stage") else "one"


@dataclass
class Example:
    words: list[str]
    constituents: list[tuple[int, int, int]]  # CNF spans with label indices

    @property
    def spans(self):
        return [(i, j) for i, j, _ in self.constituents]


def make_examples(trees: Sequence[Tree], labels, direction: str = "left") -> list[Example]:
    out = []
    for tree in trees:
        cnf = binarize_cnf(tree, direction)
        cons = []
        for i, j, label in cnf.constituents():
            if label not in labels:
                raise ValueError(f"label {label!r} is not in the vocabulary")
            cons.append((i, j, labels[label]))
        out.append(Example(tree.leaves(), cons))
    return out


def singleton_mask(sentences, singletons: set, p: float, rng):
    """``B x T`` flags for singleton words drawn to be read as unknown."""
    T = max(len(s) for s in sentences)
    mask = np.zeros((len(sentences), T), dtype=bool)
    if p <= 0 or not singletons:
        return mask
    for b, sent in enumerate(sentences):
        for t, w in enumerate(sent):
            mask[b, t] = w in singletons
    return mask & (rng.random(mask.shape) < p)


def batch_loss(scorer: Scorer, examples: Sequence[Example], config: TrainConfig, rng,
               train: bool = True, singletons: set = frozenset()):
    """Forward, loss and parameter gradients for one batch (losses averaged over sentences)."""
    sents = [e.words for e in examples]
    lengths = np.array([len(s) for s in sents])
    unk = None
    if train and config.unk_prob > 0 and singletons:
        unk = singleton_mask(sents, singletons, config.unk_prob, rng)
    spans, labels, tape = scorer.forward(sents, train=train, rng=rng, record=True, unk_mask=unk)
    B = len(examples)
    golds = [e.constituents for e in examples]
    mode = config.loss_mode
    d_span = None
    if mode in ("two_stage_crf", "two_stage_max_margin"):
        if mode == "two_stage_crf":
            lb, d_span = crf_bracket_loss(spans, golds, lengths)
        else:
            lb, d_span = max_margin_loss(spans, golds, config.margin, lengths)
        ll, d_label = label_loss(labels, golds)
        loss = total_loss(lb, config.label_weight * ll)
        d_label = config.label_weight * d_label
    else:
        if mode == "one_stage_crf":
            lb, d_label = one_stage_crf_loss(labels, golds, lengths)
        else:
            lb, d_label = one_stage_max_margin_loss(labels, golds, config.margin, lengths)
        # leaf labels are constant across bracketings; train them locally
        leaves = [[c for c in g if c[0] == c[1]] for g in golds]
        ll, d_leaf = label_loss(labels, leaves, reduction="sum")
        loss = lb + ll
        d_label = d_label + d_leaf
    grads = scorer.backward(tape, None if d_span is None else d_span / B, d_label / B)
    return loss / B, grads


def evaluate(parser: Parser, trees: Sequence[Tree], params: EvalParams | None = None,
             unlabeled: bool = False):
    pred = parser.parse([t.leaves() for t in trees])
    return evalb_score(trees, pred, params, unlabeled=unlabeled)


def train(scorer: Scorer, train_trees: Sequence[Tree], dev_trees: Sequence[Tree],
          config: TrainConfig, eval_params: EvalParams | None = None,
          on_epoch: Callable[[dict], None] | None = None,
          on_best: Callable[[Scorer, AdamState], None] | None = None):
    """Train in place; returns the per-epoch log.

    After every epoch the dev set is parsed and scored; the parameters with
    the best labeled F are restored at the end.  Training stops once
    ``patience`` epochs pass without improvement, after ``max_epochs``, or
    when the loss becomes non-finite.
    """
    rng = np.random.default_rng(config.seed)
    examples = make_examples(train_trees, scorer.labels, config.binarize)
    lengths = [len(e.words) for e in examples]
    counts = Counter(w for e in examples for w in e.words)
    singletons = {w for w, c in counts.items() if c == 1}
    parser = Parser(scorer, stage=config.stage, decode=config.decode)
    state = AdamState()
    best_f, best_epoch = -1.0, 0
    best_params = {k: v.copy() for k, v in scorer.params.items()}
    log: list[dict] = []
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        total, count = 0.0, 0
        diverged = False
        for batch in make_batches(lengths, config.batch_words, rng):
            loss, grads = batch_loss(scorer, [examples[k] for k in batch], config, rng,
                                     singletons=singletons)
            if not math.isfinite(loss):
                diverged = True
                break
            clip_grads(grads, config.optimizer.clip)
            optimizer_step(scorer.params, grads, state, config.optimizer)
            total += loss * len(batch)
            count += len(batch)
        if diverged:
            record = {"epoch": epoch, "event": "diverged", "best_epoch": best_epoch}
            log.append(record)
            logger.warning("non-finite loss in epoch %d; restoring epoch %d", epoch, best_epoch)
            if on_epoch:
                on_epoch(record)
            break
        prf = evaluate(parser, dev_trees, eval_params)
        record = {"epoch": epoch, "loss": total / max(count, 1), "dev_p": prf.precision,
                  "dev_r": prf.recall, "dev_f": prf.fscore,
                  "seconds": round(time.perf_counter() - start, 3)}
        log.append(record)
        logger.info(json.dumps(record))
        if on_epoch:
            on_epoch(record)
        if prf.fscore > best_f:
            best_f, best_epoch = prf.fscore, epoch
            best_params = {k: v.copy() for k, v in scorer.params.items()}
            if on_best:
                on_best(scorer, state)
        if epoch - best_epoch >= config.patience:
            break
    scorer.params.update(best_params)
    return log


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
