"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
"""

import json
import sys
import time

import numpy as np
import pytest

from treecrf import chart, cli, oracle
from treecrf.parser import Parser
from treecrf.scorer import Scorer, ScorerConfig
from treecrf.synthetic import GRAMMAR, LEXICON, pcfg_corpus, random_tree
from treecrf.training import TrainConfig, crf_bracket_loss, evaluate, one_stage_crf_loss, train
from treecrf.treebank import (
    EvalParams,
    LabelVocab,
    binarize_cnf,
    build_label_vocab,
    debinarize,
    evalb_score,
    parse_bracketed,
    write_trees,
)

CASES = [(n, seed) for n in range(2, 9) for seed in range(100)]


def chart_for(n, seed):
    return np.random.default_rng(1000 * n + seed).normal(scale=2.0, size=(n, n))


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def test_01_inside(report):
    start = time.perf_counter()
    worst = max(abs(chart.inside(chart_for(n, s)).logZ[0] - oracle.brute_logZ(chart_for(n, s), n))
                for n, s in CASES)
    seconds = time.perf_counter() - start
    report(1, worst <= 1e-9 and seconds < 10,
           f"inside vs enumeration on {len(CASES)} charts: max error {worst:.1e}, {seconds:.1f}s")


def test_02_marginals(report):
    worst = span_sum = 0.0
    for n, s in CASES:
        scores = chart_for(n, s)
        m = chart.marginals(scores)[0]
        worst = max(worst, np.abs(np.triu(m) - oracle.brute_marginals(scores, n)).max())
        span_sum = max(span_sum, abs(np.triu(m, 1).sum() - (n - 1)))
    report(2, worst <= 1e-9 and span_sum <= 1e-9,
           f"marginals max error {worst:.1e}, span-sum error {span_sum:.1e}")


def test_03_cky(report):
    score_err, mismatched = 0.0, 0
    for n, s in CASES:
        scores = chart_for(n, s)
        result = chart.cky(scores)
        tree, best = oracle.brute_argmax(scores, n)
        score_err = max(score_err, abs(result.scores[0] - best))
        mismatched += result.trees[0] != tree
    report(3, score_err <= 1e-9 and mismatched == 0,
           f"CKY score error {score_err:.1e}, {mismatched} argmax mismatches (lowest-split ties)")


def test_04_mbr(report):
    bad_identity = bad_max = 0
    for n, s in CASES:
        scores = chart_for(n, s)
        tree = chart.mbr_decode(scores)[0]
        marg = chart.marginals(scores)[0]
        bad_identity += tree != chart.cky(chart.marginals(scores)).trees[0]
        expected = [sum(marg[i, j] for i, j in t) for t in oracle.enumerate_trees(n)]
        bad_max += abs(sum(marg[i, j] for i, j in tree) - max(expected)) > 1e-9
    report(4, bad_identity == 0 and bad_max == 0,
           f"MBR identity failures {bad_identity}, non-maximal expected span count {bad_max}")


def test_05_gradients(report):
    sents = [["the", "old", "man", "the"]]
    config = ScorerConfig(word_dim=4, char_dim=3, char_out=4, hidden=3, layers=2, span_dim=5,
                          label_dim=3)
    scorer = Scorer.build(sents, LabelVocab(["A", "B", "C"]), config, seed=0)
    rng = np.random.default_rng(1)
    for k, v in scorer.params.items():
        scorer.params[k] = v + rng.normal(scale=0.3, size=v.shape)
    ws, wl = rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 4, 4, 3))

    def loss():
        s, l, _ = scorer.forward(sents, train=True, rng=np.random.default_rng(2))
        return float((s * ws).sum() + (l * wl).sum())

    _, _, tape = scorer.forward(sents, train=True, rng=np.random.default_rng(2), record=True)
    grads = scorer.backward(tape, ws, wl)
    failed = []
    for name, value in scorer.params.items():
        def f(x, name=name):
            old = scorer.params[name]
            scorer.params[name] = x
            try:
                return loss()
            finally:
                scorer.params[name] = old
        fd = oracle.finite_diff(f, value.copy())
        if np.any(np.abs(grads[name] - fd) > np.maximum(1e-4, 1e-3 * np.abs(fd))):
            failed.append(name)
    crf_err = 0.0
    for n in range(2, 8):
        scores = chart_for(n, 7)
        gold = oracle.enumerate_trees(n)[-1]
        _, adj = crf_bracket_loss(scores, gold)
        fd = oracle.finite_diff(
            lambda x: oracle.brute_logZ(x, n) - chart.tree_score(x, gold), scores)
        upper = np.triu_indices(n, 1)
        crf_err = max(crf_err, np.abs(adj[0][upper] - fd[upper]).max())
    report(5, not failed and crf_err <= 1e-5,
           f"{len(scorer.params)} parameter groups, failed {failed or 'none'}; "
           f"CRF adjoint error {crf_err:.1e}")


def test_06_one_stage_consistency(report):
    single = 0.0
    for n, s in CASES[::10]:
        scores = chart_for(n, s)
        gold = oracle.enumerate_trees(n)[s % len(oracle.enumerate_trees(n))]
        one, _ = one_stage_crf_loss(scores[..., None], [(i, j, 0) for i, j in gold])
        two, _ = crf_bracket_loss(scores, gold)
        single = max(single, abs(one - two))
    joint = 0.0
    for seed in range(5):
        grid = np.random.default_rng(seed).normal(size=(4, 4, 3))
        logZ = chart.inside(chart.label_aggregate(grid[None], "logsumexp"), [4]).logZ[0]
        joint = max(joint, abs(logZ - oracle.brute_labeled_logZ(grid, 4)))
    report(6, single <= 1e-12 and joint <= 1e-9,
           f"|L|=1 loss difference {single:.1e}; |L|=3 joint logZ error {joint:.1e}")


def generated_trees(count=1000):
    rng = np.random.default_rng(0)
    return [random_tree(rng, int(rng.integers(1, 16)), max_arity=5, max_unary=3)
            for _ in range(count)]


def test_07_cnf_round_trip(report):
    trees = generated_trees()
    bad_round = bad_count = 0
    for t in trees:
        cnf = binarize_cnf(t)
        bad_round += debinarize(cnf) != t
        bad_count += len(cnf.constituents()) != 2 * len(t.leaves()) - 1
    report(7, bad_round == 0 and bad_count == 0,
           f"{len(trees)} trees: {bad_round} round-trip failures, {bad_count} wrong sizes")


def test_08_evalb(report):
    plain = EvalParams(ignore_labels=set(), punct_tokens=set(), equivalences=[])
    prf = evalb_score([parse_bracketed("(S (NP a b) (VP c d e))")],
                      [parse_bracketed("(S (NP a b) (NP c d e))")], plain)
    two_thirds = prf.precision == prf.recall == 2 / 3
    equiv = evalb_score([parse_bracketed("(S (NP a b c) (ADVP d e))")],
                        [parse_bracketed("(S (NP a b c) (PRT d e))")]).fscore == 1.0
    selfscore = all(evalb_score([t], [t]).summary() == "P 100.00 R 100.00 F 100.00"
                    for t in generated_trees())
    report(8, two_thirds and equiv and selfscore,
           f"2/3 case {prf.summary()}; ADVP/PRT equivalence {equiv}; self-score 100.00 {selfscore}")


def test_09_learnability(report):
    trees = pcfg_corpus(200, min_len=4, max_len=10, seed=0)
    labels = build_label_vocab(binarize_cnf(t) for t in trees)
    base = {lab for t in trees for node in t.subtrees() for lab in [node.label]}
    config = ScorerConfig(word_dim=32, char_dim=16, char_out=32, hidden=64, layers=2,
                          span_dim=64, label_dim=32)
    scorer = Scorer.build([t.leaves() for t in trees], labels, config, seed=0)
    start = time.perf_counter()
    log = train(scorer, trees, trees, TrainConfig(batch_words=500, max_epochs=200, patience=200, seed=0))
    seconds = time.perf_counter() - start
    parser = Parser(scorer)
    unlabeled = evaluate(parser, trees, unlabeled=True).fscore
    labeled = evaluate(parser, trees).fscore
    ok = unlabeled >= 0.99 and labeled >= 0.95 and len(log) <= 200 and seconds < 600
    report(9, ok, f"{len(trees)} sentences, {len(base)} labels, {len(log)} epochs in "
                  f"{seconds:.0f}s: unlabeled F {100 * unlabeled:.2f}, labeled F {100 * labeled:.2f}")


def test_10_batching_speedup(report):
    rng = np.random.default_rng(0)
    words = sorted({w for ws in LEXICON.values() for w in ws})
    sentences = [list(rng.choice(words, size=20)) for _ in range(512)]
    labels = LabelVocab(sorted(GRAMMAR))
    config = ScorerConfig(word_dim=16, char_dim=8, char_out=16, hidden=16, layers=1,
                          span_dim=16, label_dim=8)
    scorer = Scorer.build(sentences, labels, config, seed=0)
    for k, v in scorer.params.items():
        scorer.params[k] = v + rng.normal(scale=0.1, size=v.shape)
    r = cli.benchmark(scorer, sentences, batch_size=64)
    ok = r["batch_speedup"] >= 2 and r["mbr"] < r["viterbi"]
    report(10, ok, f"viterbi batched {r['viterbi']:.0f} vs unbatched {r['viterbi_unbatched']:.0f} "
                   f"sent/s (x{r['batch_speedup']:.1f}); mbr {r['mbr']:.0f} sent/s")


def test_11_determinism(report, tmp_path):
    trees = pcfg_corpus(12, seed=5)
    data = tmp_path / "train.txt"
    write_trees(data, trees)
    conf = tmp_path / "run.conf"
    conf.write_text("word_dim = 8\nchar_dim = 4\nchar_out = 8\nhidden = 8\nlayers = 1\n"
                    "span_dim = 8\nlabel_dim = 6\nmax_epochs = 4\nbatch_words = 30\nseed = 11\n")
    logs = []
    for k in range(2):
        model = tmp_path / f"m{k}.bin"
        status = cli.main(["train", "--config", str(conf), "--train", str(data),
                           "--model", str(model)], env={})
        assert status == 0
        records = [json.loads(x) for x in open(str(model) + ".log.jsonl")][1:]
        logs.append([{k: v for k, v in r.items() if k != "seconds"} for r in records])
    start = time.perf_counter()
    check = cli.main(["selfcheck"], env={})
    seconds = time.perf_counter() - start
    ok = logs[0] == logs[1] and len(logs[0]) == 4 and check == 0 and seconds < 60
    report(11, ok, f"identical epoch logs {logs[0] == logs[1]}; selfcheck exit {check} "
                   f"in {seconds:.1f}s")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
