"""Command-line front end: ``treecrf {train,parse,evaluate,bench,selfcheck}``.

Settings resolve in order flags > ``TREECRF_*`` environment > config file >
defaults.  Exit status is 0 on success, 1 when a check or validation fails,
2 on usage and I/O errors.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from treecrf import chart, modelio, oracle
from treecrf.parser import Parser, decode_spans
from treecrf.scorer import Scorer, ScorerConfig
from treecrf.training import AdamConfig, AdamState, TrainConfig, crf_bracket_loss, train
from treecrf.treebank import (
    AlignmentError,
    EvalParams,
    TreeError,
    binarize_cnf,
    build_label_vocab,
    evalb_score,
    parse_bracketed,
    read_trees,
    render_bracketed,
)

ENV_PREFIX = "TREECRF_"

DEFAULTS: dict[str, object] = {
    # paths
    "train": None, "dev": None, "model": None, "input": None, "output": None,
    "gold": None, "eval_params": None, "log": None,
    # modes
    "decode": "viterbi", "stage": "two", "loss": "crf", "binarize": "left",
    "seed": 0, "threads": 0, "batch_size": 64,
    # training
    "batch_words": 5000, "max_epochs": 1000, "patience": 100, "margin": 1.0,
    "label_weight": 1.0, "lr": 2e-3, "unk_prob": 0.0,
    # network
    "word_dim": 100, "char_dim": 50, "char_out": 100, "hidden": 400, "layers": 3,
    "span_dim": 500, "label_dim": 100, "dropout": 0.33, "arch": "biaffine",
}
PATH_KEYS = {"train", "dev", "model", "input", "output", "gold", "eval_params", "log"}
CHOICES = {"decode": ("viterbi", "mbr"), "stage": ("two", "one"), "loss": ("crf", "maxmargin"),
           "binarize": ("left", "right"), "arch": ("biaffine", "minus")}
LOSS_MODES = {("two", "crf"): "two_stage_crf", ("one", "crf"): "one_stage_crf",
              ("one", "maxmargin"): "max_margin", ("two", "maxmargin"): "two_stage_max_margin"}


class UsageError(Exception):
    """Bad configuration or unreadable input (exit status 2)."""


class CheckFailure(Exception):
    """Validation failed (exit status 1)."""


# ---------------------------------------------------------------------------
# configuration


def _coerce(key: str, value):
    if key not in DEFAULTS:
        raise UsageError(f"unknown setting {key!r}")
    default = DEFAULTS[key]
    if value is None or key in PATH_KEYS:
        return value
    try:
        if isinstance(default, int):
            value = int(value)
        elif isinstance(default, float):
            value = float(value)
    except ValueError:
        raise UsageError(f"setting {key!r}: cannot read {value!r} as {type(default).__name__}")
    if key in CHOICES and value not in CHOICES[key]:
        raise UsageError(f"setting {key!r} must be one of {', '.join(CHOICES[key])}")
    return value


def read_config_file(path) -> dict:
    """``key = value`` lines with ``#`` comments and no sections."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",))
    try:
        text = Path(path).read_text(encoding="utf-8")
        parser.read_string("[run]\n" + text, source=str(path))
    except OSError as err:
        raise UsageError(f"cannot read config file {path}: {err.strerror}")
    except configparser.Error as err:
        raise UsageError(f"config file {path}: {err}")
    return {k: v for k, v in parser["run"].items()}


def resolve_config(flags: dict, env=None) -> tuple[dict, dict]:
    """Merged settings and, per key, where the value came from."""
    env = os.environ if env is None else env
    config = dict(DEFAULTS)
    source = {k: "default" for k in DEFAULTS}
    layers = []
    if flags.get("config"):
        layers.append(("file", read_config_file(flags["config"])))
    layers.append(("env", {k[len(ENV_PREFIX):].lower(): v for k, v in env.items()
                           if k.startswith(ENV_PREFIX)}))
    layers.append(("flag", {k: v for k, v in flags.items() if k != "config" and v is not None}))
    for name, layer in layers:
        for key, value in layer.items():
            config[key] = _coerce(key, value)
            source[key] = name
    return config, source


def echo_config(config: dict, stream=None) -> None:
    print("config " + json.dumps(config, sort_keys=True), file=stream or sys.stderr)


def scorer_config(config: dict) -> ScorerConfig:
    keys = ("word_dim", "char_dim", "char_out", "hidden", "layers", "span_dim", "label_dim",
            "dropout", "arch")
    try:
        return ScorerConfig(**{k: config[k] for k in keys})
    except ValueError as err:
        raise UsageError(str(err))


def train_config(config: dict) -> TrainConfig:
    try:
        return TrainConfig(
            batch_words=config["batch_words"], max_epochs=config["max_epochs"],
            patience=config["patience"], loss_mode=LOSS_MODES[config["stage"], config["loss"]],
            margin=config["margin"], label_weight=config["label_weight"],
            binarize=config["binarize"], decode=config["decode"], seed=config["seed"],
            unk_prob=config["unk_prob"],
            optimizer=AdamConfig(lr=config["lr"]))
    except ValueError as err:
        raise UsageError(str(err))


def _need(config: dict, key: str) -> str:
    if not config.get(key):
        raise UsageError(f"--{key.replace('_', '-')} is required")
    return config[key]


def _read_trees(path):
    try:
        return read_trees(path)
    except OSError as err:
        raise UsageError(f"cannot read {path}: {err.strerror}")
    except TreeError as err:
        raise CheckFailure(f"{path}: {err}")


def _eval_params(config):
    if not config["eval_params"]:
        return None
    try:
        return EvalParams.read(config["eval_params"])
    except OSError as err:
        raise UsageError(f"cannot read {config['eval_params']}: {err.strerror}")
    except ValueError as err:
        raise UsageError(f"{config['eval_params']}: {err}")


def _load_model(config):
    path = _need(config, "model")
    try:
        return modelio.load(path)
    except OSError as err:
        raise UsageError(f"cannot read model {path}: {err.strerror}")
    except modelio.ModelFileError as err:
        raise CheckFailure(str(err))


def read_sentences(path) -> list[list[str]]:
    """One sentence per line; a line starting with ``(`` is a tree and contributes its words."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as err:
        raise UsageError(f"cannot read {path}: {err.strerror}")
    out = []
    for number, line in enumerate(lines, 1):
        line = line.strip()
        if line.startswith("("):
            try:
                out.append(parse_bracketed(line, preterminals="auto").leaves())
            except TreeError as err:
                raise CheckFailure(f"{path}:{number}: {err}")
        else:
            out.append(line.split())
    return out


def _write_lines(path, lines) -> None:
    text = "".join(line + "\n" for line in lines)
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as err:
        raise UsageError(f"cannot write {path}: {err.strerror}")


# ---------------------------------------------------------------------------
# commands


def cmd_train(config: dict) -> int:
    train_path = _need(config, "train")
    model_path = _need(config, "model")
    if not Path(train_path).is_file():
        raise UsageError(f"training file not found: {train_path}")
    train_trees = _read_trees(train_path)
    dev_trees = _read_trees(config["dev"]) if config["dev"] else train_trees
    if not train_trees:
        raise CheckFailure(f"{train_path}: no trees")
    tconf = train_config(config)
    labels = build_label_vocab(binarize_cnf(t, tconf.binarize) for t in train_trees)
    scorer = Scorer.build([t.leaves() for t in train_trees], labels, scorer_config(config),
                          seed=config["seed"])
    log_path = config["log"] or model_path + ".log.jsonl"
    extra = {"stage": tconf.stage, "binarize": tconf.binarize, "loss_mode": tconf.loss_mode}
    try:
        log_file = open(log_path, "w", encoding="utf-8")
    except OSError as err:
        raise UsageError(f"cannot write {log_path}: {err.strerror}")
    with log_file:
        log_file.write(json.dumps({"config": config}, sort_keys=True) + "\n")

        def on_epoch(record):
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()
            print(json.dumps(record, sort_keys=True), file=sys.stderr)

        saved = []

        def on_best(sc, state):
            modelio.save(model_path, sc, extra, optimizer=state)
            saved.append(True)

        log = train(scorer, train_trees, dev_trees, tconf, _eval_params(config), on_epoch, on_best)
    if not saved:
        modelio.save(model_path, scorer, extra, optimizer=AdamState())
    if log and log[-1].get("event") == "diverged":
        print(f"treecrf: loss diverged in epoch {log[-1]['epoch']}; "
              f"kept the checkpoint of epoch {log[-1]['best_epoch']}", file=sys.stderr)
        return 1
    return 0


def _parser_for(config, source, scorer, extra) -> Parser:
    stage = extra.get("stage", "two")
    if source.get("stage", "default") != "default" and config["stage"] != stage:
        raise CheckFailure(f"model was trained as a {stage}-stage parser, "
                           f"config asks for {config['stage']}-stage")
    return Parser(scorer, stage=stage, decode=config["decode"])


def cmd_parse(config: dict, source: dict) -> int:
    scorer, extra = _load_model(config)
    sentences = read_sentences(_need(config, "input"))
    parser = _parser_for(config, source, scorer, extra)
    keep = [k for k, s in enumerate(sentences) if s]
    trees = parser.parse([sentences[k] for k in keep], batch_size=config["batch_size"])
    lines = [""] * len(sentences)
    for k, tree in zip(keep, trees):
        lines[k] = render_bracketed(tree)
    _write_lines(config["output"], lines)
    return 0


def cmd_evaluate(config: dict) -> int:
    gold = _read_trees(_need(config, "gold"))
    pred = _read_trees(_need(config, "input"))
    if len(gold) != len(pred):
        raise CheckFailure(f"{len(gold)} gold trees but {len(pred)} predicted trees")
    try:
        prf = evalb_score(gold, pred, _eval_params(config))
    except AlignmentError as err:
        raise CheckFailure(f"line {err.index + 1}: words of gold and predicted trees differ")
    print(f"matched {prf.matched} predicted {prf.predicted} gold {prf.gold}")
    print(prf.summary())
    return 0


# -- bench


def _rate(count: int, seconds: float) -> float:
    return count / seconds if count and seconds > 0 else 0.0


def _timed(fn, repeat: int = 1) -> float:
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def benchmark(scorer: Scorer, sentences, stage: str = "two", batch_size: int = 64,
              repeat: int = 3) -> dict:
    """Throughput of the full pipeline and of the decode kernel.

    The decode kernel is timed on precomputed score charts, batched and in a
    per-sentence reference loop, for both Viterbi and MBR decoding.
    """
    n = len(sentences)
    report = {"sentences": n, "batches": 0, "mean_batch": 0.0, "padding": 0.0,
              "pipeline": 0.0, "viterbi": 0.0, "mbr": 0.0, "viterbi_unbatched": 0.0,
              "mbr_unbatched": 0.0, "batch_speedup": 0.0}
    if n == 0:
        return report
    parser = Parser(scorer, stage=stage)
    report["pipeline"] = _rate(n, _timed(lambda: parser.parse(sentences, batch_size=batch_size)))
    order = sorted(range(n), key=lambda k: len(sentences[k]))
    chunks = [order[k:k + batch_size] for k in range(0, n, batch_size)]
    charts = []
    tokens = padded = 0
    for chunk in chunks:
        sents = [sentences[k] for k in chunk]
        spans, labels = scorer.score(sents)
        lengths = np.array([len(s) for s in sents])
        charts.append((spans, labels, lengths))
        tokens += int(lengths.sum())
        padded += len(chunk) * int(lengths.max())
    report.update(batches=len(chunks), mean_batch=n / len(chunks),
                  padding=1.0 - tokens / padded)
    singles = [(s[b:b + 1, :m, :m], l[b:b + 1, :m, :m], ls[b:b + 1])
               for s, l, ls in charts for b, m in enumerate(ls)]
    for mode in ("viterbi", "mbr"):
        def batched():
            for s, l, ls in charts:
                decode_spans(s, l, ls, mode, stage)

        def unbatched():
            for s, l, ls in singles:
                decode_spans(s, l, ls, mode, stage)

        report[mode] = _rate(n, _timed(batched, repeat))
        report[mode + "_unbatched"] = _rate(n, _timed(unbatched, repeat))
    report["batch_speedup"] = report["viterbi"] / report["viterbi_unbatched"]
    return report


def cmd_bench(config: dict, source: dict) -> int:
    scorer, extra = _load_model(config)
    parser = _parser_for(config, source, scorer, extra)
    sentences = [s for s in read_sentences(_need(config, "input")) if s]
    r = benchmark(scorer, sentences, parser.stage, config["batch_size"])
    print(f"sentences {r['sentences']} batches {r['batches']} mean batch {r['mean_batch']:.1f} "
          f"padding {100 * r['padding']:.1f}%")
    print(f"pipeline {r['pipeline']:.1f} sent/s")
    for mode in ("viterbi", "mbr"):
        print(f"decode {mode} batched {r[mode]:.1f} sent/s, unbatched {r[mode + '_unbatched']:.1f} sent/s")
    print(f"batched/unbatched viterbi ratio {r['batch_speedup']:.2f}")
    return 0


# -- selfcheck


@dataclass
class Check:
    name: str
    ok: bool
    detail: str


def _worst(pairs) -> float:
    return max((float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) for a, b in pairs), default=0.0)


def selfcheck(inside: Callable = chart.inside, seed: int = 0, cases: int = 20,
              max_n: int = 8) -> list[Check]:
    """Oracle cross-checks on seeded random charts.

    ``inside`` is the kernel under test for the logZ check; passing a broken
    one is the negative control.
    """
    rng = np.random.default_rng(seed)
    data = [(n, rng.normal(scale=2.0, size=(n, n))) for n in range(2, max_n + 1)
            for _ in range(cases)]
    tol = 1e-9
    checks = []

    worst = _worst((inside(s).logZ[0], oracle.brute_logZ(s, n)) for n, s in data)
    checks.append(Check("logZ", worst <= tol, f"max error {worst:.2e}"))

    worst = _worst((np.triu(chart.marginals(s)[0]), oracle.brute_marginals(s, n)) for n, s in data)
    sums = _worst((np.triu(chart.marginals(s)[0], 1).sum(), n - 1) for n, s in data)
    checks.append(Check("marginals", max(worst, sums) <= tol,
                        f"max error {worst:.2e}, span-sum error {sums:.2e}"))

    bad = 0
    for n, s in data:
        result = chart.cky(s)
        tree, best = oracle.brute_argmax(s, n)
        bad += abs(result.scores[0] - best) > tol or result.trees[0] != tree
    checks.append(Check("cky", bad == 0, f"{bad} of {len(data)} disagree"))

    bad = 0
    for n, s in data:
        tree = chart.mbr_decode(s)[0]
        marg = chart.marginals(s)[0]
        best = max(sum(marg[i, j] for i, j in t) for t in oracle.enumerate_trees(n))
        bad += tree != chart.cky(chart.marginals(s)).trees[0] or \
            abs(sum(marg[i, j] for i, j in tree) - best) > tol
    checks.append(Check("mbr", bad == 0, f"{bad} of {len(data)} disagree"))

    worst = 0.0
    for n, s in data[::cases]:
        gold = oracle.enumerate_trees(n)[0]
        _, adj = crf_bracket_loss(s, gold)
        fd = oracle.finite_diff(lambda x: crf_bracket_loss(x, gold)[0], s)
        upper = np.triu_indices(n, 1)
        worst = max(worst, _worst([(adj[0][upper], fd[upper])]))
    checks.append(Check("crf adjoints", worst <= 1e-5, f"max error {worst:.2e}"))

    checks.append(_gradient_check(seed))
    return checks


def _gradient_check(seed: int) -> Check:
    from treecrf.treebank import LabelVocab

    sents = [["a", "bc", "a", "d"]]
    config = ScorerConfig(word_dim=3, char_dim=2, char_out=2, hidden=2, layers=1, span_dim=3,
                          label_dim=2)
    scorer = Scorer.build(sents, LabelVocab(["X", "Y"]), config, seed=seed)
    rng = np.random.default_rng(seed)
    for k, v in scorer.params.items():
        scorer.params[k] = v + rng.normal(scale=0.3, size=v.shape)
    ws = rng.normal(size=(1, 4, 4))
    wl = rng.normal(size=(1, 4, 4, 2))

    def loss():
        s, l, _ = scorer.forward(sents, train=True, rng=np.random.default_rng(seed))
        return float((s * ws).sum() + (l * wl).sum())

    _, _, tape = scorer.forward(sents, train=True, rng=np.random.default_rng(seed), record=True)
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
    return Check("model gradients", not failed,
                 f"{len(scorer.params)} groups" + (f", failed: {', '.join(failed)}" if failed else ""))


def cmd_selfcheck(config: dict, inside: Callable = chart.inside) -> int:
    start = time.perf_counter()
    checks = selfcheck(inside, seed=config["seed"])
    for c in checks:
        print(f"{'PASS' if c.ok else 'FAIL'} {c.name}: {c.detail}")
    print(f"{sum(c.ok for c in checks)}/{len(checks)} checks passed "
          f"in {time.perf_counter() - start:.1f}s")
    return 0 if all(c.ok for c in checks) else 1


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value settings file")
    for key in ("model", "input", "output", "gold", "train", "dev", "eval-params", "log"):
        common.add_argument(f"--{key}", metavar="PATH")
    for key in ("decode", "stage", "loss", "binarize", "arch"):
        common.add_argument(f"--{key}", choices=CHOICES[key])
    for key in ("seed", "threads", "batch-words", "max-epochs", "patience", "batch-size"):
        common.add_argument(f"--{key}", type=int, metavar="N")
    for key in ("dropout", "lr", "margin", "unk-prob"):
        common.add_argument(f"--{key}", type=float, metavar="X")
    parser = argparse.ArgumentParser(prog="treecrf", description="Two-stage CRF constituency parser.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model from bracketed trees")
    sub.add_parser("parse", parents=[common], help="parse tokenized sentences")
    sub.add_parser("evaluate", parents=[common], help="EVALB-style scoring of --input against --gold")
    sub.add_parser("bench", parents=[common], help="throughput of parsing and decoding")
    sub.add_parser("selfcheck", parents=[common], help="oracle cross-checks")
    return parser


def _limit_threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(n) if n > 0 else None


def main(argv=None, env=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    try:
        config, source = resolve_config(flags, env)
        echo_config(config)
        _limit_threads(config["threads"])
        if args.command == "train":
            return cmd_train(config)
        if args.command == "parse":
            return cmd_parse(config, source)
        if args.command == "evaluate":
            return cmd_evaluate(config)
        if args.command == "bench":
            return cmd_bench(config, source)
        return cmd_selfcheck(config)
    except UsageError as err:
        print(f"treecrf: error: {err}", file=sys.stderr)
        return 2
    except CheckFailure as err:
        print(f"treecrf: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
