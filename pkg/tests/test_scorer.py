import numpy as np
import pytest

from treecrf import layers, modelio
from treecrf.oracle import finite_diff
from treecrf.scorer import (
    Scorer,
    ScorerConfig,
    Vocab,
    boundary_project,
    boundary_project_backward,
    char_encode,
    embed,
    encode_context,
    init_params,
    _sub,
    label_scores,
    minus_span_scores,
    span_scores,
)
from treecrf.treebank import LabelVocab

SENTS = [["the", "cat", "sat", "down"], ["a", "dog"]]
TINY = ScorerConfig(word_dim=4, char_dim=3, char_out=4, hidden=3, layers=2, span_dim=5,
                    label_dim=3, minus_hidden=4)


def tiny_scorer(arch="biaffine", layers=2, seed=1, jitter=0.3, n_labels=3):
    cfg = ScorerConfig(**{**TINY.__dict__, "arch": arch, "layers": layers})
    labels = LabelVocab([f"L{k}" for k in range(n_labels)])
    sc = Scorer.build(SENTS, labels, cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for k, v in sc.params.items():
        sc.params[k] = v + rng.normal(scale=jitter, size=v.shape)
    return sc


def default_params():
    words = Vocab(["the", "cat"])
    chars = Vocab(list("thecat"))
    return ScorerConfig(), words, chars, init_params(ScorerConfig(), len(words), len(chars), 5)


# ---------------------------------------------------------------------------
# char encoder and embeddings


def test_char_encode_shape_and_purity():
    config, words, chars, params = default_params()
    out, _ = char_encode(["a", "cat", "cat"], params, chars)
    assert out.shape == (3, 100)
    assert np.isfinite(out).all()
    np.testing.assert_array_equal(out[1], out[2])


def test_char_encode_zero_params():
    # zero weights: gates are 1/2, the candidate is tanh(0) = 0, so c and h stay 0
    config, words, chars, params = default_params()
    params = {k: np.zeros_like(v) for k, v in params.items()}
    out, _ = char_encode(["cat", "x"], params, chars)
    assert np.all(out == 0)


def test_char_encode_empty_word():
    config, words, chars, params = default_params()
    with pytest.raises(ValueError):
        char_encode([""], params, chars)


def test_embed_eval_is_concatenation():
    sc = tiny_scorer()
    x, _ = embed(SENTS, sc.params, sc.words, sc.chars, train=False)
    chars, _ = char_encode(["cat"], sc.params, sc.chars)
    row = x[0, 1]
    np.testing.assert_array_equal(row[:4], sc.params["word_emb"][sc.words("cat")])
    np.testing.assert_array_equal(row[4:], chars[0])
    assert np.all(x[1, 2:] == 0)


def test_embed_unknown_word_uses_reserved_index():
    sc = tiny_scorer()
    assert sc.words("zebra") == 1
    x, _ = embed([["zebra"]], sc.params, sc.words, sc.chars)
    np.testing.assert_array_equal(x[0, 0, :4], sc.params["word_emb"][1])


def test_paired_dropout_rows():
    sc = tiny_scorer()
    sents = [["cat"]] * 400
    clean, _ = embed(sents, sc.params, sc.words, sc.chars)
    x, cache = embed(sents, sc.params, sc.words, sc.chars, train=True,
                     rng=np.random.default_rng(0), dropout=0.33)
    w, c = clean[0, 0, :4], clean[0, 0, 4:]
    kinds = set()
    for row in x[:, 0]:
        if np.allclose(row[:4], w) and np.allclose(row[4:], c):
            kinds.add("both")
        elif np.allclose(row[:4], 0) and np.allclose(row[4:], 2 * c):
            kinds.add("char")
        elif np.allclose(row[:4], 2 * w) and np.allclose(row[4:], 0):
            kinds.add("word")
        elif np.allclose(row, 0):
            kinds.add("none")
        else:
            pytest.fail(f"unexpected dropout row {row}")
    assert kinds == {"both", "char", "word", "none"}


def test_paired_dropout_expectation():
    # per half: P(keep both) * 1 + P(keep only this half) * 2 = (1-p)^2 + 2p(1-p) = 1 - p^2
    sc = tiny_scorer()
    p = 0.33
    draws = 100_000
    clean, _ = embed([["cat"]], sc.params, sc.words, sc.chars)
    x, _ = embed([["cat"]] * draws, sc.params, sc.words, sc.chars, train=True,
                 rng=np.random.default_rng(1), dropout=p)
    mean = x[:, 0].mean(0)
    # keep-scale of a half is 1 or 2 with the probabilities above: sd <= 0.75
    tol = 5 * 0.75 / np.sqrt(draws) * np.abs(clean[0, 0]) + 1e-12
    assert np.all(np.abs(mean - (1 - p * p) * clean[0, 0]) <= tol)


# ---------------------------------------------------------------------------
# context encoder


def test_encode_context_single_word():
    sc = tiny_scorer()
    x, _ = embed([["cat"]], sc.params, sc.words, sc.chars)
    h, _ = encode_context(x, [1], sc.params, 2)
    assert h.shape == (1, 1, 6)
    assert np.isfinite(h).all()
    # b_1 is the initial backward state
    assert np.all(h[0, 0, 3:] == 0)


def test_encode_context_fencepost():
    sc = tiny_scorer(layers=1)
    x, _ = embed(SENTS[:1], sc.params, sc.words, sc.chars)
    h, _ = encode_context(x, [4], sc.params, 1)
    (hf, hb), _ = layers.bilstm_forward(x, [4], _sub(sc.params, "lstm0.fwd"),
                                        _sub(sc.params, "lstm0.bwd"))
    np.testing.assert_array_equal(h[0, :, :3], hf[0])
    np.testing.assert_array_equal(h[0, :3, 3:], hb[0, 1:])


def test_encode_context_eval_pure():
    sc = tiny_scorer()
    a = sc.score(SENTS)
    b = sc.score(SENTS)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_shared_dropout_mask_across_timesteps():
    sc = tiny_scorer()
    x, _ = embed(SENTS, sc.params, sc.words, sc.chars)
    _, (caches, _) = encode_context(x, [4, 2], sc.params, 2, train=True,
                                    rng=np.random.default_rng(3), dropout=0.5)
    for _, mask in caches:
        assert mask.shape == (2, 1, 6)
    # a dropped forward unit is zero at every step of the sentence
    h, (caches, _) = encode_context(x, [4, 2], sc.params, 1, train=True,
                                    rng=np.random.default_rng(3), dropout=0.5)
    mask = caches[0][1][0, 0]
    dead = np.where(mask[:3] == 0)[0]
    assert len(dead) > 0
    assert np.all(h[0, :, dead] == 0)
    assert np.all(h[0, :, np.where(mask[:3] > 0)[0]] != 0)


# ---------------------------------------------------------------------------
# projections and biaffine scores


def test_boundary_project_zero_and_shapes():
    config, words, chars, params = default_params()
    h = np.random.default_rng(0).normal(size=(1, 3, 800))
    reps, _ = boundary_project(h, params)
    assert [reps[k].shape for k in ("span_l", "span_r", "label_l", "label_r")] == \
        [(1, 3, 500), (1, 3, 500), (1, 3, 100), (1, 3, 100)]
    zero = {k: np.zeros_like(v) for k, v in params.items()}
    reps, _ = boundary_project(h, zero)
    assert all(np.all(r == 0) for r in reps.values())


def test_boundary_project_gradient():
    sc = tiny_scorer()
    h = np.random.default_rng(0).normal(size=(2, 4, 6))
    weights = {k: np.random.default_rng(len(k)).normal(size=(2, 4, 5 if "span" in k else 3))
               for k in ("span_l", "span_r", "label_l", "label_r")}

    def f(params):
        reps, _ = boundary_project(h, params)
        return sum(float((reps[k] * weights[k]).sum()) for k in weights)

    reps, cache = boundary_project(h, sc.params)
    _, grads = boundary_project_backward(weights, cache, sc.params)
    for name in ("mlp.span_l.W", "mlp.label_r.b"):
        def g(x, name=name):
            return f({**sc.params, name: x})
        np.testing.assert_allclose(grads[name], finite_diff(g, sc.params[name]), atol=1e-5)


def test_span_scores_zero_and_hand_example():
    reps = {"span_l": np.array([[[1.0, 0.0]]]), "span_r": np.array([[[0.0, 1.0]]])}
    W = np.zeros((3, 2))
    assert span_scores(reps, {"span_W": W})[0, 0, 0] == 0
    W[0, 1] = 3.0
    assert span_scores(reps, {"span_W": W})[0, 0, 0] == 3.0


def test_span_scores_match_naive():
    rng = np.random.default_rng(0)
    reps = {"span_l": rng.normal(size=(2, 5, 4)), "span_r": rng.normal(size=(2, 5, 4))}
    W = rng.normal(size=(5, 4))
    out = span_scores(reps, {"span_W": W})
    for b in range(2):
        for i in range(5):
            for j in range(5):
                ref = np.append(reps["span_l"][b, i], 1.0) @ W @ reps["span_r"][b, j]
                assert abs(out[b, i, j] - ref) < 1e-12


def test_label_scores_match_naive_and_span_scores():
    rng = np.random.default_rng(1)
    reps = {"label_l": rng.normal(size=(2, 4, 3)), "label_r": rng.normal(size=(2, 4, 3))}
    W = rng.normal(size=(3, 4, 3))
    out = label_scores(reps, {"label_W": W})
    for b in range(2):
        for i in range(4):
            for j in range(4):
                for l in range(3):
                    ref = np.append(reps["label_l"][b, i], 1.0) @ W[l] @ reps["label_r"][b, j]
                    assert abs(out[b, i, j, l] - ref) < 1e-12
    one = label_scores(reps, {"label_W": W[:1]})[..., 0]
    same = span_scores({"span_l": reps["label_l"], "span_r": reps["label_r"]}, {"span_W": W[0]})
    np.testing.assert_allclose(one, same, atol=1e-12)


def test_zero_label_weights_give_uniform_distribution():
    rng = np.random.default_rng(1)
    reps = {"label_l": rng.normal(size=(1, 3, 3)), "label_r": rng.normal(size=(1, 3, 3))}
    out = label_scores(reps, {"label_W": np.zeros((4, 4, 3))})
    p = np.exp(out) / np.exp(out).sum(-1, keepdims=True)
    np.testing.assert_allclose(p, 0.25)


def test_minus_span_scores():
    rng = np.random.default_rng(2)
    params = {"minus.W1": rng.normal(size=(4, 3)), "minus.b1": rng.normal(size=3),
              "minus.w2": rng.normal(size=3), "minus.b2": np.asarray(0.5)}
    h = rng.normal(size=(1, 4, 4))
    h[0, 2] = h[0, 0]
    out, _ = minus_span_scores(h, params)
    const = layers.leaky_relu(params["minus.b1"]) @ params["minus.w2"] + 0.5
    assert out[0, 0, 2] == pytest.approx(const) and out[0, 1, 1] == pytest.approx(const)
    for i in range(4):
        for j in range(4):
            ref = layers.leaky_relu((h[0, i] - h[0, j]) @ params["minus.W1"] + params["minus.b1"]) \
                @ params["minus.w2"] + 0.5
            assert abs(out[0, i, j] - ref) < 1e-12
    zero = {k: np.zeros_like(v) for k, v in params.items()}
    assert np.all(minus_span_scores(h, zero)[0] == 0)


# ---------------------------------------------------------------------------
# backward


def test_backward_requires_tape():
    sc = tiny_scorer()
    with pytest.raises(RuntimeError):
        sc.backward(None, np.zeros((2, 4, 4)))


def test_zero_adjoints_give_zero_gradients():
    sc = tiny_scorer()
    s, l, tape = sc.forward(SENTS, record=True)
    grads = sc.backward(tape, np.zeros_like(s), np.zeros_like(l))
    assert set(grads) == set(sc.params)
    assert all(np.all(g == 0) for g in grads.values())


def test_single_adjoint_reaches_only_its_words():
    sc = tiny_scorer(layers=0)
    s, l, tape = sc.forward(SENTS[:1], record=True)
    d = np.zeros_like(s)
    d[0, 0, 2] = 1.0
    grads = sc.backward(tape, d, None)
    touched = set(np.nonzero(np.abs(grads["word_emb"]).sum(1))[0])
    assert touched == {sc.words("the"), sc.words("sat")}
    assert np.all(grads["label_W"] == 0)


@pytest.mark.parametrize("arch", ["biaffine", "minus"])
@pytest.mark.parametrize("train", [False, True])
def test_full_model_gradient_check(arch, train):
    sc = tiny_scorer(arch=arch)
    rng = np.random.default_rng(7)
    ws = rng.normal(size=(2, 4, 4))
    wl = rng.normal(size=(2, 4, 4, 3))

    def loss(record=False):
        s, l, tape = sc.forward(SENTS, train=train, rng=np.random.default_rng(5), record=record)
        return float((s * ws).sum() + (l * wl).sum()), tape

    _, tape = loss(True)
    grads = sc.backward(tape, ws, wl)
    for name, value in sc.params.items():
        def f(x, name=name):
            old = sc.params[name]
            sc.params[name] = x
            try:
                return loss()[0]
            finally:
                sc.params[name] = old
        fd = finite_diff(f, value.copy(), 1e-4)
        tol = np.maximum(1e-4, 1e-3 * np.abs(fd))
        assert np.all(np.abs(grads[name] - fd) <= tol), name


# ---------------------------------------------------------------------------
# model files


def test_model_file_round_trip(tmp_path):
    sc = tiny_scorer()
    path = tmp_path / "m.bin"
    modelio.save(path, sc, extra={"stage": "two"})
    loaded, extra = modelio.load(path)
    assert extra == {"stage": "two"}
    assert loaded.words == sc.words and loaded.labels == sc.labels
    for k in sc.params:
        np.testing.assert_array_equal(loaded.params[k], sc.params[k])
    np.testing.assert_array_equal(loaded.score(SENTS)[0], sc.score(SENTS)[0])


def test_model_file_rejects_bad_input(tmp_path):
    sc = tiny_scorer()
    path = tmp_path / "m.bin"
    modelio.save(path, sc)
    data = bytearray(path.read_bytes())
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTAMODEL" + bytes(data[9:]))
    with pytest.raises(modelio.ModelFileError):
        modelio.load(bad)
    data[8] = 99
    bad.write_bytes(bytes(data))
    with pytest.raises(modelio.ModelFileError, match="version"):
        modelio.load(bad)
    sc.params["span_W"] = np.zeros((2, 2))
    modelio.save(bad, sc)
    with pytest.raises(modelio.ModelFileError, match="span_W"):
        modelio.load(bad)


def test_unk_mask_swaps_only_the_word_half():
    sc = tiny_scorer()
    x, _ = embed(SENTS, sc.params, sc.words, sc.chars)
    mask = np.zeros((2, 4), dtype=bool)
    mask[0, 1] = True
    y, _ = embed(SENTS, sc.params, sc.words, sc.chars, unk_mask=mask)
    np.testing.assert_array_equal(y[0, 1, :4], sc.params["word_emb"][1])
    np.testing.assert_array_equal(y[0, 1, 4:], x[0, 1, 4:])
    np.testing.assert_array_equal(np.delete(y[0], 1, 0), np.delete(x[0], 1, 0))
