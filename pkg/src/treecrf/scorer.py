"""Span and label scoring network.

Pipeline per batch of tokenized sentences::

    word embedding (+) char BiLSTM  ->  paired input dropout
      -> stacked BiLSTM with per-sequence shared dropout masks
      -> fencepost states h_i = f_i (+) b_{i+1}
      -> four leaky-ReLU projections (left/right x bracket/label)
      -> biaffine span scores  B x N x N
         and per-label biaffine scores  B x N x N x L

Each stage is a pair of functions: ``*_forward`` returning ``(out, cache)``
and ``*_backward`` consuming the cache.  :class:`Scorer` wires them
together and owns the parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from treecrf import layers

PAD = "<pad>"
UNK = "<unk>"


@dataclass
class ScorerConfig:
    word_dim: int = 100
    char_dim: int = 50
    char_out: int = 100
    hidden: int = 400
    layers: int = 3
    span_dim: int = 500
    label_dim: int = 100
    dropout: float = 0.33
    arch: str = "biaffine"  # or "minus"
    minus_hidden: int = 250

    def __post_init__(self):
        if self.char_out % 2:
            raise ValueError("char_out must be even (two directions)")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.arch not in ("biaffine", "minus"):
            raise ValueError(f"unknown scorer architecture {self.arch!r}")

    @property
    def input_dim(self) -> int:
        return self.word_dim + self.char_out

    @property
    def context_dim(self) -> int:
        return 2 * self.hidden if self.layers else self.input_dim


class Vocab:
    """String <-> index map with reserved padding (0) and unknown (1) entries."""

    def __init__(self, items: Sequence[str] = ()):
        self.items = [PAD, UNK]
        self.index = {PAD: 0, UNK: 1}
        for item in items:
            if item not in self.index:
                self.index[item] = len(self.items)
                self.items.append(item)

    def __len__(self):
        return len(self.items)

    def __call__(self, item: str) -> int:
        return self.index.get(item, 1)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.items == other.items

    @classmethod
    def from_items(cls, items: Sequence[str]) -> "Vocab":
        if list(items[:2]) != [PAD, UNK]:
            raise ValueError("vocabulary must start with the padding and unknown entries")
        return cls(items[2:])


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _orthogonal(rng, n, m):
    a = rng.normal(size=(max(n, m), min(n, m)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q if n >= m else q.T


def _lstm_params(rng, prefix, d_in, h):
    Wh = np.concatenate([_orthogonal(rng, h, h) for _ in range(4)], axis=1)
    b = np.zeros(4 * h)
    b[h:2 * h] = 1.0  # forget gate
    return {f"{prefix}.Wx": _uniform(rng, (d_in, 4 * h), d_in), f"{prefix}.Wh": Wh,
            f"{prefix}.b": b}


def init_params(config: ScorerConfig, n_words: int, n_chars: int, n_labels: int,
                seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh parameters: fan-in scaled uniform, orthogonal recurrences, zero biaffines."""
    rng = np.random.default_rng(seed)
    c = config
    hc = c.char_out // 2
    p = {
        "word_emb": _uniform(rng, (n_words, c.word_dim), c.word_dim),
        "char_emb": _uniform(rng, (n_chars, c.char_dim), c.char_dim),
    }
    p["word_emb"][0] = 0.0
    p["char_emb"][0] = 0.0
    p.update(_lstm_params(rng, "char.fwd", c.char_dim, hc))
    p.update(_lstm_params(rng, "char.bwd", c.char_dim, hc))
    d_in = c.input_dim
    for k in range(c.layers):
        p.update(_lstm_params(rng, f"lstm{k}.fwd", d_in, c.hidden))
        p.update(_lstm_params(rng, f"lstm{k}.bwd", d_in, c.hidden))
        d_in = 2 * c.hidden
    dh = c.context_dim
    for name, dim in (("span_l", c.span_dim), ("span_r", c.span_dim),
                      ("label_l", c.label_dim), ("label_r", c.label_dim)):
        p[f"mlp.{name}.W"] = _uniform(rng, (dh, dim), dh)
        p[f"mlp.{name}.b"] = np.zeros(dim)
    p["span_W"] = np.zeros((c.span_dim + 1, c.span_dim))
    p["label_W"] = np.zeros((n_labels, c.label_dim + 1, c.label_dim))
    if c.arch == "minus":
        p["minus.W1"] = _uniform(rng, (dh, c.minus_hidden), dh)
        p["minus.b1"] = np.zeros(c.minus_hidden)
        p["minus.w2"] = _uniform(rng, (c.minus_hidden,), c.minus_hidden)
        p["minus.b2"] = np.zeros(())
    return p


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _prefixed(grads, prefix):
    return {f"{prefix}.{k}": v for k, v in grads.items()}


def shared_mask(rng, shape, p):
    """Inverted-dropout mask; pass ``(B, 1, D)`` to reuse it at every time step."""
    if rng is None or p == 0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


# ---------------------------------------------------------------------------
# stages


def char_encode(words: Sequence[str], params, chars: Vocab):
    """BiLSTM over the characters of each word: final forward ⊕ final backward state."""
    if any(len(w) == 0 for w in words):
        raise ValueError("cannot encode an empty word")
    T = max(len(w) for w in words)
    ids = np.zeros((len(words), T), dtype=np.int64)
    for k, w in enumerate(words):
        ids[k, :len(w)] = [chars(ch) for ch in w]
    lengths = np.array([len(w) for w in words])
    x = params["char_emb"][ids]
    (hf, hb), cache = layers.bilstm_forward(x, lengths, _sub(params, "char.fwd"),
                                            _sub(params, "char.bwd"))
    # carried-over states: the last step holds the final forward state, and
    # the reversed run ends at position 0 of the original order
    out = np.concatenate([hf[:, -1], hb[:, 0]], axis=1)
    return out, (ids, lengths, hf.shape, cache)


def char_encode_backward(dout, cache, params):
    ids, lengths, shape, lcache = cache
    H = shape[-1]
    dhf = np.zeros(shape)
    dhb = np.zeros(shape)
    dhf[:, -1] = dout[:, :H]
    dhb[:, 0] = dout[:, H:]
    dx, gf, gb = layers.bilstm_backward(dhf, dhb, lcache)
    dchar = np.zeros_like(params["char_emb"])
    np.add.at(dchar, ids, dx)
    grads = {"char_emb": dchar}
    grads.update(_prefixed(gf, "char.fwd"))
    grads.update(_prefixed(gb, "char.bwd"))
    return grads


def paired_dropout_masks(rng, shape, p):
    """Per-token keep flags for the word and char halves and their scale.

    A half is kept or dropped as a whole; a lone survivor is doubled.
    """
    keep_w = (rng.random(shape) >= p).astype(float)
    keep_c = (rng.random(shape) >= p).astype(float)
    scale = 2.0 / np.maximum(keep_w + keep_c, 1.0)
    return keep_w * scale, keep_c * scale


def embed(sentences: Sequence[Sequence[str]], params, words: Vocab, chars: Vocab,
          train: bool = False, rng=None, dropout: float = 0.33, unk_mask=None):
    """Input matrix ``B x T x (word_dim + char_out)``, zero on padding.

    Where ``unk_mask`` is set the word half uses the unknown-word row; the
    char half still sees the real spelling.
    """
    B = len(sentences)
    lengths = np.array([len(s) for s in sentences])
    T = int(lengths.max())
    ids = np.zeros((B, T), dtype=np.int64)
    uniq: dict[str, int] = {}
    slot = np.zeros((B, T), dtype=np.int64)
    for b, sent in enumerate(sentences):
        for t, w in enumerate(sent):
            ids[b, t] = words(w)
            slot[b, t] = uniq.setdefault(w, len(uniq))
    if unk_mask is not None:
        ids = np.where(np.asarray(unk_mask)[:, :T], 1, ids)
    char_vecs, char_cache = char_encode(list(uniq), params, chars)
    real = (np.arange(T)[None, :] < lengths[:, None])[..., None]
    wvec = params["word_emb"][ids] * real
    cvec = char_vecs[slot] * real
    mw = mc = None
    if train and rng is not None and dropout > 0:
        mw, mc = paired_dropout_masks(rng, (B, T), dropout)
        wvec = wvec * mw[..., None]
        cvec = cvec * mc[..., None]
    x = np.concatenate([wvec, cvec], axis=-1)
    return x, (ids, slot, real, mw, mc, len(uniq), char_cache)


def embed_backward(dx, cache, params, word_dim):
    ids, slot, real, mw, mc, n_uniq, char_cache = cache
    dw = dx[..., :word_dim] * real
    dc = dx[..., word_dim:] * real
    if mw is not None:
        dw = dw * mw[..., None]
        dc = dc * mc[..., None]
    dword = np.zeros_like(params["word_emb"])
    np.add.at(dword, ids, dw)
    dchar_vecs = np.zeros((n_uniq, dc.shape[-1]))
    np.add.at(dchar_vecs, slot, dc)
    grads = char_encode_backward(dchar_vecs, char_cache, params)
    grads["word_emb"] = dword
    return grads


def encode_context(x, lengths, params, n_layers: int, train: bool = False, rng=None,
                   dropout: float = 0.33):
    """Stacked BiLSTM and fencepost composition ``h_i = f_i ⊕ b_{i+1}``.

    ``b_n`` is the initial (zero) backward state.  Dropout masks are drawn
    once per sequence and layer and applied at every time step.  With zero
    layers the inputs are passed through unchanged.
    """
    lengths = np.asarray(lengths)
    caches = []
    for k in range(n_layers):
        (hf, hb), c = layers.bilstm_forward(x, lengths, _sub(params, f"lstm{k}.fwd"),
                                            _sub(params, f"lstm{k}.bwd"))
        out = np.concatenate([hf, hb], axis=-1)
        mask = shared_mask(rng if train else None, (x.shape[0], 1, out.shape[-1]), dropout)
        if mask is not None:
            out = out * mask
        caches.append((c, mask))
        x = out
    if n_layers == 0:
        return x, (caches, None)
    H = x.shape[-1] // 2
    f = x[..., :H]
    b = x[..., H:]
    shifted = np.zeros_like(b)
    shifted[:, :-1] = b[:, 1:]
    # b_{i+1} for i = n-1 is the initial state, not a padded step's carry-over
    last = np.arange(x.shape[1])[None, :] == (lengths - 1)[:, None]
    shifted[last] = 0.0
    h = np.concatenate([f, shifted], axis=-1)
    return h, (caches, last)


def encode_context_backward(dh, cache, params):
    caches, last = cache
    grads = {}
    if not caches:
        return dh, grads
    H = dh.shape[-1] // 2
    dshift = dh[..., H:].copy()
    dshift[last] = 0.0
    dout = np.zeros_like(dh)
    dout[..., :H] = dh[..., :H]
    dout[:, 1:, H:] = dshift[:, :-1]
    for k in range(len(caches) - 1, -1, -1):
        c, mask = caches[k]
        if mask is not None:
            dout = dout * mask
        Hk = dout.shape[-1] // 2
        dout, gf, gb = layers.bilstm_backward(dout[..., :Hk], dout[..., Hk:], c)
        grads.update(_prefixed(gf, f"lstm{k}.fwd"))
        grads.update(_prefixed(gb, f"lstm{k}.bwd"))
    return dout, grads


REPS = ("span_l", "span_r", "label_l", "label_r")


def boundary_project(h, params, train: bool = False, rng=None, dropout: float = 0.33):
    """Four independent leaky-ReLU projections of the fencepost states."""
    reps, caches = {}, {}
    for name in REPS:
        y, pre = layers.mlp_forward(h, params[f"mlp.{name}.W"], params[f"mlp.{name}.b"])
        mask = shared_mask(rng if train else None, (h.shape[0], 1, y.shape[-1]), dropout)
        if mask is not None:
            y = y * mask
        reps[name] = y
        caches[name] = (pre, mask)
    return reps, (h, caches)


def boundary_project_backward(dreps, cache, params):
    h, caches = cache
    dh = np.zeros_like(h)
    grads = {}
    for name in REPS:
        pre, mask = caches[name]
        dy = dreps.get(name)
        if dy is None:
            dy = np.zeros(pre.shape)
        if mask is not None:
            dy = dy * mask
        dx, g = layers.mlp_backward(dy, h, pre, params[f"mlp.{name}.W"])
        dh += dx
        grads.update(_prefixed(g, f"mlp.{name}"))
    return dh, grads


def span_scores(reps, params):
    return layers.biaffine_forward(reps["span_l"], reps["span_r"], params["span_W"])


def label_scores(reps, params):
    return layers.label_biaffine_forward(reps["label_l"], reps["label_r"], params["label_W"])


def minus_span_scores(h, params):
    """``s(i, j) = w2 . leaky(W1 (h_i - h_j) + b1) + b2``, the minus-feature baseline."""
    diff = h[:, :, None, :] - h[:, None, :, :]
    hid, pre = layers.mlp_forward(diff, params["minus.W1"], params["minus.b1"])
    return hid @ params["minus.w2"] + params["minus.b2"], (diff, hid, pre)


def minus_span_scores_backward(dout, cache, params):
    diff, hid, pre = cache
    dhid = dout[..., None] * params["minus.w2"]
    ddiff, g = layers.mlp_backward(dhid, diff, pre, params["minus.W1"])
    grads = {"minus.W1": g["W"], "minus.b1": g["b"],
             "minus.w2": np.einsum("bijh,bij->h", hid, dout), "minus.b2": np.asarray(dout.sum())}
    dh = ddiff.sum(axis=2) - ddiff.sum(axis=1)
    return dh, grads


# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Activations recorded by a forward pass, consumed by :meth:`Scorer.backward`."""

    lengths: np.ndarray
    embed: tuple
    context: tuple
    project: tuple
    reps: dict
    minus: tuple | None = None


class Scorer:
    """Owns the parameters and vocabularies; maps sentences to score charts."""

    def __init__(self, config: ScorerConfig, words: Vocab, chars: Vocab, labels,
                 params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.words = words
        self.chars = chars
        self.labels = labels
        self.params = params if params is not None else init_params(
            config, len(words), len(chars), len(labels), seed)

    @classmethod
    def build(cls, sentences: Sequence[Sequence[str]], labels, config: ScorerConfig | None = None,
              seed: int = 0) -> "Scorer":
        config = config or ScorerConfig()
        words = Vocab([w for s in sentences for w in s])
        chars = Vocab([ch for s in sentences for w in s for ch in w])
        return cls(config, words, chars, labels, seed=seed)

    def config_dict(self) -> dict:
        return asdict(self.config)

    def forward(self, sentences: Sequence[Sequence[str]], train: bool = False, rng=None,
                record: bool = False, unk_mask=None):
        """Span chart ``B x N x N``, label grid ``B x N x N x L`` and (if recording) a tape."""
        c = self.config
        p = self.params
        if train and rng is None and c.dropout > 0:
            raise ValueError("train mode needs a random generator for dropout")
        lengths = np.array([len(s) for s in sentences])
        if (lengths < 1).any():
            raise ValueError("empty sentence")
        x, ecache = embed(sentences, p, self.words, self.chars, train, rng, c.dropout, unk_mask)
        h, ccache = encode_context(x, lengths, p, c.layers, train, rng, c.dropout)
        reps, pcache = boundary_project(h, p, train, rng, c.dropout)
        mcache = None
        if c.arch == "minus":
            spans, mcache = minus_span_scores(h, p)
        else:
            spans = span_scores(reps, p)
        labels = label_scores(reps, p)
        tape = Tape(lengths, ecache, ccache, pcache, reps, mcache) if record else None
        return spans, labels, tape

    def score(self, sentences):
        spans, labels, _ = self.forward(sentences)
        return spans, labels

    def backward(self, tape: Tape | None, d_span=None, d_label=None) -> dict[str, np.ndarray]:
        """Parameter gradients given adjoints of the span chart and label grid."""
        if tape is None:
            raise RuntimeError("backward needs the tape of a recorded forward pass")
        p = self.params
        reps = tape.reps
        grads: dict[str, np.ndarray] = {}
        dreps = {}
        h = tape.project[0]
        dh = np.zeros_like(h)
        if d_span is not None:
            if self.config.arch == "minus":
                dmh, g = minus_span_scores_backward(d_span, tape.minus, p)
                dh += dmh
                grads.update(g)
            else:
                dl, dr, dW = layers.biaffine_backward(d_span, reps["span_l"], reps["span_r"],
                                                      p["span_W"])
                dreps["span_l"], dreps["span_r"] = dl, dr
                grads["span_W"] = dW
        if d_label is not None:
            dl, dr, dW = layers.label_biaffine_backward(d_label, reps["label_l"],
                                                        reps["label_r"], p["label_W"])
            dreps["label_l"], dreps["label_r"] = dl, dr
            grads["label_W"] = dW
        dproj, g = boundary_project_backward(dreps, tape.project, p)
        grads.update(g)
        dh = dh + dproj
        dx, g = encode_context_backward(dh, tape.context, p)
        grads.update(g)
        grads.update(embed_backward(dx, tape.embed, p, self.config.word_dim))
        for k, v in p.items():
            if k not in grads:
                grads[k] = np.zeros_like(v)
        return grads
