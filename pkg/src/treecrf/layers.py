"""Numpy building blocks with hand-written backward passes.

Each ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the output adjoint and the cache and returns the input adjoint plus a
dict of parameter gradients keyed like the parameter dict it was given.
"""

from __future__ import annotations

import numpy as np

LEAKY_SLOPE = 0.1


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def leaky_relu(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


# ---------------------------------------------------------------------------
# LSTM over padded batches


def lstm_forward(x, lengths, Wx, Wh, b):
    """Unidirectional LSTM over ``x`` of shape ``B x T x D``.

    Gate order in the stacked weights is input, forget, cell, output.  After
    the end of a sequence the state is carried over unchanged, so the last
    time step holds the final state of every sequence.
    """
    B, T, _ = x.shape
    H = Wh.shape[0]
    mask = (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(x.dtype)
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    xw = x @ Wx + b
    hs = np.zeros((B, T, H))
    cache = {"x": x, "mask": mask, "h_prev": [], "c_prev": [], "gates": [], "tanh_c": []}
    for t in range(T):
        z = xw[:, t] + h @ Wh
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        m = mask[:, t, None]
        cache["h_prev"].append(h)
        cache["c_prev"].append(c)
        cache["gates"].append((i, f, g, o))
        cache["tanh_c"].append(tc)
        c = m * c_new + (1 - m) * c
        h = m * h_new + (1 - m) * h
        hs[:, t] = h
    cache["Wx"], cache["Wh"] = Wx, Wh
    return hs, cache


def lstm_backward(dhs, cache):
    x, mask = cache["x"], cache["mask"]
    Wx, Wh = cache["Wx"], cache["Wh"]
    B, T, _ = x.shape
    H = Wh.shape[0]
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    dz_all = np.zeros((B, T, 4 * H))
    dWh = np.zeros_like(Wh)
    for t in range(T - 1, -1, -1):
        m = mask[:, t, None]
        i, f, g, o = cache["gates"][t]
        tc = cache["tanh_c"][t]
        dh = dh + dhs[:, t]
        dh_new = m * dh
        dc_new = m * dc + dh_new * o * (1 - tc * tc)
        do = dh_new * tc
        di = dc_new * g
        dg = dc_new * i
        df = dc_new * cache["c_prev"][t]
        dz = np.concatenate([di * i * (1 - i), df * f * (1 - f),
                             dg * (1 - g * g), do * o * (1 - o)], axis=1)
        dz_all[:, t] = dz
        dWh += cache["h_prev"][t].T @ dz
        dh = dz @ Wh.T + (1 - m) * dh
        dc = dc_new * f + (1 - m) * dc
    dx = dz_all @ Wx.T
    dWx = np.einsum("btd,btg->dg", x, dz_all)
    db = dz_all.sum(axis=(0, 1))
    return dx, {"Wx": dWx, "Wh": dWh, "b": db}


def reverse_index(lengths, T: int) -> np.ndarray:
    """Per-row permutation reversing the first ``lengths[b]`` steps; an involution."""
    t = np.arange(T)[None, :]
    lengths = np.asarray(lengths)[:, None]
    return np.where(t < lengths, lengths - 1 - t, t)


def _gather(x, idx):
    return np.take_along_axis(x, idx[..., None], axis=1)


def bilstm_forward(x, lengths, fwd: dict, bwd: dict):
    """Returns forward outputs and backward outputs, both ``B x T x H``."""
    rev = reverse_index(lengths, x.shape[1])
    hf, cf = lstm_forward(x, lengths, fwd["Wx"], fwd["Wh"], fwd["b"])
    hr, cr = lstm_forward(_gather(x, rev), lengths, bwd["Wx"], bwd["Wh"], bwd["b"])
    return (hf, _gather(hr, rev)), (cf, cr, rev)


def bilstm_backward(dhf, dhb, cache):
    cf, cr, rev = cache
    dxf, gf = lstm_backward(dhf, cf)
    dxr, gr = lstm_backward(_gather(dhb, rev), cr)
    return dxf + _gather(dxr, rev), gf, gr


# ---------------------------------------------------------------------------
# dense layers


def mlp_forward(x, W, b):
    pre = x @ W + b
    return leaky_relu(pre), pre


def mlp_backward(dy, x, pre, W):
    dpre = dy * np.where(pre > 0, 1.0, LEAKY_SLOPE)
    flat_x = x.reshape(-1, x.shape[-1])
    flat_d = dpre.reshape(-1, dpre.shape[-1])
    return dpre @ W.T, {"W": flat_x.T @ flat_d, "b": flat_d.sum(0)}


def augment(x):
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def biaffine_forward(left, right, W):
    """``out[b, i, j] = [left_i; 1]^T W right_j`` with ``W`` of shape ``(d+1) x d``."""
    return augment(left) @ W @ right.transpose(0, 2, 1)


def biaffine_backward(dout, left, right, W):
    la = augment(left)
    lw = la @ W                                   # B x N x d
    dright = dout.transpose(0, 2, 1) @ lw
    dlw = dout @ right
    dleft = (dlw @ W.T)[..., :-1]
    dW = np.einsum("bix,biy->xy", la, dlw)
    return dleft, dright, dW


def label_biaffine_forward(left, right, W):
    """``out[b, i, j, l] = [left_i; 1]^T W[l] right_j`` with ``W`` of shape ``L x (d+1) x d``."""
    B, N, _ = left.shape
    L, X, Y = W.shape
    lw = (augment(left).reshape(B * N, X) @ W.transpose(1, 0, 2).reshape(X, L * Y))
    out = lw.reshape(B, N * L, Y) @ right.transpose(0, 2, 1)     # B x (N L) x N
    return out.reshape(B, N, L, N).transpose(0, 1, 3, 2)


def label_biaffine_backward(dout, left, right, W):
    B, N, _ = left.shape
    L, X, Y = W.shape
    la = augment(left)
    lw = (la.reshape(B * N, X) @ W.transpose(1, 0, 2).reshape(X, L * Y)).reshape(B, N * L, Y)
    d = dout.transpose(0, 1, 3, 2).reshape(B, N * L, N)          # [b, (i l), j]
    dright = d.transpose(0, 2, 1) @ lw                            # B x N x Y
    dlw = (d @ right).reshape(B * N, L * Y)                       # [(b i), (l y)]
    dWflat = la.reshape(B * N, X).T @ dlw                         # X x (L Y)
    dW = dWflat.reshape(X, L, Y).transpose(1, 0, 2)
    dleft = (dlw @ W.transpose(1, 0, 2).reshape(X, L * Y).T).reshape(B, N, X)[..., :-1]
    return dleft, dright, dW
