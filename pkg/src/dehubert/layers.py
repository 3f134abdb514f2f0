"""Forward/backward pairs for the network building blocks.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns the input gradient
plus parameter gradients. Everything is float64 and time-major
(``T x channels``).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_forward(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, (x, cdf)


def gelu_backward(dy, cache):
    x, cdf = cache
    return dy * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x))


def linear_forward(x, W, b):
    return x @ W + b, x


def linear_backward(dy, x, W):
    """Returns ``(dx, dW, db)``."""
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


def conv1d_forward(x, W, b, stride):
    """Strided valid convolution. ``x``: ``L x Cin``, ``W``: ``Cout x Cin x k``."""
    cout, cin, k = W.shape
    if x.shape[0] < k:
        raise ValueError(f"input of {x.shape[0]} steps is shorter than kernel {k}")
    cols = sliding_window_view(x, k, axis=0)[::stride]  # Lout x Cin x k
    cols = np.ascontiguousarray(cols).reshape(cols.shape[0], cin * k)
    y = cols @ W.reshape(cout, cin * k).T + b
    return y, (cols, x.shape[0], stride)


def conv1d_backward(dy, cache, W, need_dx=True):
    cols, length, stride = cache
    cout, cin, k = W.shape
    dW = (dy.T @ cols).reshape(W.shape)
    db = dy.sum(axis=0)
    if not need_dx:
        return None, dW, db
    dcols = (dy @ W.reshape(cout, cin * k)).reshape(-1, cin, k)
    n_out = dcols.shape[0]
    dx = np.zeros((length, cin))
    span = stride * (n_out - 1) + 1
    for j in range(k):
        dx[j:j + span:stride] += dcols[:, :, j]
    return dx, dW, db


def layer_norm_forward(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def layer_norm_backward(dy, cache, g):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def softmax(s, axis=-1):
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_inplace(s):
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def attention_forward(x, Wqkv, bqkv, Wo, bo, n_heads):
    """Multi-head self-attention over one sequence, ``x``: ``T x d``."""
    T, d = x.shape
    dh = d // n_heads
    qkv = x @ Wqkv + bqkv
    q, k, v = (qkv[:, i * d:(i + 1) * d].reshape(T, n_heads, dh).transpose(1, 0, 2) for i in range(3))
    scale = 1.0 / np.sqrt(dh)
    qs = q * scale
    p = _softmax_inplace(qs @ k.transpose(0, 2, 1))
    oh = p @ v
    o = oh.transpose(1, 0, 2).reshape(T, d)
    return o @ Wo + bo, (x, qs, k, v, p, oh, o, scale)


def attention_backward(dy, cache, Wqkv, Wo):
    x, qs, k, v, p, oh, o, scale = cache
    H, T, dh = qs.shape
    d = H * dh
    dWo = o.T @ dy
    dbo = dy.sum(axis=0)
    do = (dy @ Wo.T).reshape(T, H, dh).transpose(1, 0, 2)
    dv = p.transpose(0, 2, 1) @ do
    # sum_j dp_ij p_ij == do_i . o_i, which avoids a T x T pass
    rowdot = np.einsum("htd,htd->ht", do, oh)
    ds = do @ v.transpose(0, 2, 1)
    ds -= rowdot[:, :, None]
    ds *= p
    dq = (ds @ k) * scale
    dk = ds.transpose(0, 2, 1) @ qs
    dqkv = np.concatenate([t.transpose(1, 0, 2).reshape(T, d) for t in (dq, dk, dv)], axis=1)
    dx = dqkv @ Wqkv.T
    return dx, x.T @ dqkv, dqkv.sum(axis=0), dWo, dbo


def cross_entropy(logits, targets):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(n), targets] - logz
    loss = -logp.mean()
    grad = np.exp(shifted - logz[:, None])
    grad[np.arange(n), targets] -= 1.0
    return loss, grad / n


def sinusoidal_positions(T, d):
    pos = np.arange(T)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    out = np.zeros((T, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : d // 2])
    return out
