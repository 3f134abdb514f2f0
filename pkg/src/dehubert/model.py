"""Desk-scale HuBERT-style encoder with the two correlation projectors.

The network is a strided convolutional front end producing frame features
``X``, a pre-norm transformer producing bottleneck features ``Z``, an affine
code-prediction head, and two affine projection blocks: one shared by both
noisy branches (cross-correlation) and one applied to ``Z``
(self-correlation). Parameters live in a flat ``dict[str, ndarray]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .audio import Waveform
from .features import FrameFeatures, num_frames
from .units import CodeSequence


class ModelError(Exception):
    pass


class EmptyMaskError(ModelError):
    """No frame was masked; the caller should draw a new mask."""


@dataclass(frozen=True)
class ModelConfig:
    conv_layers: tuple[tuple[int, int, int], ...] = ((32, 394, 2), (64, 4, 2))
    d_model: int = 64
    n_transformer_layers: int = 2
    n_heads: int = 4
    ff_width: int = 128
    mask_prob: float = 0.08
    mask_span: int = 4
    K: int = 8
    proj_cc_dim: int = 64
    proj_sc_dim: int = 128
    feature_norm: bool = True
    dual_branch_hb: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        convs = tuple(tuple(int(v) for v in layer) for layer in self.conv_layers)
        object.__setattr__(self, "conv_layers", convs)
        if not convs:
            raise ValueError("at least one conv layer is required")
        if any(v <= 0 for layer in convs for v in layer):
            raise ValueError("conv channels, kernels and strides must be positive")
        if convs[-1][0] != self.d_model:
            raise ValueError("last conv layer must output d_model channels")
        if self.d_model % self.n_heads or self.d_model % 2:
            raise ValueError("d_model must be even and divisible by n_heads")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")
        if self.mask_span < 1 or self.K < 2:
            raise ValueError("mask_span >= 1 and K >= 2 required")
        if min(self.proj_cc_dim, self.proj_sc_dim, self.ff_width) <= 0 or self.n_transformer_layers < 0:
            raise ValueError("widths must be positive")

    @property
    def stride(self) -> int:
        """Total downsampling; the MFCC hop must equal this."""
        s = 1
        for _, _, st in self.conv_layers:
            s *= st
        return s

    @property
    def receptive_field(self) -> int:
        r, jump = 1, 1
        for _, k, st in self.conv_layers:
            r += (k - 1) * jump
            jump *= st
        return r

    def num_frames(self, length: int) -> int:
        return num_frames(length, self.receptive_field, self.stride)


ModelParams = dict  # name -> float64 ndarray


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Fan-in scaled Gaussian weights, zero biases, unit layer-norm gains."""
    p: ModelParams = {}

    def dense(name, fan_in, fan_out):
        p[f"{name}.W"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        p[f"{name}.b"] = np.zeros(fan_out)

    cin = 1
    for i, (cout, k, _) in enumerate(cfg.conv_layers):
        p[f"cnn.{i}.W"] = rng.normal(0.0, np.sqrt(2.0 / (cin * k)), size=(cout, cin, k))
        p[f"cnn.{i}.b"] = np.zeros(cout)
        cin = cout
    d = cfg.d_model
    if cfg.feature_norm:
        p["cnn.ln.g"] = np.ones(d)
        p["cnn.ln.b"] = np.zeros(d)
    p["mask_emb"] = rng.uniform(0.0, 1.0, size=d)
    for i in range(cfg.n_transformer_layers):
        t = f"tf.{i}"
        for ln in ("ln1", "ln2"):
            p[f"{t}.{ln}.g"] = np.ones(d)
            p[f"{t}.{ln}.b"] = np.zeros(d)
        dense(f"{t}.qkv", d, 3 * d)
        dense(f"{t}.out", d, d)
        dense(f"{t}.ff1", d, cfg.ff_width)
        dense(f"{t}.ff2", cfg.ff_width, d)
    dense("head", d, cfg.K)
    dense("proj_cc", d, cfg.proj_cc_dim)
    dense("proj_sc", d, cfg.proj_sc_dim)
    return p


def zeros_like(params: ModelParams) -> ModelParams:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# convolutional front end


def cnn_forward(params, cfg: ModelConfig, samples: np.ndarray):
    if samples.shape[0] < cfg.receptive_field:
        raise ModelError(f"{samples.shape[0]} samples is shorter than the "
                         f"{cfg.receptive_field}-sample receptive field")
    h = samples[:, None]
    caches = []
    for i, (_, _, stride) in enumerate(cfg.conv_layers):
        h, cc = layers.conv1d_forward(h, params[f"cnn.{i}.W"], params[f"cnn.{i}.b"], stride)
        h, gc = layers.gelu_forward(h)
        caches.append((cc, gc))
    ln_cache = None
    if cfg.feature_norm:
        h, ln_cache = layers.layer_norm_forward(h, params["cnn.ln.g"], params["cnn.ln.b"], cfg.ln_eps)
    return h, (caches, ln_cache)


def cnn_backward(dX, cache, params, cfg: ModelConfig, grads):
    caches, ln_cache = cache
    dh = dX
    if cfg.feature_norm:
        dh, dg, db = layers.layer_norm_backward(dh, ln_cache, params["cnn.ln.g"])
        grads["cnn.ln.g"] += dg
        grads["cnn.ln.b"] += db
    for i in reversed(range(len(cfg.conv_layers))):
        cc, gc = caches[i]
        dh = layers.gelu_backward(dh, gc)
        dh, dW, db = layers.conv1d_backward(dh, cc, params[f"cnn.{i}.W"], need_dx=i > 0)
        grads[f"cnn.{i}.W"] += dW
        grads[f"cnn.{i}.b"] += db


def encode_cnn(params, cfg: ModelConfig, w: Waveform) -> FrameFeatures:
    """Frame features ``X``: ``T x d_model`` with ``T = floor((len - receptive) / stride) + 1``."""
    X, _ = cnn_forward(params, cfg, w.samples)
    return FrameFeatures(X, X.shape[0], cfg.stride, cfg.receptive_field)


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True, eq=False)
class MaskSet:
    masked: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "masked", np.asarray(self.masked, dtype=bool))

    def __len__(self):
        return self.masked.shape[0]

    @property
    def count(self) -> int:
        return int(self.masked.sum())


def sample_mask_spans(T: int, mask_prob: float, mask_span: int, rng: np.random.Generator) -> MaskSet:
    """Each frame starts a span with probability ``mask_prob``; spans merge and clip at ``T``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    starts = rng.random(T) < mask_prob
    covered = np.convolve(starts.astype(np.int64), np.ones(mask_span, dtype=np.int64))[:T]
    return MaskSet(covered > 0)


# ---------------------------------------------------------------------------
# transformer context network


def _block_forward(params, t, h, cfg):
    a_in, ln1 = layers.layer_norm_forward(h, params[f"{t}.ln1.g"], params[f"{t}.ln1.b"], cfg.ln_eps)
    a_out, att = layers.attention_forward(a_in, params[f"{t}.qkv.W"], params[f"{t}.qkv.b"],
                                          params[f"{t}.out.W"], params[f"{t}.out.b"], cfg.n_heads)
    h = h + a_out
    f_in, ln2 = layers.layer_norm_forward(h, params[f"{t}.ln2.g"], params[f"{t}.ln2.b"], cfg.ln_eps)
    u, _ = layers.linear_forward(f_in, params[f"{t}.ff1.W"], params[f"{t}.ff1.b"])
    g, gc = layers.gelu_forward(u)
    f_out, _ = layers.linear_forward(g, params[f"{t}.ff2.W"], params[f"{t}.ff2.b"])
    return h + f_out, (ln1, att, ln2, f_in, gc, g)


def _block_backward(params, t, dh, cache, grads):
    ln1, att, ln2, f_in, gc, g = cache
    dg, dW, db = layers.linear_backward(dh, g, params[f"{t}.ff2.W"])
    grads[f"{t}.ff2.W"] += dW
    grads[f"{t}.ff2.b"] += db
    du = layers.gelu_backward(dg, gc)
    df, dW, db = layers.linear_backward(du, f_in, params[f"{t}.ff1.W"])
    grads[f"{t}.ff1.W"] += dW
    grads[f"{t}.ff1.b"] += db
    dx, dgain, dbias = layers.layer_norm_backward(df, ln2, params[f"{t}.ln2.g"])
    grads[f"{t}.ln2.g"] += dgain
    grads[f"{t}.ln2.b"] += dbias
    dh = dh + dx
    da, dWqkv, dbqkv, dWo, dbo = layers.attention_backward(dh, att, params[f"{t}.qkv.W"], params[f"{t}.out.W"])
    grads[f"{t}.qkv.W"] += dWqkv
    grads[f"{t}.qkv.b"] += dbqkv
    grads[f"{t}.out.W"] += dWo
    grads[f"{t}.out.b"] += dbo
    dx, dgain, dbias = layers.layer_norm_backward(da, ln1, params[f"{t}.ln1.g"])
    grads[f"{t}.ln1.g"] += dgain
    grads[f"{t}.ln1.b"] += dbias
    return dh + dx


def context_forward(params, cfg: ModelConfig, X: np.ndarray, masked: np.ndarray, keep_hidden=False):
    T = X.shape[0]
    if masked.shape != (T,):
        raise ModelError(f"mask covers {masked.shape[0]} frames, X has {T}")
    h = np.where(masked[:, None], params["mask_emb"][None, :], X)
    hidden = [h]
    if cfg.n_transformer_layers:
        h = h + layers.sinusoidal_positions(T, cfg.d_model)
        hidden[0] = h
    caches = []
    for i in range(cfg.n_transformer_layers):
        h, c = _block_forward(params, f"tf.{i}", h, cfg)
        caches.append(c)
        if keep_hidden:
            hidden.append(h)
    logits, _ = layers.linear_forward(h, params["head.W"], params["head.b"])
    return h, logits, (masked, caches, h, hidden if keep_hidden else None)


def context_backward(dZ, dlogits, cache, params, cfg: ModelConfig, grads):
    """Gradient w.r.t. ``X`` given gradients on ``Z`` and on the logits."""
    masked, caches, Z, _ = cache
    dh = np.zeros_like(Z) if dZ is None else dZ.copy()
    if dlogits is not None:
        dz, dW, db = layers.linear_backward(dlogits, Z, params["head.W"])
        grads["head.W"] += dW
        grads["head.b"] += db
        dh += dz
    for i in reversed(range(cfg.n_transformer_layers)):
        dh = _block_backward(params, f"tf.{i}", dh, caches[i], grads)
    grads["mask_emb"] += dh[masked].sum(axis=0)
    dX = dh.copy()
    dX[masked] = 0.0
    return dX


def encode_context(params, cfg: ModelConfig, X: FrameFeatures, mask: MaskSet):
    """Bottleneck ``Z`` and code logits for one utterance.

    Masked frames are replaced by the learned mask embedding; sinusoidal
    positions are added at the input of a non-empty transformer stack.
    """
    if mask.masked.shape[0] != X.shape[0]:
        raise ModelError(f"mask covers {len(mask)} frames, X has {X.shape[0]}")
    Z, logits, _ = context_forward(params, cfg, X.data, mask.masked)
    return FrameFeatures(Z, X.valid_frames, X.hop_samples, X.frame_samples), logits


def layer_outputs(params, cfg: ModelConfig, w: Waveform) -> list[np.ndarray]:
    """Unmasked hidden states: index 0 is the stack input, index ``i`` follows layer ``i``."""
    X, _ = cnn_forward(params, cfg, w.samples)
    _, _, cache = context_forward(params, cfg, X, np.zeros(X.shape[0], dtype=bool), keep_hidden=True)
    return cache[3]


def bottleneck(params, cfg: ModelConfig, w: Waveform) -> np.ndarray:
    """Unmasked ``Z`` for one waveform."""
    X, _ = cnn_forward(params, cfg, w.samples)
    Z, _, _ = context_forward(params, cfg, X, np.zeros(X.shape[0], dtype=bool))
    return Z


# ---------------------------------------------------------------------------
# losses on the model outputs


def hubert_loss(logits: np.ndarray, codes: CodeSequence, mask: MaskSet) -> float:
    """Mean cross-entropy over frames that are both masked and valid."""
    loss, _ = masked_prediction(logits, codes.codes, mask.masked)
    return loss


def masked_prediction(logits, codes, masked):
    """Loss and ``d loss / d logits`` over masked valid frames (pooled if lists)."""
    if isinstance(logits, np.ndarray):
        logits, codes, masked = [logits], [codes], [masked]
    rows, targets, sizes = [], [], []
    for lg, cd, mk in zip(logits, codes, masked):
        sel = np.flatnonzero(mk[: len(cd)])
        rows.append(lg[sel])
        targets.append(np.asarray(cd)[sel])
        sizes.append(sel)
    n = sum(len(s) for s in sizes)
    if n == 0:
        raise EmptyMaskError("no masked valid frames")
    loss, g = layers.cross_entropy(np.concatenate(rows), np.concatenate(targets))
    grads, start = [], 0
    for lg, sel in zip(logits, sizes):
        d = np.zeros_like(lg)
        d[sel] = g[start:start + len(sel)]
        start += len(sel)
        grads.append(d)
    return float(loss), grads if len(grads) > 1 else grads[0]


def masked_accuracy(logits, codes, masked) -> float:
    if isinstance(logits, np.ndarray):
        logits, codes, masked = [logits], [codes], [masked]
    hit = total = 0
    for lg, cd, mk in zip(logits, codes, masked):
        sel = np.flatnonzero(mk[: len(cd)])
        hit += int(np.sum(np.argmax(lg[sel], axis=1) == np.asarray(cd)[sel]))
        total += len(sel)
    return hit / total if total else float("nan")


def project(params, block: str, F: FrameFeatures) -> FrameFeatures:
    """Apply projector ``block`` ("proj_cc" or "proj_sc") frame-wise; padding rows stay zero."""
    W, b = params[f"{block}.W"], params[f"{block}.b"]
    if F.shape[1] != W.shape[0]:
        raise ValueError(f"projector expects width {W.shape[0]}, got {F.shape[1]}")
    out = F.data @ W + b
    out[F.valid_frames:] = 0.0
    return FrameFeatures(out, F.valid_frames, F.hop_samples, F.frame_samples)
