"""Correlation-matrix losses that push twin embeddings toward identity.

For two ``n x d`` frame samples ``Y`` and ``Yt`` the empirical correlation is::

    C[i, j] = sum_n Y[n, i] * Yt[n, j] / (||Y[:, i]|| * ||Yt[:, j]|| + eps)

with no mean subtraction unless ``center=True``. The loss is
``sum_i (1 - C[i, i])**2 + lam * sum_{i != j} C[i, j]**2``. Passing the same
array twice gives the self-correlation variant, whose diagonal is one by
construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_LAMBDA = 0.005
DEFAULT_ALPHA = 0.5
DEFAULT_BETA = 0.5
DEFAULT_SAMPLE_SIZE = 640
DEFAULT_EPS = 1e-9


class CorrelationError(Exception):
    pass


class EmptyPoolError(CorrelationError):
    pass


class NonFiniteLossError(CorrelationError):
    pass


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    C: np.ndarray
    kind: str = "cross"

    def __post_init__(self):
        if self.kind not in ("cross", "self"):
            raise ValueError(f"unknown correlation kind {self.kind!r}")

    @property
    def d(self) -> int:
        return self.C.shape[0]

    def check(self, slack: float = 1e-9) -> None:
        if np.any(np.abs(self.C) > 1.0 + slack):
            raise CorrelationError("correlation entry outside [-1, 1]")
        if self.kind == "self":
            if not np.allclose(self.C, self.C.T, rtol=0.0, atol=slack):
                raise CorrelationError("self-correlation is not symmetric")


@dataclass(frozen=True, eq=False)
class SampledFrames:
    """Indices into the flattened pool of valid frames of a minibatch."""

    indices: np.ndarray
    pool_size: int

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    def locate(self, valid_lengths: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Map pool indices to ``(utterance, frame)`` positions."""
        offsets = np.concatenate([[0], np.cumsum(valid_lengths)])
        utt = np.searchsorted(offsets, self.indices, side="right") - 1
        return utt, self.indices - offsets[utt]


@dataclass(frozen=True)
class LossBreakdown:
    l_hb: float
    l_cc: float
    l_sc: float
    total: float
    lam: float = DEFAULT_LAMBDA
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA


def sample_frames(valid_lengths: Sequence[int], n: int, rng: np.random.Generator) -> SampledFrames:
    """Draw ``min(n, pool)`` distinct frames from the valid frames of a batch.

    Padding is never addressed: the pool is the concatenation of the first
    ``valid_lengths[b]`` frames of each utterance. Indices come back sorted.
    """
    pool = int(np.sum(valid_lengths))
    if pool < 1:
        raise EmptyPoolError("no valid frames to sample")
    take = min(int(n), pool)
    idx = np.sort(rng.choice(pool, size=take, replace=False))
    return SampledFrames(idx, pool)


def gather_frames(frames: Sequence[np.ndarray], valid_lengths, sample: SampledFrames) -> np.ndarray:
    """Rows of a list of per-utterance (or a padded ``B x T x d``) arrays at ``sample``."""
    utt, pos = sample.locate(valid_lengths)
    if isinstance(frames, np.ndarray) and frames.ndim == 3:
        return frames[utt, pos]
    return np.stack([frames[u][t] for u, t in zip(utt, pos)]) if len(utt) else np.zeros((0, frames[0].shape[1]))


def correlation_matrix(Y: np.ndarray, Yt: np.ndarray, eps: float = DEFAULT_EPS,
                       center: bool = False) -> CorrelationMatrix:
    """Empirical (cross- or self-) correlation of two ``n x d`` frame samples."""
    C, _ = _correlation_forward(Y, Yt, eps, center)
    return CorrelationMatrix(C, "self" if Yt is Y else "cross")


def _correlation_forward(Y, Yt, eps, center):
    Y = np.asarray(Y, dtype=np.float64)
    Yt = np.asarray(Yt, dtype=np.float64)
    if Y.shape != Yt.shape or Y.ndim != 2:
        raise CorrelationError(f"shape mismatch: {Y.shape} vs {Yt.shape}")
    if Y.shape[0] < 2:
        raise CorrelationError("need at least 2 frames")
    same = Yt is Y
    if center:
        Y = Y - Y.mean(axis=0)
        Yt = Y if same else Yt - Yt.mean(axis=0)
    a = np.sqrt(np.sum(Y * Y, axis=0))
    b = a if same else np.sqrt(np.sum(Yt * Yt, axis=0))
    S = Y.T @ Yt
    D = a[:, None] * b[None, :] + eps
    return S / D, (Y, Yt, a, b, S, D, same)


def correlation_loss(C, lam: float = DEFAULT_LAMBDA) -> float:
    """Invariance term plus ``lam`` times the off-diagonal (disentangling) term."""
    C = C.C if isinstance(C, CorrelationMatrix) else np.asarray(C)
    diag = np.diagonal(C)
    off = C - np.diag(diag)
    return float(np.sum((1.0 - diag) ** 2) + lam * np.sum(off * off))


def _loss_grad_wrt_C(C, lam):
    G = 2.0 * lam * C
    np.fill_diagonal(G, -2.0 * (1.0 - np.diagonal(C)))
    return G


def correlation_loss_and_grad(Y, Yt=None, lam: float = DEFAULT_LAMBDA, eps: float = DEFAULT_EPS,
                              center: bool = False):
    """Loss, correlation matrix, and gradients w.r.t. ``Y`` and ``Yt``.

    With ``Yt=None`` the self-correlation of ``Y`` is used and the returned
    ``dYt`` is ``None`` (both argument slots are already folded into ``dY``).
    """
    self_corr = Yt is None
    C, (Yc, Ytc, a, b, S, D, same) = _correlation_forward(Y, Y if self_corr else Yt, eps, center)
    loss = correlation_loss(C, lam)
    G = _loss_grad_wrt_C(C, lam)
    H = G / D
    Kd = -G * C / D
    ga = Kd @ b
    gb = Kd.T @ a
    dY = Ytc @ H.T + Yc * np.divide(ga, a, out=np.zeros_like(a), where=a > 0)
    dYt = Yc @ H + Ytc * np.divide(gb, b, out=np.zeros_like(b), where=b > 0)
    if center:
        dY = dY - dY.mean(axis=0)
        dYt = dYt - dYt.mean(axis=0)
    kind = "self" if self_corr else "cross"
    if self_corr:
        return loss, CorrelationMatrix(C, kind), dY + dYt, None
    return loss, CorrelationMatrix(C, kind), dY, dYt


def total_loss(l_hb: float, l_cc: float, l_sc: float, alpha: float = DEFAULT_ALPHA,
               beta: float = DEFAULT_BETA, lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    """``l_hb + alpha * l_cc + beta * l_sc``."""
    for name, v in (("l_hb", l_hb), ("l_cc", l_cc), ("l_sc", l_sc)):
        if not math.isfinite(v):
            raise NonFiniteLossError(f"{name} is not finite: {v!r}")
    total = l_hb + alpha * l_cc + beta * l_sc
    return LossBreakdown(float(l_hb), float(l_cc), float(l_sc), float(total), lam, alpha, beta)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass(frozen=True)
class GradProbe:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_err: float

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "index": self.index, "analytic": self.analytic,
                           "numeric": self.numeric, "rel_err": self.rel_err})


ZERO_GRAD_TOL = 1e-7


def relative_error(a: float, g: float, zero_tol: float = ZERO_GRAD_TOL) -> float:
    """``|a - g| / max(|a|, |g|)``; zero when both sit below ``zero_tol``.

    Central differences carry ~1e-10 of round-off, so an exactly-zero
    analytic gradient (e.g. an attention key bias) can't be compared
    relatively.
    """
    scale = max(abs(a), abs(g))
    if scale < zero_tol:
        return 0.0
    return abs(a - g) / scale


def grad_check(fun: Callable, params, step: float = 1e-6, tol: float | None = None,
               n_probes: int = 32, rng: np.random.Generator | None = None,
               names: Sequence[str] | None = None) -> list[GradProbe]:
    """Compare analytic gradients against central finite differences.

    ``fun(params)`` must return ``(loss, grads)`` where ``grads`` mirrors
    ``params``; ``params`` is a dict of arrays or a single array. Probes are
    spread over parameters, then drawn uniformly within each. If ``tol`` is
    given, an ``AssertionError`` lists the probes exceeding it.
    """
    single = isinstance(params, np.ndarray)
    work = {"theta": np.array(params, dtype=np.float64)} if single else \
        {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    rng = np.random.default_rng(0) if rng is None else rng

    def call():
        loss, g = fun(work["theta"] if single else work)
        if not math.isfinite(loss):
            raise NonFiniteLossError(f"loss is not finite at the probe point: {loss!r}")
        return loss, ({"theta": g} if single else g)

    _, analytic = call()
    pool = list(names) if names is not None else sorted(work)
    picks = [pool[i % len(pool)] for i in range(n_probes)]
    rng.shuffle(picks)
    report = []
    for name in picks:
        arr = work[name]
        flat = arr.reshape(-1)
        i = int(rng.integers(flat.shape[0]))
        orig = flat[i]
        flat[i] = orig + step
        f_plus, _ = call()
        flat[i] = orig - step
        f_minus, _ = call()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(np.asarray(analytic[name]).reshape(-1)[i])
        report.append(GradProbe(name, i, a, float(numeric), relative_error(a, numeric)))
    if tol is not None:
        bad = [p for p in report if p.rel_err >= tol]
        if bad:
            raise AssertionError(f"{len(bad)} probes above tol {tol}: {bad[:3]}")
    return report


def write_grad_report(path, report: Sequence[GradProbe]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in report:
            fh.write(p.to_json() + "\n")
