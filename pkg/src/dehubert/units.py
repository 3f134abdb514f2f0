"""Discrete hidden units: K-means codebooks and per-frame code assignment."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import FrameFeatures

CODEBOOK_MAGIC = b"DHCB"
MFCC_SOURCE = 0
_CHUNK = 4096


class UnitsError(Exception):
    pass


class TooFewFramesError(UnitsError):
    pass


class LayerRangeError(UnitsError):
    pass


@dataclass(frozen=True, eq=False)
class Codebook:
    """``K x F`` centroids. ``source`` is 0 for MFCC, or a 1-based encoder layer."""

    centroids: np.ndarray
    source: int = MFCC_SOURCE
    inertia: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("a codebook needs at least one centroid")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite centroid")
        if np.unique(c, axis=0).shape[0] != c.shape[0]:
            raise ValueError("duplicate centroids")
        if not 0 <= self.source <= 255:
            raise ValueError("source tag must fit in a byte")
        object.__setattr__(self, "centroids", c)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True, eq=False)
class CodeSequence:
    codes: np.ndarray
    valid_frames: int

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64)
        if codes.shape != (self.valid_frames,):
            raise ValueError("code count must equal valid_frames")
        object.__setattr__(self, "codes", codes)

    def __len__(self):
        return self.valid_frames


def squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact ``||x_i - c_k||^2`` by differencing (no expansion, so ties stay ties)."""
    out = np.empty((x.shape[0], centroids.shape[0]))
    for start in range(0, x.shape[0], _CHUNK):
        diff = x[start:start + _CHUNK, None, :] - centroids[None, :, :]
        out[start:start + _CHUNK] = np.einsum("nkf,nkf->nk", diff, diff)
    return out


def _nearest(x, centroids):
    d = squared_distances(x, centroids)
    labels = np.argmin(d, axis=1)  # first minimum wins ties
    return labels, d[np.arange(x.shape[0]), labels]


def _kmeans_pp(x, K, rng):
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = squared_distances(x, x[chosen])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, squared_distances(x, x[idx:idx + 1])[:, 0])
    return x[chosen].copy()


def fit_kmeans(features, K: int, rng: np.random.Generator, max_iters: int = 100,
               tol: float = 1e-6, source: int = MFCC_SOURCE) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding.

    Stops once the largest centroid displacement drops below ``tol`` or after
    ``max_iters`` updates. A cluster left empty is moved onto the point
    farthest from its current centroid. Inertia is checked to be
    non-increasing after every update and the trace is kept on the returned
    codebook.

    ``features`` is an ``N x F`` array, or a sequence of :class:`FrameFeatures`
    whose valid rows are pooled in order.
    """
    x = pool_frames(features)
    if K < 1:
        raise ValueError("K must be positive")
    if np.unique(x, axis=0).shape[0] < K:
        raise TooFewFramesError(f"fewer than K={K} distinct frames")
    centroids = _kmeans_pp(x, K, rng)
    labels, d = _nearest(x, centroids)
    trace = [float(d.sum())]
    for _ in range(max_iters):
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=K)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        for k in np.flatnonzero(~filled):
            far = int(np.argmax(d))
            new[k] = x[far]
            d = np.minimum(d, squared_distances(x, new[k:k + 1])[:, 0])
        shift = float(np.sqrt(np.max(np.sum((new - centroids) ** 2, axis=1))))
        centroids = new
        labels, d = _nearest(x, centroids)
        inertia = float(d.sum())
        if inertia > trace[-1] * (1.0 + 1e-12) + 1e-300:
            raise UnitsError(f"inertia increased from {trace[-1]!r} to {inertia!r}")
        trace.append(inertia)
        if shift < tol:
            break
    return Codebook(centroids, source, tuple(trace))


def pool_frames(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        x = np.asarray(features, dtype=np.float64)
    else:
        x = np.concatenate([f.valid if isinstance(f, FrameFeatures) else np.asarray(f)
                            for f in features], axis=0)
    if x.ndim != 2 or x.shape[0] == 0:
        raise TooFewFramesError("no frames to cluster")
    return x


def assign_codes(features: FrameFeatures, cb: Codebook) -> CodeSequence:
    """Nearest centroid per valid frame; the lowest index wins ties."""
    if features.shape[1] != cb.feature_dim:
        raise ValueError(f"feature dim {features.shape[1]} != codebook dim {cb.feature_dim}")
    labels, _ = _nearest(features.valid, cb.centroids)
    return CodeSequence(labels, features.valid_frames)


def refresh_units(params, cfg, layer_index: int, waveforms: Sequence, K: int,
                  rng: np.random.Generator, max_iters: int = 100, tol: float = 1e-6) -> Codebook:
    """Re-cluster clean audio on the hidden states after transformer layer ``layer_index``.

    ``layer_index`` is 1-based, as in "the sixth layer"; ``waveforms`` are
    clean utterances.
    """
    from .model import layer_outputs

    if not 1 <= layer_index <= cfg.n_transformer_layers:
        raise LayerRangeError(f"layer {layer_index} outside 1..{cfg.n_transformer_layers}")
    if len(waveforms) == 0:
        raise UnitsError("empty corpus")
    tapped = [layer_outputs(params, cfg, w)[layer_index] for w in waveforms]
    return fit_kmeans(tapped, K, rng, max_iters=max_iters, tol=tol, source=layer_index)


# ---------------------------------------------------------------------------
# file format: "DHCB", K u32, F u32, source u8, row-major <f8 centroids


def save_codebook(path, cb: Codebook) -> None:
    header = CODEBOOK_MAGIC + struct.pack("<IIB", cb.K, cb.feature_dim, cb.source)
    Path(path).write_bytes(header + cb.centroids.astype("<f8").tobytes())


def load_codebook(path) -> Codebook:
    raw = Path(path).read_bytes()
    if len(raw) < 13 or raw[:4] != CODEBOOK_MAGIC:
        raise UnitsError("not a codebook file")
    K, F, source = struct.unpack("<IIB", raw[4:13])
    body = raw[13:]
    if len(body) != 8 * K * F:
        raise UnitsError("codebook payload length mismatch")
    return Codebook(np.frombuffer(body, dtype="<f8").reshape(K, F).copy(), source)
