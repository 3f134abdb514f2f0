"""Noise-invariance measurements on pooled bottleneck features."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import FrameFeatures


class EvaluationError(Exception):
    pass


class ClassTooSmallError(EvaluationError):
    pass


@dataclass(frozen=True, eq=False)
class PooledEmbedding:
    vector: np.ndarray
    utterance_id: str
    noise_label: str = "clean"
    snr_db: float = float("nan")


def pool_embeddings(Z) -> np.ndarray:
    """Global mean over the valid frames of ``Z``."""
    if isinstance(Z, FrameFeatures):
        frames = Z.valid
    else:
        frames = np.asarray(Z, dtype=np.float64)
    if frames.shape[0] == 0:
        raise EvaluationError("no valid frames to pool")
    return frames.mean(axis=0)


def noise_probe(embeddings: Sequence[PooledEmbedding], k: int = 5) -> float:
    """Leave-one-out k-NN accuracy at predicting ``noise_label``.

    Lower is better: an encoder that discards noise identity scores near
    chance. Votes are tied-broken toward the label whose tied members sit
    closest to the query.
    """
    labels = [e.noise_label for e in embeddings]
    counts = Counter(labels)
    if len(counts) < 2:
        raise EvaluationError("need at least two noise classes")
    smallest = min(counts.values())
    if k < 1 or smallest < k + 1:
        raise ClassTooSmallError(f"k={k} needs every class to have at least {k + 1} members "
                                 f"(smallest has {smallest})")
    X = np.stack([e.vector for e in embeddings])
    y = np.array(labels)
    sq = np.sum(X * X, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(d, np.inf)
    hits = 0
    for i in range(len(X)):
        nn = np.argsort(d[i], kind="stable")[:k]
        votes = Counter(y[nn])
        top = max(votes.values())
        tied = [lab for lab, c in votes.items() if c == top]
        if len(tied) == 1:
            pred = tied[0]
        else:
            pred = min(tied, key=lambda lab: d[i, nn[y[nn] == lab]].sum())
        hits += pred == y[i]
    return hits / len(X)


def probe_report(embeddings: Sequence[PooledEmbedding], k: int = 5) -> dict:
    return {"n": len(embeddings), "classes": len({e.noise_label for e in embeddings}),
            "k": k, "accuracy": noise_probe(embeddings, k)}


def diagonality(C) -> float:
    """Mean diagonal minus the RMS of the off-diagonal entries; 1 for the identity."""
    C = getattr(C, "C", C)
    C = np.asarray(C, dtype=np.float64)
    d = C.shape[0]
    diag = np.diagonal(C)
    if d == 1:
        return float(diag[0])
    off = C[~np.eye(d, dtype=bool)]
    return float(diag.mean() - np.sqrt(np.mean(off * off)))


def export_embeddings(embeddings: Sequence[PooledEmbedding], path) -> Path:
    """CSV with header ``utterance_id,noise_label,snr_db,dim_0..dim_{d-1}``."""
    if not embeddings:
        raise EvaluationError("nothing to export")
    dim = embeddings[0].vector.shape[0]
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utterance_id", "noise_label", "snr_db"] + [f"dim_{i}" for i in range(dim)])
        for e in embeddings:
            w.writerow([e.utterance_id, e.noise_label, repr(float(e.snr_db))]
                       + [repr(float(v)) for v in e.vector])
    return path


def import_embeddings(path) -> list[PooledEmbedding]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    out = []
    for row in rows[1:]:
        out.append(PooledEmbedding(np.array([float(v) for v in row[3:]]), row[0], row[1], float(row[2])))
    return out


def embed_noisy(params, cfg, utterances, bank, snr_db: float = 0.0, seed: int = 0,
                noise_ids: Sequence[str] | None = None) -> list[PooledEmbedding]:
    """Pool unmasked bottleneck features of every utterance mixed with every listed noise."""
    from .audio import mix_at_snr, utterance_rng
    from .model import bottleneck

    noise_ids = list(noise_ids) if noise_ids is not None else bank.ids
    out = []
    for uid, w in utterances:
        for j, nid in enumerate(noise_ids):
            rng = utterance_rng(seed, uid, j)
            mixed = mix_at_snr(w, bank[nid].waveform, snr_db, rng)
            out.append(PooledEmbedding(pool_embeddings(bottleneck(params, cfg, mixed)), uid, nid, snr_db))
    return out


def write_probe_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report) + "\n", encoding="utf-8")
