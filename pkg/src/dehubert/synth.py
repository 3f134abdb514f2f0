"""Synthetic pseudo-speech and noise for desk-scale runs.

Utterances are chains of "phones": voiced phones are harmonic stacks on a
drifting pitch shaped by two or three formant bumps, unvoiced phones are
band-passed noise. Everything is band-limited below 4 kHz. Three noise
kinds cover the stationary/non-stationary split: ``hum`` (mains harmonics
plus brown noise), ``hiss`` (high-passed white noise) and ``clatter``
(random band-passed bursts).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import signal

from .audio import (NoiseBank, NoiseEntry, Waveform, save_wav, write_corpus_manifest,
                    write_noise_manifest)

SAMPLE_RATE = 16000

# (formant centres in Hz, voiced?)
PHONES = (
    ((300.0, 2300.0), True),
    ((700.0, 1200.0), True),
    ((500.0, 900.0, 2500.0), True),
    ((350.0, 800.0), True),
    ((600.0, 1800.0, 2700.0), True),
    ((2800.0, 3600.0), False),
    ((1500.0, 2500.0), False),
    ((250.0, 1000.0), True),
)

NOISE_KINDS = {"hum": "TypeA", "hiss": "TypeA", "clatter": "TypeB"}


def _bandlimit(x, sr, hi=3800.0):
    sos = signal.butter(6, hi, btype="low", fs=sr, output="sos")
    return signal.sosfilt(sos, x)


def _envelope(n, ramp):
    env = np.ones(n)
    r = min(ramp, n // 2)
    if r > 0:
        ramp_up = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, r))
        env[:r] = ramp_up
        env[n - r:] = ramp_up[::-1]
    return env


def _voiced(n, f0, formants, sr, rng):
    t = np.arange(n) / sr
    drift = f0 * (1.0 + 0.05 * np.sin(2 * np.pi * rng.uniform(2, 6) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(drift) / sr
    out = np.zeros(n)
    for h in range(1, int(3800 // f0) + 1):
        freq = h * f0
        amp = sum(np.exp(-0.5 * ((freq - fc) / (0.12 * fc + 60.0)) ** 2) for fc in formants) / h ** 0.3
        out += amp * np.sin(h * phase)
    return out


def _unvoiced(n, formants, sr, rng):
    x = rng.normal(size=n)
    lo, hi = min(formants) * 0.8, min(max(formants) * 1.2, sr / 2 - 100)
    sos = signal.butter(4, [lo, hi], btype="band", fs=sr, output="sos")
    return signal.sosfilt(sos, x)


def pseudo_speech(rng: np.random.Generator, duration: float = 0.2, sample_rate: int = SAMPLE_RATE,
                  f0: float | None = None, level: float | None = None) -> Waveform:
    """One utterance of random phones at a speaker pitch ``f0``."""
    n = int(round(duration * sample_rate))
    f0 = rng.uniform(90.0, 240.0) if f0 is None else f0
    level = rng.uniform(0.1, 0.3) if level is None else level
    out = np.zeros(n)
    pos = 0
    while pos < n:
        seg = min(int(rng.uniform(0.02, 0.06) * sample_rate), n - pos)
        formants, voiced = PHONES[int(rng.integers(len(PHONES)))]
        shifted = tuple(fc * rng.uniform(0.92, 1.08) for fc in formants)
        if voiced:
            x = _voiced(seg, f0, shifted, sample_rate, rng)
        else:
            x = 0.6 * _unvoiced(seg, shifted, sample_rate, rng)
        x /= np.sqrt(np.mean(x ** 2)) + 1e-12
        out[pos:pos + seg] = x * rng.uniform(0.5, 1.0) * _envelope(seg, int(0.004 * sample_rate))
        pos += seg
    out = _bandlimit(out, sample_rate)
    out *= level / (np.sqrt(np.mean(out ** 2)) + 1e-12)
    peak = np.max(np.abs(out))
    if peak > 0.99:
        out *= 0.99 / peak
    return Waveform(out, sample_rate)


def noise_clip(kind: str, rng: np.random.Generator, duration: float = 2.0,
               sample_rate: int = SAMPLE_RATE, level: float = 0.1) -> Waveform:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    if kind == "hum":
        base = rng.uniform(50.0, 60.0)
        x = sum(np.sin(2 * np.pi * base * h * t + rng.uniform(0, 2 * np.pi)) / h for h in range(1, 6))
        brown = np.cumsum(rng.normal(size=n))
        brown = signal.sosfilt(signal.butter(2, 20.0, btype="high", fs=sample_rate, output="sos"), brown)
        x = x / np.std(x) + 0.5 * brown / np.std(brown)
    elif kind == "hiss":
        x = rng.normal(size=n)
        x = signal.sosfilt(signal.butter(4, 2000.0, btype="high", fs=sample_rate, output="sos"), x)
    elif kind == "clatter":
        x = np.zeros(n)
        pos = 0
        while pos < n:
            pos += int(rng.uniform(0.01, 0.05) * sample_rate)
            seg = min(int(rng.uniform(0.005, 0.03) * sample_rate), n - pos)
            if seg <= 8:
                break
            fc = rng.uniform(800.0, 3000.0)
            sos = signal.butter(2, [fc * 0.7, fc * 1.3], btype="band", fs=sample_rate, output="sos")
            burst = signal.sosfilt(sos, rng.normal(size=seg)) * np.exp(-np.linspace(0, 5, seg))
            x[pos:pos + seg] += burst * rng.uniform(0.5, 2.0)
            pos += seg
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    x = _bandlimit(x, sample_rate, hi=7000.0)
    x *= level / np.sqrt(np.mean(x ** 2))
    return Waveform(np.clip(x, -1.0, 1.0), sample_rate)


def toy_bank(seed: int = 0, duration: float = 2.0) -> NoiseBank:
    rng = np.random.default_rng([seed, 7])
    return NoiseBank([NoiseEntry(kind, noise_clip(kind, rng, duration), cat)
                      for kind, cat in NOISE_KINDS.items()])


def toy_corpus(n_utts: int = 200, seed: int = 0, min_dur: float = 0.15,
               max_dur: float = 0.25, n_speakers: int = 10) -> list[tuple[str, Waveform]]:
    """``n_utts`` pseudo-speech utterances from ``n_speakers`` pitch/level profiles."""
    rng = np.random.default_rng([seed, 3])
    speakers = [(rng.uniform(90.0, 240.0), rng.uniform(0.1, 0.3)) for _ in range(n_speakers)]
    out = []
    for i in range(n_utts):
        f0, level = speakers[i % n_speakers]
        dur = rng.uniform(min_dur, max_dur)
        out.append((f"utt{i:04d}", pseudo_speech(rng, dur, f0=f0, level=level)))
    return out


def write_toy_data(root, n_utts: int = 200, seed: int = 0, **kw) -> tuple[Path, Path]:
    """Write WAVs plus ``corpus.tsv`` and ``noise.tsv`` manifests under ``root``."""
    root = Path(root)
    (root / "wav").mkdir(parents=True, exist_ok=True)
    (root / "noise").mkdir(parents=True, exist_ok=True)
    rows = []
    for uid, w in toy_corpus(n_utts, seed, **kw):
        rel = f"wav/{uid}.wav"
        save_wav(root / rel, w)
        rows.append((uid, rel, len(w)))
    write_corpus_manifest(root / "corpus.tsv", rows)
    nrows = []
    for e in toy_bank(seed).entries:
        rel = f"noise/{e.noise_id}.wav"
        save_wav(root / rel, e.waveform)
        nrows.append((e.noise_id, rel, e.category))
    write_noise_manifest(root / "noise.tsv", nrows)
    return root / "corpus.tsv", root / "noise.tsv"
