"""Audio I/O and noise augmentation.

Waveforms are float64 arrays in [-1, 1] tagged with a sample rate. Mixing
follows a full-clip power convention: the SNR of a mixture is
``10 * log10(mean(speech**2) / mean(scaled_noise**2))``.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CANONICAL_RATE = 16000
NOISE_CATEGORIES = ("TypeA", "TypeB", "Other")


class AudioError(Exception):
    """Base class for audio failures."""


class WavHeaderError(AudioError):
    """RIFF/WAVE header is malformed."""


class UnsupportedFormatError(AudioError):
    """Valid WAV but not 16-bit PCM."""


class ChannelCountError(UnsupportedFormatError):
    """WAV has more than one channel."""


class EmptyPayloadError(AudioError):
    """WAV data chunk holds no samples."""


class ZeroPowerError(AudioError):
    """Speech or noise has zero mean-squared amplitude."""


class SampleRateMismatchError(AudioError):
    pass


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def power(self) -> float:
        return float(np.mean(self.samples ** 2)) if len(self) else 0.0

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class NoiseEntry:
    noise_id: str
    waveform: Waveform
    category: str = "Other"


@dataclass
class NoiseBank:
    entries: list[NoiseEntry]

    def __post_init__(self):
        if len(self.entries) < 2:
            raise ValueError("a noise bank needs at least 2 entries")
        ids = [e.noise_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate noise ids in bank")
        for e in self.entries:
            if e.category not in NOISE_CATEGORIES:
                raise ValueError(f"unknown noise category {e.category!r}")
            if e.waveform.power <= 0.0:
                raise ZeroPowerError(f"noise {e.noise_id!r} has zero power")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, noise_id: str) -> NoiseEntry:
        for e in self.entries:
            if e.noise_id == noise_id:
                return e
        raise KeyError(noise_id)

    @property
    def ids(self) -> list[str]:
        return [e.noise_id for e in self.entries]


@dataclass(frozen=True, eq=False)
class MixComponents:
    """The two additive parts of a mixture, after any peak rescaling."""

    speech: np.ndarray
    noise: np.ndarray
    gain: float
    offset: int

    @property
    def snr_db(self) -> float:
        return 10.0 * np.log10(np.mean(self.speech ** 2) / np.mean(self.noise ** 2))


@dataclass(frozen=True, eq=False)
class AugmentedPair:
    clean: Waveform
    noisy_a: Waveform
    noisy_b: Waveform
    snr_a_db: float
    snr_b_db: float
    noise_a_id: str
    noise_b_id: str
    components_a: MixComponents | None = field(default=None, repr=False)
    components_b: MixComponents | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# WAV I/O


def _parse_chunks(data: bytes):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavHeaderError("not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavHeaderError(f"chunk {cid!r} truncated")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or len(fmt) < 16:
        raise WavHeaderError("missing or short fmt chunk")
    if payload is None:
        raise WavHeaderError("missing data chunk")
    return fmt, payload


def load_wav(path) -> Waveform:
    """Read a mono 16-bit PCM WAV file, scaling samples by 1/32768."""
    data = Path(path).read_bytes()
    fmt, payload = _parse_chunks(data)
    audio_format, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if audio_format != 1:
        raise UnsupportedFormatError(f"audio format {audio_format} is not integer PCM")
    if bits != 16:
        raise UnsupportedFormatError(f"bit depth {bits} not supported (need 16)")
    if channels != 1:
        raise ChannelCountError(f"{channels} channels, need mono")
    if rate == 0:
        raise WavHeaderError("sample rate is zero")
    if len(payload) < 2:
        raise EmptyPayloadError("no samples in data chunk")
    pcm = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def save_wav(path, w: Waveform) -> None:
    pcm = to_pcm16(w.samples).tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    fmt = struct.pack("<HHIIHH", 1, 1, w.sample_rate, 2 * w.sample_rate, 2, 16)
    Path(path).write_bytes(header + b"fmt " + struct.pack("<I", 16) + fmt
                           + b"data" + struct.pack("<I", len(pcm)) + pcm)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class CorpusEntry:
    utterance_id: str
    path: Path
    num_samples: int


def read_corpus_manifest(path) -> list[CorpusEntry]:
    """Rows are ``utterance_id<TAB>relative_path<TAB>num_samples``."""
    root = Path(path).parent
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 3:
                raise ValueError(f"corpus manifest row needs 3 fields: {row!r}")
            out.append(CorpusEntry(row[0], root / row[1], int(row[2])))
    return out


def write_corpus_manifest(path, rows: Sequence[tuple[str, str, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for uid, rel, n in rows:
            fh.write(f"{uid}\t{rel}\t{int(n)}\n")


def read_noise_manifest(path) -> NoiseBank:
    """Rows are ``noise_id<TAB>relative_path<TAB>category``; loads the audio."""
    root = Path(path).parent
    entries = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 3:
                raise ValueError(f"noise manifest row needs 3 fields: {row!r}")
            entries.append(NoiseEntry(row[0], load_wav(root / row[1]), row[2]))
    return NoiseBank(entries)


def write_noise_manifest(path, rows: Sequence[tuple[str, str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for nid, rel, cat in rows:
            fh.write(f"{nid}\t{rel}\t{cat}\n")


def load_corpus(path) -> list[tuple[str, Waveform]]:
    out = []
    for e in read_corpus_manifest(path):
        w = load_wav(e.path)
        if len(w) != e.num_samples:
            raise ValueError(f"{e.utterance_id}: manifest says {e.num_samples} samples, file has {len(w)}")
        out.append((e.utterance_id, w))
    return out


# ---------------------------------------------------------------------------
# mixing


def utterance_rng(global_seed: int, utterance_id: str, *extra: int) -> np.random.Generator:
    """Independent stream keyed by ``(global_seed, utterance_id, *extra)``."""
    digest = hashlib.sha256(utterance_id.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng([int(global_seed), key, *map(int, extra)])


def _crop_or_tile(noise: np.ndarray, length: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    if noise.shape[0] < length:
        reps = -(-length // noise.shape[0]) + 1
        noise = np.tile(noise, reps)
    offset = int(rng.integers(0, noise.shape[0] - length + 1))
    return noise[offset:offset + length], offset


def mix_at_snr(speech: Waveform, noise: Waveform, snr_db: float,
               rng: np.random.Generator, return_components: bool = False):
    """Add ``noise`` to ``speech`` at the requested signal-to-noise ratio.

    The noise is cropped at a random offset (tiled first if it is shorter
    than the speech) and scaled by
    ``g = sqrt(P_speech / (P_noise * 10**(snr_db / 10)))``, where ``P`` is the
    mean squared amplitude of the whole clip. If the sum would leave
    [-1, 1], mixture and components are rescaled by the same factor, which
    leaves the SNR untouched.

    Parameters
    ----------
    speech, noise : Waveform
        Must share a sample rate and have nonzero power.
    snr_db : float
        Target SNR in decibels.
    rng : numpy.random.Generator
        Draws the crop offset.
    return_components : bool
        Also return the :class:`MixComponents` of the mixture.
    """
    if speech.sample_rate != noise.sample_rate:
        raise SampleRateMismatchError(f"{speech.sample_rate} Hz speech vs {noise.sample_rate} Hz noise")
    p_speech = speech.power
    if p_speech <= 0.0:
        raise ZeroPowerError("speech has zero power")
    n = len(speech)
    seg, offset = _crop_or_tile(noise.samples, n, rng)
    p_noise = float(np.mean(seg ** 2))
    if p_noise <= 0.0:
        # a silent crop of a non-silent clip still cannot be scaled to any SNR
        raise ZeroPowerError("noise has zero power")
    gain = np.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))
    clean = speech.samples.copy()
    scaled = gain * seg
    mixture = clean + scaled
    peak = np.max(np.abs(mixture))
    if peak > 1.0:
        factor = 1.0 / peak
        mixture *= factor
        clean *= factor
        scaled *= factor
        gain *= factor
    out = Waveform(mixture, speech.sample_rate)
    if return_components:
        return out, MixComponents(clean, scaled, float(gain), offset)
    return out


def make_augmented_pair(speech: Waveform, bank: NoiseBank, snr_range: Sequence[float],
                        rng: np.random.Generator) -> AugmentedPair:
    """Two mixtures of ``speech`` with two distinct noises from ``bank``."""
    lo, hi = float(snr_range[0]), float(snr_range[1])
    if lo > hi:
        raise ValueError(f"invalid SNR range [{lo}, {hi}]")
    if len(bank) < 2:
        raise ValueError("noise bank too small")
    ia, ib = rng.choice(len(bank), size=2, replace=False)
    snr_a, snr_b = rng.uniform(lo, hi, size=2)
    ea, eb = bank.entries[int(ia)], bank.entries[int(ib)]
    wa, ca = mix_at_snr(speech, ea.waveform, snr_a, rng, return_components=True)
    wb, cb = mix_at_snr(speech, eb.waveform, snr_b, rng, return_components=True)
    return AugmentedPair(speech, wa, wb, float(snr_a), float(snr_b), ea.noise_id, eb.noise_id, ca, cb)
