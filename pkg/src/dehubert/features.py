"""Frame-level MFCC features aligned to the encoder's output frames."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view

from .audio import Waveform

FEATURE_MAGIC = b"DHFT"
FEATURE_VERSION = 1


class FeatureError(Exception):
    pass


class TooShortError(FeatureError):
    pass


@dataclass(frozen=True, eq=False)
class FrameFeatures:
    """``T x F`` frame matrix; rows at or past ``valid_frames`` are padding."""

    data: np.ndarray
    valid_frames: int
    hop_samples: int = 1
    frame_samples: int = 1

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError("frame features must be a 2-D matrix")
        if not 0 <= self.valid_frames <= data.shape[0]:
            raise ValueError("valid_frames out of range")
        if not np.all(np.isfinite(data)):
            raise ValueError("non-finite feature values")
        if np.any(data[self.valid_frames:] != 0.0):
            raise ValueError("padding rows must be zero")
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def valid(self) -> np.ndarray:
        return self.data[: self.valid_frames]

    def padded(self, num_frames: int) -> "FrameFeatures":
        if num_frames < self.data.shape[0]:
            raise ValueError("cannot pad to fewer frames")
        out = np.zeros((num_frames, self.data.shape[1]))
        out[: self.data.shape[0]] = self.data
        return FrameFeatures(out, self.valid_frames, self.hop_samples, self.frame_samples)


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    frame_ms: float = 25.0
    hop_samples: int = 4
    n_mels: int = 26
    n_ceps: int = 13
    n_fft: int | None = None
    log_floor: float = 1e-10
    delta_width: int = 2

    def __post_init__(self):
        for name in ("sample_rate", "hop_samples", "n_mels", "n_ceps", "delta_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.frame_ms <= 0 or self.log_floor <= 0:
            raise ValueError("frame_ms and log_floor must be positive")
        if self.n_ceps > self.n_mels:
            raise ValueError("n_ceps cannot exceed n_mels")

    @property
    def frame_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_ms / 1000.0))

    @property
    def fft_size(self) -> int:
        if self.n_fft is not None:
            return self.n_fft
        return 1 << (self.frame_samples - 1).bit_length()

    @property
    def feature_dim(self) -> int:
        return 3 * self.n_ceps


def num_frames(length: int, frame_samples: int, hop_samples: int) -> int:
    """``floor((length - frame) / hop) + 1``, or 0 when the input is too short."""
    if length < frame_samples:
        return 0
    return (length - frame_samples) // hop_samples + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters spanning 0 Hz to Nyquist, shape ``(n_mels, n_fft // 2 + 1)``."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_signal(x: np.ndarray, frame_samples: int, hop_samples: int) -> np.ndarray:
    return sliding_window_view(x, frame_samples)[::hop_samples]


def filterbank_energies(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """Pre-log mel energies, ``T x n_mels``."""
    if w.sample_rate != cfg.sample_rate:
        raise FeatureError(f"expected {cfg.sample_rate} Hz audio, got {w.sample_rate} Hz")
    frame = cfg.frame_samples
    if len(w) < frame:
        raise TooShortError(f"{len(w)} samples is shorter than one {frame}-sample frame")
    frames = frame_signal(w.samples, frame, cfg.hop_samples) * np.hanning(frame)
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    return power @ mel_filterbank(cfg.n_mels, cfg.fft_size, cfg.sample_rate).T


def deltas(c: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-``width`` frames with edge replication."""
    T = c.shape[0]
    padded = np.pad(c, ((width, width), (0, 0)), mode="edge")
    num = np.zeros_like(c)
    for k in range(1, width + 1):
        num += k * (padded[width + k:width + k + T] - padded[width - k:width - k + T])
    return num / (2.0 * sum(k * k for k in range(1, width + 1)))


def mfcc(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> FrameFeatures:
    """MFCCs with first- and second-order deltas, ``T x 3*n_ceps``.

    Frames are ``cfg.frame_samples`` long with hop ``cfg.hop_samples``, Hann
    windowed; log mel energies are floored at ``cfg.log_floor`` before an
    orthonormal DCT-II.
    """
    energies = filterbank_energies(w, cfg)
    logmel = np.log(np.maximum(energies, cfg.log_floor))
    ceps = scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, : cfg.n_ceps]
    d1 = deltas(ceps, cfg.delta_width)
    d2 = deltas(d1, cfg.delta_width)
    data = np.concatenate([ceps, d1, d2], axis=1)
    return FrameFeatures(data, data.shape[0], cfg.hop_samples, cfg.frame_samples)


# ---------------------------------------------------------------------------
# cache format: "DHFT", version, T, F, valid (u32 LE), then row-major <f8


def save_features(path, feats: FrameFeatures) -> None:
    T, F = feats.shape
    header = FEATURE_MAGIC + struct.pack("<IIII", FEATURE_VERSION, T, F, feats.valid_frames)
    Path(path).write_bytes(header + feats.data.astype("<f8").tobytes())


def load_features(path, hop_samples: int = 1, frame_samples: int = 1) -> FrameFeatures:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != FEATURE_MAGIC:
        raise FeatureError("not a feature dump")
    version, T, F, valid = struct.unpack("<IIII", raw[4:20])
    if version != FEATURE_VERSION:
        raise FeatureError(f"unsupported feature dump version {version}")
    body = raw[20:]
    if len(body) != 8 * T * F:
        raise FeatureError("feature dump payload length mismatch")
    data = np.frombuffer(body, dtype="<f8").reshape(T, F).astype(np.float64)
    return FrameFeatures(data, valid, hop_samples, frame_samples)
