"""Acoustic front end: log-mel extraction, frame stacking, SNR-controlled noise.

Conventions (fixed so that tests are bit-stable): HTK mel scale,
triangular filters on the magnitude spectrum, Hann window, no
pre-emphasis, natural log with a floor of 1e-10.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

LOG_FLOOR_DEFAULT = 1e-10

#: Sentinel for "noise disabled" in NoiseConfig.target_snr_db.
SNR_DISABLED = math.inf


@dataclass(frozen=True)
class Waveform:
    """Mono audio: float samples (nominal range [-1, 1]) at a fixed rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate < 8000:
            raise DataError(f"sample_rate must be >= 8000, got {self.sample_rate}")
        if samples.ndim != 1:
            raise DataError(f"samples must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise DataError("waveform contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    mel_bins: int = 80
    log_floor: float = LOG_FLOOR_DEFAULT
    fft_size: int = 512

    def __post_init__(self):
        if self.hop_ms > self.window_ms:
            raise ConfigError("hop_ms must be <= window_ms")
        if self.mel_bins < 1:
            raise ConfigError("mel_bins must be >= 1")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if self.fft_size & (self.fft_size - 1):
            raise ConfigError("fft_size must be a power of two")

    def window_samples(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.window_ms / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.hop_ms / 1000.0))


@dataclass
class FeatureMatrix:
    """T x mel_bins log-mel energies (natural log)."""

    frames: np.ndarray
    hop_ms: float
    source: str = ""


@dataclass
class SuperFrameMatrix:
    """T' x (mel_bins * stack_factor) stacked frames."""

    frames: np.ndarray
    stack_factor: int


@dataclass(frozen=True)
class NoiseConfig:
    target_snr_db: float = 12.0
    snr_jitter_db: float = 0.0
    noise_kind: str = "white"
    seed: int = 0

    def __post_init__(self):
        if self.snr_jitter_db < 0:
            raise ConfigError("snr_jitter_db must be >= 0")
        if self.noise_kind not in ("white", "babble-surrogate"):
            raise ConfigError(f"unknown noise_kind {self.noise_kind!r}")


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(mel_bins: int, sample_rate: int) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter, 0 Hz .. Nyquist."""
    edges = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), mel_bins + 2)
    return mel_to_hz(edges[1:-1])


def mel_filterbank(mel_bins: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """Triangular filters, shape (mel_bins, fft_size // 2 + 1)."""
    edges_mel = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), mel_bins + 2)
    bin_freqs = np.fft.rfftfreq(fft_size, d=1.0 / sample_rate)
    bin_mel = hz_to_mel(bin_freqs)
    lower = edges_mel[:-2][:, None]
    center = edges_mel[1:-1][:, None]
    upper = edges_mel[2:][:, None]
    rising = (bin_mel[None, :] - lower) / (center - lower)
    falling = (upper - bin_mel[None, :]) / (upper - center)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def num_frames(num_samples: int, window: int, hop: int) -> int:
    if num_samples < window:
        return 0
    return (num_samples - window) // hop + 1


def logmel(w: Waveform, c: FeatureConfig | None = None, source: str = "") -> FeatureMatrix:
    """Convert a waveform into T x mel_bins natural-log mel energies.

    T = floor((num_samples - window) / hop) + 1. Raises DataError for
    input shorter than one window.
    """
    c = c or FeatureConfig()
    window = c.window_samples(w.sample_rate)
    hop = c.hop_samples(w.sample_rate)
    if c.fft_size < window:
        raise ConfigError(f"fft_size {c.fft_size} < window length {window}")
    if len(w.samples) < window:
        raise DataError(
            f"utterance too short: {len(w.samples)} samples < one {window}-sample window"
        )
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, window)[::hop]
    spectrum = np.abs(np.fft.rfft(frames * np.hanning(window), n=c.fft_size, axis=1))
    fbank = mel_filterbank(c.mel_bins, c.fft_size, w.sample_rate)
    energies = spectrum @ fbank.T
    return FeatureMatrix(
        frames=np.log(np.maximum(energies, c.log_floor)),
        hop_ms=c.hop_ms,
        source=source,
    )


def stack_frames(f: FeatureMatrix, k: int = 3) -> SuperFrameMatrix:
    """Group k consecutive frames into one super-frame row.

    The final group is padded by repeating the last frame, so
    T' = ceil(T / k).
    """
    if k <= 0:
        raise ConfigError(f"stack factor must be positive, got {k}")
    frames = np.asarray(f.frames)
    t, bins = frames.shape
    if t < 1:
        raise DataError("cannot stack an empty feature matrix")
    pad = (-t) % k
    if pad:
        frames = np.concatenate([frames, np.repeat(frames[-1:], pad, axis=0)])
    return SuperFrameMatrix(frames=frames.reshape(-1, k * bins), stack_factor=k)


def _babble_surrogate(n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Speech-shaped masker: 8 band-limited voices with syllabic-rate AM."""
    t = np.arange(n) / sample_rate
    out = np.zeros(n)
    for _ in range(8):
        carrier = rng.uniform(200.0, 3500.0)
        rate = rng.uniform(2.0, 6.0)
        phase = rng.uniform(0.0, 2.0 * math.pi, size=2)
        band = rng.standard_normal(n) * np.sin(2 * math.pi * carrier * t + phase[0])
        am = 0.5 * (1.0 + np.sin(2 * math.pi * rate * t + phase[1]))
        out += band * am
    return out


def add_noise(w: Waveform, n: NoiseConfig) -> Waveform:
    """Add noise at a jittered target SNR; exact identity when disabled.

    The realized SNR equals the sampled target up to float rounding
    (the noise is rescaled against the measured signal power).
    """
    if math.isinf(n.target_snr_db):
        return Waveform(w.samples.copy(), w.sample_rate)
    p_signal = float(np.mean(w.samples**2))
    if p_signal <= 0.0:
        raise DataError("cannot set SNR on silence (zero-power signal)")
    rng = np.random.default_rng(n.seed)
    snr_db = n.target_snr_db + n.snr_jitter_db * rng.uniform(-1.0, 1.0)
    if n.noise_kind == "white":
        noise = rng.standard_normal(len(w.samples))
    else:
        noise = _babble_surrogate(len(w.samples), w.sample_rate, rng)
    p_noise_target = p_signal / (10.0 ** (snr_db / 10.0))
    noise *= math.sqrt(p_noise_target / float(np.mean(noise**2)))
    return Waveform(w.samples + noise, w.sample_rate)


FEAT_MAGIC = b"FEAT"
_FEAT_HEADER = struct.Struct("<4sIII")


def write_feature_dump(path, frames: np.ndarray) -> None:
    """Binary dump: 16-byte header (magic, rows, cols, reserved) + LE f32 rows."""
    frames = np.ascontiguousarray(frames, dtype="<f4")
    rows, cols = frames.shape
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(FEAT_MAGIC, rows, cols, 0))
        fh.write(frames.tobytes())


def read_feature_dump(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(_FEAT_HEADER.size)
        if len(header) != _FEAT_HEADER.size:
            raise DataError(f"{path}: truncated feature dump header")
        magic, rows, cols, _ = _FEAT_HEADER.unpack(header)
        if magic != FEAT_MAGIC:
            raise DataError(f"{path}: bad feature dump magic {magic!r}")
        data = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4")
        if data.size != rows * cols:
            raise DataError(f"{path}: truncated feature dump body")
    return data.reshape(rows, cols).astype(np.float64)
