"""Fixed log-mel reference path: mel scale, triangular filterbank, features.

This path is never trained; it is the baseline the learnable frontend is
initialized to replicate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import Waveform, frame_signal, hanning_window, power_spectrum

# Channel roles carried by feature maps.
LOG_MEL = "log_mel"
PRE_COMPRESSION_ENERGY = "pre_compression_energy"
PCEN_OUT = "pcen_out"
TDFB_OUT = "tdfb_out"


@dataclass(frozen=True)
class MelFilterbankMatrix:
    weights: np.ndarray  # (n_filters, n_fft // 2 + 1), non-negative triangles
    center_freqs_hz: np.ndarray  # strictly increasing peak frequencies
    n_fft: int
    sample_rate: int

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]


@dataclass
class FeatureMap:
    """A channels-by-frames block of features flowing between stages."""

    values: np.ndarray
    channel_role: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("feature map must be 2-D (channels, frames)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature map contains NaN or Inf")
        if self.channel_role == PRE_COMPRESSION_ENERGY and np.any(self.values < 0):
            raise ValueError("pre-compression energies must be non-negative")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MelConfig:
    """Analysis layout: 64 filters over 25 ms windows every 10 ms at 16 kHz."""

    n_filters: int = 64
    win_len: int = 400
    hop: int = 160
    n_fft: int = 512
    sample_rate: int = 16000
    f_min: float = 0.0
    f_max: float = 8000.0


def mel_scale(f_hz):
    """Hz -> mel, 2595 * log10(1 + f / 700)."""
    f = np.asarray(f_hz, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    return 2595.0 * np.log10(1.0 + f / 700.0)


def mel_scale_inv(m):
    """mel -> Hz, exact inverse of mel_scale."""
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("mel value must be non-negative")
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def mel_filterbank_matrix(
    n_filters: int = 64,
    n_fft: int = 512,
    sample_rate: int = 16000,
    f_min: float = 0.0,
    f_max: float = 8000.0,
) -> MelFilterbankMatrix:
    """Triangular filters with unit peak height, centers equally spaced in mel.

    Filter n rises linearly from grid point n-1 to its center at grid point n
    and falls to grid point n+1, evaluated at FFT-bin frequencies.
    """
    nyquist = sample_rate / 2.0
    if not 0.0 <= f_min < f_max:
        raise ValueError(f"need 0 <= f_min < f_max, got [{f_min}, {f_max}]")
    if f_max > nyquist:
        raise ValueError(f"f_max {f_max} exceeds Nyquist {nyquist}")
    grid_hz = mel_scale_inv(
        np.linspace(mel_scale(f_min), mel_scale(f_max), n_filters + 2)
    )
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    weights = np.zeros((n_filters, n_fft // 2 + 1))
    for n in range(n_filters):
        lo, center, hi = grid_hz[n], grid_hz[n + 1], grid_hz[n + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        weights[n] = np.clip(np.minimum(rising, falling), 0.0, None)
    return MelFilterbankMatrix(weights, grid_hz[1:-1].copy(), n_fft, sample_rate)


def mel_energy_features(
    w: Waveform, cfg: MelConfig, matrix: MelFilterbankMatrix | None = None
) -> FeatureMap:
    """Hann-windowed power spectra projected through the filterbank, no
    compression. This is the input expected by energy normalization."""
    if matrix is None:
        matrix = mel_filterbank_matrix(
            cfg.n_filters, cfg.n_fft, cfg.sample_rate, cfg.f_min, cfg.f_max
        )
    frames = frame_signal(w, cfg.win_len, cfg.hop)
    windowed = frames * hanning_window(cfg.win_len).taps
    spectra = power_spectrum(windowed, cfg.n_fft)
    energies = spectra @ matrix.weights.T
    return FeatureMap(np.ascontiguousarray(energies.T), PRE_COMPRESSION_ENERGY)


def log_mel_features(
    w: Waveform, cfg: MelConfig, matrix: MelFilterbankMatrix | None = None
) -> FeatureMap:
    """log(1 + mel energy); the add-1 keeps zero input at exactly zero output
    and matches the compression used by the learnable path."""
    energies = mel_energy_features(w, cfg, matrix)
    return FeatureMap(np.log1p(energies.values), LOG_MEL)


def mean_variance_normalize(fm: FeatureMap) -> FeatureMap:
    """Per-channel standardization over frames (population std); channels with
    std below 1e-8 are centered only."""
    v = fm.values
    if v.shape[1] < 2:
        raise ValueError("mean-variance normalization needs at least 2 frames")
    mean = v.mean(axis=1, keepdims=True)
    std = v.std(axis=1, keepdims=True)
    degenerate = std < 1e-8
    out = (v - mean) / np.where(degenerate, 1.0, std)
    return FeatureMap(out, fm.channel_role)
