"""Shared signal primitives: windows, pre-emphasis, framing, radix-2 FFT.

Everything here is a pure function of its inputs and safe to call from
multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

HANNING = "hanning"
SQUARED_HANNING = "squared_hanning"


@dataclass(frozen=True)
class Window:
    taps: np.ndarray
    kind: str


@dataclass
class Waveform:
    """Mono audio samples (nominally in [-1, 1]) with their sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain NaN or Inf")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


def hanning_window(n_taps: int) -> Window:
    """Symmetric Hann window; the degenerate 1-tap window is [1]."""
    if n_taps < 1:
        raise ValueError(f"n_taps must be >= 1, got {n_taps}")
    if n_taps == 1:
        taps = np.ones(1)
    else:
        i = np.arange(n_taps)
        taps = 0.5 * (1.0 - np.cos(2.0 * np.pi * i / (n_taps - 1)))
    return Window(taps=taps, kind=HANNING)


def squared_hanning_window(n_taps: int) -> Window:
    taps = hanning_window(n_taps).taps ** 2
    return Window(taps=taps, kind=SQUARED_HANNING)


def preemphasis(w: Waveform, coeff: float) -> Waveform:
    """First-order high-pass: out[t] = in[t] - coeff * in[t-1], out[0] = in[0]."""
    if not 0.0 <= coeff < 1.0:
        raise ValueError(f"pre-emphasis coefficient must be in [0, 1), got {coeff}")
    x = w.samples
    out = np.empty_like(x)
    out[0] = x[0]
    out[1:] = x[1:] - coeff * x[:-1]
    return Waveform(out, w.sample_rate)


def frame_signal(w: Waveform, win_len: int, hop: int) -> np.ndarray:
    """Slice into full overlapping frames; trailing samples that do not fill
    a window are dropped. Returns an (n_frames, win_len) array."""
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    n = len(w)
    if win_len > n:
        raise ValueError(f"win_len {win_len} exceeds signal length {n}; pad first")
    return np.ascontiguousarray(sliding_window_view(w.samples, win_len)[::hop])


# Bit-reversal permutations and per-stage twiddle factors, cached by size.
_fft_tables: dict[int, tuple[np.ndarray, list[np.ndarray]]] = {}


def _tables(n: int) -> tuple[np.ndarray, list[np.ndarray]]:
    cached = _fft_tables.get(n)
    if cached is None:
        bits = n.bit_length() - 1
        work = np.arange(n)
        rev = np.zeros(n, dtype=np.intp)
        for _ in range(bits):
            rev = (rev << 1) | (work & 1)
            work >>= 1
        twiddles = []
        m = 2
        while m <= n:
            twiddles.append(np.exp(-2j * np.pi * np.arange(m // 2) / m))
            m *= 2
        cached = (rev, twiddles)
        _fft_tables[n] = cached
    return cached


def fft_radix2(x: np.ndarray, n: int | None = None) -> np.ndarray:
    """Iterative Cooley-Tukey FFT over the last axis.

    n must be a power of two and at least the input length; shorter inputs
    are zero-padded.
    """
    x = np.asarray(x)
    if n is None:
        n = x.shape[-1]
    if n < 1 or (n & (n - 1)) != 0:
        raise ValueError(f"transform size must be a power of two, got {n}")
    if x.shape[-1] > n:
        raise ValueError(f"input length {x.shape[-1]} exceeds transform size {n}")
    if x.shape[-1] < n:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, n - x.shape[-1])]
        x = np.pad(x, pad)
    rev, twiddles = _tables(n)
    a = np.asarray(x[..., rev], dtype=np.complex128)
    if n == 1:
        return a
    batch = a.shape[:-1]
    a = a.reshape(-1, n)
    for stage, tw in enumerate(twiddles):
        m = 2 << stage
        half = m >> 1
        a3 = a.reshape(-1, n // m, m)
        u = a3[:, :, :half]
        v = a3[:, :, half:] * tw
        a3[:, :, half:] = u - v
        a3[:, :, :half] = u + v
    return a.reshape(*batch, n)


def power_spectrum(frame: np.ndarray, n_fft: int) -> np.ndarray:
    """Squared-magnitude spectrum |DFT|^2 at bins 0 .. n_fft/2 (last axis)."""
    frame = np.asarray(frame, dtype=np.float64)
    if n_fft < frame.shape[-1]:
        raise ValueError(
            f"n_fft {n_fft} smaller than frame length {frame.shape[-1]}"
        )
    spec = fft_radix2(frame, n_fft)[..., : n_fft // 2 + 1]
    return spec.real**2 + spec.imag**2
