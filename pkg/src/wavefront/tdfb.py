"""Learnable time-domain filterbank.

Layer stack: complex 1-D convolution (1 -> 2N channels, stride 1, "same"
zero padding), modulus and square fused as real^2 + imag^2 (2N -> N), fixed
squared-Hann lowpass convolution with decimation (valid, stride = hop),
absolute value, optional log(1 + x). The first convolution's taps are
initialized as Gabor wavelets matching the mel triangles and carry analytic
gradients; the lowpass never receives gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .dsp import Waveform, fft_radix2, squared_hanning_window
from .melfb import (
    PRE_COMPRESSION_ENERGY,
    TDFB_OUT,
    FeatureMap,
    MelFilterbankMatrix,
    mel_filterbank_matrix,
    mel_scale,
    mel_scale_inv,
)


@dataclass(frozen=True)
class GaborParams:
    center_freqs_hz: np.ndarray  # strictly increasing, in (0, Nyquist)
    sigmas_s: np.ndarray  # time-domain Gaussian widths in seconds, > 0


@dataclass
class TdfbParams:
    conv_taps: np.ndarray  # (2 * n_filters, kernel_width); rows 2n real, 2n+1 imag
    lowpass_taps: np.ndarray  # fixed L1-normalized squared Hann, never trained
    conv_stride: int
    lowpass_stride: int
    apply_log: bool
    sample_rate: int

    @property
    def n_filters(self) -> int:
        return self.conv_taps.shape[0] // 2

    @property
    def kernel_width(self) -> int:
        return self.conv_taps.shape[1]

    @property
    def lowpass_width(self) -> int:
        return self.lowpass_taps.shape[0]


@dataclass
class TdfbCache:
    """Forward intermediates retained for the backward pass."""

    params: TdfbParams
    frames: np.ndarray  # (kernel_width, n_samples): row j is padded input x[j : j+L]
    conv_re: np.ndarray  # (n_filters, n_samples)
    conv_im: np.ndarray
    pooled: np.ndarray  # (n_filters, n_frames) pre-abs, pre-log
    pad_left: int


def gabor_params_from_mel(melfb: MelFilterbankMatrix) -> GaborParams:
    """Centers come from the mel peaks; each Gaussian's frequency-response
    FWHM is matched to the triangle's half-height width:
    sigma = sqrt(2 ln 2) / (pi * width_hz)."""
    centers = melfb.center_freqs_hz
    if centers.size < 2:
        raise ValueError("need at least 2 filters to recover the mel grid")
    mels = mel_scale(centers)
    spacing = mels[1] - mels[0]  # grid is uniform in mel by construction
    lower = mel_scale_inv(np.maximum(mels - spacing, 0.0))
    upper = mel_scale_inv(mels + spacing)
    fwhm_hz = (upper - lower) / 2.0
    if np.any(fwhm_hz <= 0):
        raise ValueError("degenerate mel triangle with zero width")
    sigmas = np.sqrt(2.0 * np.log(2.0)) / (np.pi * fwhm_hz)
    return GaborParams(centers.copy(), sigmas)


def gabor_impulse_response(
    p: GaborParams, n: int, width: int, sample_rate: int
) -> np.ndarray:
    """Complex taps of filter n on a centered integer grid (t = 0 at index
    (width - 1) // 2); Gaussian envelope carries unit L1 mass."""
    t = np.arange(width, dtype=np.float64) - (width - 1) // 2
    sigma = p.sigmas_s[n] * sample_rate  # width in samples
    envelope = np.exp(-0.5 * (t / sigma) ** 2) / (np.sqrt(2.0 * np.pi) * sigma)
    carrier = np.exp(2j * np.pi * p.center_freqs_hz[n] * t / sample_rate)
    return envelope * carrier


def init_tdfb_params(
    melfb: MelFilterbankMatrix,
    kernel_width: int = 400,
    lowpass_width: int = 400,
    lowpass_stride: int = 160,
    apply_log: bool = True,
) -> TdfbParams:
    gabor = gabor_params_from_mel(melfb)
    n = melfb.n_filters
    lp_raw = squared_hanning_window(lowpass_width).taps
    # Amplitude match to the reference path: the mel energies sum raw |DFT|^2
    # bins while this path averages |conv|^2 through the unit-sum lowpass, a
    # gap of n_fft * sum(hann^2) / (2 pi) at initialization. Folding its
    # square root into the taps puts both paths on one scale, so the shared
    # log compression and the downstream classifier see comparable inputs.
    amplitude = np.sqrt(melfb.n_fft * lp_raw.sum() / (2.0 * np.pi))
    taps = np.empty((2 * n, kernel_width))
    for i in range(n):
        g = amplitude * gabor_impulse_response(
            gabor, i, kernel_width, melfb.sample_rate
        )
        taps[2 * i] = g.real
        taps[2 * i + 1] = g.imag
    lp = lp_raw / lp_raw.sum()  # constant input maps to the same constant
    return TdfbParams(
        conv_taps=taps,
        lowpass_taps=lp,
        conv_stride=1,
        lowpass_stride=lowpass_stride,
        apply_log=apply_log,
        sample_rate=melfb.sample_rate,
    )


def tdfb_forward(w: Waveform, p: TdfbParams) -> tuple[FeatureMap, TdfbCache]:
    """Run the layer stack on one waveform.

    Returns the feature map (n_filters, n_frames) and the cache needed by
    tdfb_backward. n_frames = (len(w) - lowpass_width) // lowpass_stride + 1.
    """
    if p.conv_stride != 1:
        raise ValueError("only stride-1 first convolution is supported")
    x = w.samples
    n = x.size
    k = p.kernel_width
    k2 = p.lowpass_width
    hop = p.lowpass_stride
    if n < k2:
        raise ValueError(f"waveform length {n} shorter than lowpass width {k2}")
    pad_left = (k - 1) // 2
    xp = np.concatenate([np.zeros(pad_left), x, np.zeros(k - 1 - pad_left)])
    # Row j of `frames` is xp[j : j+n]; correlation y[t] = sum_j taps[j] xp[t+j]
    # becomes one matrix product per tap row group.
    frames = np.empty((k, n))
    for j in range(k):
        frames[j] = xp[j : j + n]
    w_re = np.ascontiguousarray(p.conv_taps[0::2])
    w_im = np.ascontiguousarray(p.conv_taps[1::2])
    conv_re = w_re @ frames
    conv_im = w_im @ frames
    energy = conv_re * conv_re + conv_im * conv_im  # modulus then square, fused
    n_frames = (n - k2) // hop + 1
    s0, s1 = energy.strides
    windows = as_strided(
        energy, (energy.shape[0], n_frames, k2), (s0, s1 * hop, s1)
    )
    pooled = windows @ p.lowpass_taps
    feat = np.abs(pooled)
    out = np.log1p(feat) if p.apply_log else feat
    role = TDFB_OUT if p.apply_log else PRE_COMPRESSION_ENERGY
    cache = TdfbCache(
        params=p,
        frames=frames,
        conv_re=conv_re,
        conv_im=conv_im,
        pooled=pooled,
        pad_left=pad_left,
    )
    return FeatureMap(out, role), cache


def tdfb_backward(
    grad_out: np.ndarray, cache: TdfbCache, need_input_grad: bool = True
) -> tuple[np.ndarray, np.ndarray | None]:
    """Exact gradients of a scalar loss w.r.t. the conv taps and (optionally)
    the input waveform. The lowpass taps are fixed and receive none."""
    p = cache.params
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache.pooled.shape:
        raise ValueError(
            f"grad shape {g.shape} does not match forward output {cache.pooled.shape}"
        )
    if p.apply_log:
        g = g / (1.0 + np.abs(cache.pooled))
    # abs subgradient: 0 at exactly-zero output (pooled is >= 0 elsewhere).
    g = g * np.sign(cache.pooled)
    n_filters, n = cache.conv_re.shape
    k2 = p.lowpass_width
    hop = p.lowpass_stride
    d_energy = np.zeros((n_filters, n))
    lp = p.lowpass_taps
    for frame in range(g.shape[1]):
        start = frame * hop
        d_energy[:, start : start + k2] += g[:, frame, None] * lp
    d_re = 2.0 * cache.conv_re * d_energy
    d_im = 2.0 * cache.conv_im * d_energy
    grad_taps = np.empty_like(p.conv_taps)
    grad_taps[0::2] = d_re @ cache.frames.T
    grad_taps[1::2] = d_im @ cache.frames.T
    grad_wave = None
    if need_input_grad:
        w_re = p.conv_taps[0::2]
        w_im = p.conv_taps[1::2]
        q = w_re.T @ d_re + w_im.T @ d_im  # (kernel_width, n)
        k = p.kernel_width
        dxp = np.zeros(n + k - 1)
        for j in range(k):
            dxp[j : j + n] += q[j]
        grad_wave = dxp[cache.pad_left : cache.pad_left + n]
    return grad_taps, grad_wave


def center_frequency_report(
    p: TdfbParams, n_fft: int = 512
) -> list[tuple[int, float, float]]:
    """Per-filter (index, learned center Hz, initial mel center Hz).

    The learned center is the peak of the filter's n_fft-point DFT magnitude;
    the initial column is the canonical mel grid for this layout.
    """
    init_centers = mel_filterbank_matrix(
        p.n_filters, n_fft, p.sample_rate, 0.0, p.sample_rate / 2.0
    ).center_freqs_hz
    rows = []
    for i in range(p.n_filters):
        taps = p.conv_taps[2 * i] + 1j * p.conv_taps[2 * i + 1]
        mag = np.abs(fft_radix2(taps, n_fft))[: n_fft // 2 + 1]
        learned_hz = float(np.argmax(mag) * p.sample_rate / n_fft)
        rows.append((i, learned_hz, float(init_centers[i])))
    return rows
