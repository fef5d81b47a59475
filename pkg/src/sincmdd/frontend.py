"""Learnable sinc bandpass filterbank and the log-mel FBANK baseline.

A sinc filter is the difference of two ideal low-pass impulse responses,

    g[t] = 2 f2 sinc(2 pi f2 t) - 2 f1 sinc(2 pi f1 t),    sinc(x) = sin(x) / x,

with cutoffs in cycles/sample, so only (f1, f2) are learned per filter. Its
derivatives are closed-form, d g / d f2 = 2 cos(2 pi f2 t), which is what the
custom autograd function below uses.

Frame-count arithmetic for :class:`SincFrontend` (valid sinc convolution, then
non-overlapping max pooling after every stage)::

    T = floor(floor(floor((N - K + 1) / p0) / p1) / p2)
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Waveform

LOG_OFFSET = 1e-6
FBANK_LOG_FLOOR = 1e-10
MIN_BAND_HZ = 50.0
MIN_LOW_HZ = 30.0
PARAM_UNIT_HZ = 100.0  # default unit of the trainable cutoffs


class ConfigError(ValueError):
    pass


def sinc(x):
    """sin(x)/x with sinc(0) = 1. Accepts scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    safe = np.where(x == 0.0, 1.0, x)
    out = np.where(x == 0.0, 1.0, np.sin(safe) / safe)
    return float(out) if out.ndim == 0 else out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class SincFilterbankParams:
    """Per-filter cutoff parameters in Hz; see :meth:`cutoffs` for the mapping."""

    theta_low: np.ndarray
    theta_band: np.ndarray
    kernel_length: int = 251
    sample_rate_hz: int = 16000
    min_band_hz: float = MIN_BAND_HZ

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.theta_low, dtype=np.float64))
        bw = np.atleast_1d(np.asarray(self.theta_band, dtype=np.float64))
        if lo.shape != bw.shape or lo.ndim != 1 or lo.size < 1:
            raise ConfigError("theta_low and theta_band must be equal-length 1-D arrays")
        if self.kernel_length < 1 or self.kernel_length % 2 == 0:
            raise ConfigError(f"kernel_length must be odd and positive, got {self.kernel_length}")
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample rate must be positive")
        object.__setattr__(self, "theta_low", lo)
        object.__setattr__(self, "theta_band", bw)

    @property
    def filter_count(self) -> int:
        return self.theta_low.size

    def cutoffs(self) -> tuple[np.ndarray, np.ndarray]:
        """(f1, f2) in Hz with 0 <= f1 <= f2 <= Nyquist."""
        nyq = self.sample_rate_hz / 2
        f1 = np.minimum(np.abs(self.theta_low), nyq - self.min_band_hz)
        f2 = np.minimum(f1 + np.abs(self.theta_band) + self.min_band_hz, nyq)
        return f1, f2

    @classmethod
    def mel_init(cls, filter_count: int = 80, kernel_length: int = 251, sample_rate_hz: int = 16000):
        """Cutoffs equally spaced on the mel scale between 30 Hz and Nyquist.

        The top edge stops one minimum band short of Nyquist so that no filter
        starts on the clamp, where the cutoff gradient is one-sided.
        """
        top = sample_rate_hz / 2 - MIN_BAND_HZ
        edges = mel_to_hz(np.linspace(hz_to_mel(MIN_LOW_HZ), hz_to_mel(top), filter_count + 1))
        return cls(edges[:-1], np.diff(edges) - MIN_BAND_HZ, kernel_length, sample_rate_hz)

    @classmethod
    def from_cutoffs(cls, f1_hz, f2_hz, kernel_length: int = 251, sample_rate_hz: int = 16000):
        """Exact cutoffs, no minimum band."""
        f1 = np.atleast_1d(np.asarray(f1_hz, dtype=np.float64))
        f2 = np.atleast_1d(np.asarray(f2_hz, dtype=np.float64))
        if np.any(f1 < 0) or np.any(f2 < f1) or np.any(f2 > sample_rate_hz / 2):
            raise ConfigError("need 0 <= f1 <= f2 <= Nyquist")
        return cls(f1, f2 - f1, kernel_length, sample_rate_hz, min_band_hz=0.0)


def time_offsets(kernel_length: int) -> np.ndarray:
    half = (kernel_length - 1) // 2
    return np.arange(-half, half + 1, dtype=np.float64)


def normalization_nfft(kernel_length: int) -> int:
    return 1 << math.ceil(math.log2(4 * kernel_length))


class _SincBandpass(torch.autograd.Function):
    """Raw (unwindowed) bandpass kernels with closed-form cutoff derivatives."""

    @staticmethod
    def forward(ctx, f1, f2, t):
        # f1, f2: (F,) cycles/sample; t: (K,) integer offsets
        ctx.save_for_backward(f1, f2, t)
        tt = t.unsqueeze(0)
        zero = tt == 0
        safe_t = torch.where(zero, torch.ones_like(tt), tt)
        s2 = torch.sin(2 * math.pi * f2.unsqueeze(1) * tt)
        s1 = torch.sin(2 * math.pi * f1.unsqueeze(1) * tt)
        g = (s2 - s1) / (math.pi * safe_t)
        return torch.where(zero, 2 * (f2 - f1).unsqueeze(1).expand_as(g), g)

    @staticmethod
    def backward(ctx, grad_g):
        f1, f2, t = ctx.saved_tensors
        tt = t.unsqueeze(0)
        d_f2 = 2 * torch.cos(2 * math.pi * f2.unsqueeze(1) * tt)
        d_f1 = -2 * torch.cos(2 * math.pi * f1.unsqueeze(1) * tt)
        return (grad_g * d_f1).sum(1), (grad_g * d_f2).sum(1), None


def sinc_bandpass(f1: torch.Tensor, f2: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    return _SincBandpass.apply(f1, f2, t)


def hamming(kernel_length: int, dtype=torch.float64) -> torch.Tensor:
    if kernel_length == 1:
        return torch.ones(1, dtype=dtype)
    n = torch.arange(kernel_length, dtype=dtype)
    return 0.54 - 0.46 * torch.cos(2 * math.pi * n / (kernel_length - 1))


def build_kernels(
    theta_low: torch.Tensor,
    theta_band: torch.Tensor,
    kernel_length: int,
    sample_rate_hz: int,
    min_band_hz: float = MIN_BAND_HZ,
    unit_hz: float = 1.0,
) -> torch.Tensor:
    """Windowed, peak-normalized kernels (F, K). ``theta_*`` are in units of ``unit_hz``."""
    nyq = sample_rate_hz / 2
    f1 = torch.clamp(torch.abs(theta_low) * unit_hz, max=nyq - min_band_hz)
    f2 = torch.clamp(f1 + torch.abs(theta_band) * unit_hz + min_band_hz, max=nyq)
    dtype = theta_low.dtype
    t = torch.as_tensor(time_offsets(kernel_length), dtype=dtype)
    g = sinc_bandpass(f1 / sample_rate_hz, f2 / sample_rate_hz, t)
    g = g * hamming(kernel_length, dtype)
    peak = torch.fft.rfft(g, n=normalization_nfft(kernel_length)).abs().amax(dim=1, keepdim=True)
    # a degenerate (f1 == f2) filter is identically zero and stays zero
    return g / torch.clamp(peak, min=1e-12)


def raw_sinc_kernels(params: SincFilterbankParams) -> np.ndarray:
    """Unwindowed, unnormalized kernels straight from the cutoff formula."""
    f1, f2 = params.cutoffs()
    fs = params.sample_rate_hz
    t = time_offsets(params.kernel_length)[None, :]
    return 2 * (f2[:, None] / fs) * sinc(2 * np.pi * (f2[:, None] / fs) * t) - 2 * (
        f1[:, None] / fs
    ) * sinc(2 * np.pi * (f1[:, None] / fs) * t)


def materialize_filters(params: SincFilterbankParams) -> np.ndarray:
    """One windowed, peak-normalized kernel per filter, shape (F, K)."""
    with torch.no_grad():
        k = build_kernels(
            torch.as_tensor(params.theta_low),
            torch.as_tensor(params.theta_band),
            params.kernel_length,
            params.sample_rate_hz,
            params.min_band_hz,
        )
    return k.numpy()


def ideal_frequency_response(f1: float, f2: float, f: float) -> float:
    """Rectangular passband: 1 inside (f1, f2), 0 outside, 0.5 on either edge."""
    if f < 0:
        raise ValueError("frequency must be non-negative")
    if not 0 <= f1 <= f2:
        raise ValueError("need 0 <= f1 <= f2")
    if f1 == f2:
        return 0.0
    if f1 < f < f2:
        return 1.0
    if f == f1 or f == f2:
        return 0.5
    return 0.0


def measured_frequency_response(kernel, nfft: int = 512, sample_rate_hz: int = 16000):
    """(freqs_hz, |DFT|) of the zero-padded kernel on nfft // 2 + 1 bins."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if nfft < kernel.size:
        raise ValueError(f"nfft={nfft} shorter than kernel ({kernel.size})")
    mag = np.abs(np.fft.rfft(kernel, n=nfft))
    freqs = np.fft.rfftfreq(nfft, d=1.0 / sample_rate_hz)
    return freqs, mag


def band_masks(freqs, f1: float, f2: float, kernel_length: int, sample_rate_hz: int):
    """Passband [f1, f2] and stopband (at least one transition width of 4 fs / K away)."""
    guard = 4.0 * sample_rate_hz / kernel_length
    passband = (freqs >= f1) & (freqs <= f2)
    stopband = (freqs <= f1 - guard) | (freqs >= f2 + guard)
    return passband, stopband


@dataclass(frozen=True)
class FrontendConfig:
    filter_count: int = 80
    kernel_length: int = 251
    conv_layer_filters: tuple[int, ...] = (128, 128)
    conv_kernel_sizes: tuple[int, ...] = (3, 3)
    pooling: tuple[int, ...] = (160, 1, 1)  # after sinc layer, then after each conv layer
    nonlinearity: str = "leaky_relu"
    log_offset: float = LOG_OFFSET
    sample_rate_hz: int = 16000
    # Trainable cutoffs are stored as f / cutoff_unit_hz. Under plain SGD a
    # step moves a cutoff by lr * unit**2 * dL/df, so the unit sets the
    # effective cutoff learning rate.
    cutoff_unit_hz: float = PARAM_UNIT_HZ

    def __post_init__(self):
        if len(self.conv_layer_filters) != len(self.conv_kernel_sizes):
            raise ConfigError("conv_layer_filters and conv_kernel_sizes differ in length")
        if len(self.pooling) != len(self.conv_layer_filters) + 1:
            raise ConfigError("need one pooling factor for the sinc layer plus one per conv layer")
        if min(self.pooling) < 1:
            raise ConfigError("pooling factors must be >= 1")
        if self.kernel_length % 2 == 0:
            raise ConfigError("sinc kernel_length must be odd")
        if any(k % 2 == 0 for k in self.conv_kernel_sizes):
            raise ConfigError("conv kernel sizes must be odd for same-padding")
        if self.cutoff_unit_hz <= 0:
            raise ConfigError("cutoff_unit_hz must be positive")
        if self.nonlinearity not in _ACTIVATIONS:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def out_dim(self) -> int:
        return self.conv_layer_filters[-1] if self.conv_layer_filters else self.filter_count

    @property
    def frame_rate_hz(self) -> float:
        return self.sample_rate_hz / math.prod(self.pooling)

    def n_frames(self, n_samples: int) -> int:
        t = n_samples - self.kernel_length + 1
        for p in self.pooling:
            t //= p
        return max(t, 0)


_ACTIVATIONS = {
    "leaky_relu": lambda x: F.leaky_relu(x, 0.2),
    "relu": F.relu,
    "tanh": torch.tanh,
}


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray
    frame_rate_hz: float

    def __post_init__(self):
        x = np.asarray(self.frames, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("feature sequence needs shape (T>=1, D)")
        object.__setattr__(self, "frames", x)

    @property
    def T(self) -> int:
        return self.frames.shape[0]


def _mask_time(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    # x: (B, C, T); zero every frame at or beyond each sequence's length
    keep = torch.arange(x.shape[-1]).unsqueeze(0) < lengths.unsqueeze(1)
    return x * keep.unsqueeze(1).to(x.dtype)


class SincFrontend(nn.Module):
    """Sinc layer -> |.| -> max-pool -> log, then same-padded conv layers with pooling."""

    def __init__(
        self,
        cfg: FrontendConfig,
        params: SincFilterbankParams | None = None,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.cfg = cfg
        if params is None:
            params = SincFilterbankParams.mel_init(cfg.filter_count, cfg.kernel_length, cfg.sample_rate_hz)
        if params.filter_count != cfg.filter_count or params.kernel_length != cfg.kernel_length:
            raise ConfigError("filterbank params do not match the frontend config")
        self.min_band_hz = params.min_band_hz
        self.theta_low = nn.Parameter(torch.tensor(params.theta_low / cfg.cutoff_unit_hz, dtype=dtype))
        self.theta_band = nn.Parameter(torch.tensor(params.theta_band / cfg.cutoff_unit_hz, dtype=dtype))
        gen = torch.Generator().manual_seed(seed)
        convs = []
        in_ch = cfg.filter_count
        for out_ch, k in zip(cfg.conv_layer_filters, cfg.conv_kernel_sizes):
            conv = nn.Conv1d(in_ch, out_ch, k, padding=k // 2, dtype=dtype)
            bound = 1.0 / math.sqrt(in_ch * k)
            with torch.no_grad():
                conv.weight.uniform_(-bound, bound, generator=gen)
                conv.bias.uniform_(-bound, bound, generator=gen)
            convs.append(conv)
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.act = _ACTIVATIONS[cfg.nonlinearity]
        # frozen standardization of the log-compressed filter outputs; identity
        # until set from training data (see set_log_stats)
        self.register_buffer("log_mean", torch.zeros(cfg.filter_count, dtype=dtype))
        self.register_buffer("log_std", torch.ones(cfg.filter_count, dtype=dtype))

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def filterbank_params(self) -> SincFilterbankParams:
        return SincFilterbankParams(
            self.theta_low.detach().double().numpy() * self.cfg.cutoff_unit_hz,
            self.theta_band.detach().double().numpy() * self.cfg.cutoff_unit_hz,
            self.cfg.kernel_length,
            self.cfg.sample_rate_hz,
            self.min_band_hz,
        )

    def kernels(self) -> torch.Tensor:
        return build_kernels(
            self.theta_low,
            self.theta_band,
            self.cfg.kernel_length,
            self.cfg.sample_rate_hz,
            self.min_band_hz,
            unit_hz=self.cfg.cutoff_unit_hz,
        )

    def set_log_stats(self, mean: torch.Tensor, std: torch.Tensor) -> None:
        with torch.no_grad():
            self.log_mean.copy_(mean)
            self.log_std.copy_(torch.clamp(std, min=1e-3))

    def compressed(self, wave: torch.Tensor, lengths: torch.Tensor):
        """abs -> max-pool -> log(. + offset), before standardization: ((B, F, T), (B,))."""
        if int(lengths.min()) < self.cfg.kernel_length:
            raise ValueError(f"waveform shorter than the {self.cfg.kernel_length}-tap sinc kernel")
        p0 = self.cfg.pooling[0]
        x = self.filter_outputs(wave).abs()
        t_len = torch.div(lengths - self.cfg.kernel_length + 1, p0, rounding_mode="floor")
        x = F.max_pool1d(x, p0) if p0 > 1 else x
        return torch.log(x + self.cfg.log_offset), t_len

    def filter_outputs(self, wave: torch.Tensor) -> torch.Tensor:
        """Sinc convolution only: (B, N) -> (B, F, N - K + 1)."""
        k = self.kernels().to(wave.dtype)
        # conv1d is cross-correlation; flipping is a no-op for the symmetric kernels
        return F.conv1d(wave.unsqueeze(1), k.unsqueeze(1))

    def output_lengths(self, n_samples: torch.Tensor) -> torch.Tensor:
        t = n_samples - self.cfg.kernel_length + 1
        for p in self.cfg.pooling:
            t = torch.div(t, p, rounding_mode="floor")
        return t

    def forward(self, wave: torch.Tensor, lengths: torch.Tensor | None = None):
        """(B, N) waveforms -> ((B, T, D) features, (B,) frame counts)."""
        if lengths is None:
            lengths = torch.full((wave.shape[0],), wave.shape[1], dtype=torch.long)
        x, t_len = self.compressed(wave, lengths)
        x = (x - self.log_mean.unsqueeze(1)) / self.log_std.unsqueeze(1)
        x = _mask_time(x, t_len)
        for conv, p in zip(self.convs, self.cfg.pooling[1:]):
            x = self.act(conv(x))
            if p > 1:
                x = F.max_pool1d(x, p)
                t_len = torch.div(t_len, p, rounding_mode="floor")
            x = _mask_time(x, t_len)
        if int(t_len.min()) < 1:
            raise ValueError("waveform too short to produce a single frame")
        return x.transpose(1, 2), t_len


def _frontend_for(params: SincFilterbankParams, cfg: FrontendConfig, seed: int) -> SincFrontend:
    cfg = replace(cfg, filter_count=params.filter_count, kernel_length=params.kernel_length)
    return SincFrontend(cfg, params, seed=seed, dtype=torch.float64)


def sinc_forward(
    wave: Waveform, params: SincFilterbankParams, cfg: FrontendConfig, seed: int = 0
) -> FeatureSequence:
    """Features for one waveform; conv-stack weights come from ``seed``."""
    if len(wave) < params.kernel_length:
        raise ValueError(f"waveform has {len(wave)} samples, kernel needs {params.kernel_length}")
    fe = _frontend_for(params, cfg, seed)
    with torch.no_grad():
        feats, _ = fe(torch.as_tensor(wave.samples).unsqueeze(0))
    return FeatureSequence(feats[0].numpy(), fe.cfg.frame_rate_hz)


def sinc_backward(
    wave: Waveform,
    params: SincFilterbankParams,
    cfg: FrontendConfig,
    upstream: np.ndarray,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Gradient of sum(upstream * features) w.r.t. the cutoffs (per Hz) and conv weights."""
    fe = _frontend_for(params, cfg, seed)
    feats, _ = fe(torch.as_tensor(wave.samples).unsqueeze(0))
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != tuple(feats.shape[1:]):
        raise ValueError(f"upstream gradient shape {upstream.shape} != features {tuple(feats.shape[1:])}")
    (feats[0] * torch.as_tensor(upstream)).sum().backward()
    grads = {
        "theta_low": fe.theta_low.grad.numpy() / fe.cfg.cutoff_unit_hz,
        "theta_band": fe.theta_band.grad.numpy() / fe.cfg.cutoff_unit_hz,
    }
    for i, conv in enumerate(fe.convs):
        grads[f"conv{i}.weight"] = conv.weight.grad.numpy().copy()
        grads[f"conv{i}.bias"] = conv.bias.grad.numpy().copy()
    return grads


# --- FBANK ------------------------------------------------------------------

def mel_filterbank(n_mels: int, nfft: int, sample_rate_hz: int, fmin: float = 0.0, fmax: float | None = None):
    """Triangular filters on the HTK mel scale, shape (n_mels, nfft // 2 + 1)."""
    fmax = sample_rate_hz / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(nfft, d=1.0 / sample_rate_hz)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def fbank(
    wave: Waveform,
    n_mels: int = 80,
    window_ms: float = 25.0,
    hop_ms: float = 10.0,
    nfft: int = 1024,
) -> FeatureSequence:
    """Log mel energies; T = floor((N - window) / hop) + 1, log floored at 1e-10."""
    fs = wave.sample_rate_hz
    win = int(round(window_ms * fs / 1000))
    hop = int(round(hop_ms * fs / 1000))
    x = wave.samples
    if x.size < win:
        raise ValueError(f"waveform has {x.size} samples, one window needs {win}")
    n_frames = (x.size - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(win)[None, :]
    power = np.abs(np.fft.rfft(frames, n=nfft)) ** 2
    energies = power @ mel_filterbank(n_mels, nfft, fs).T
    return FeatureSequence(np.log(np.maximum(energies, FBANK_LOG_FLOOR)), 1000.0 / hop_ms)


# --- export -----------------------------------------------------------------

def filter_responses(params: SincFilterbankParams, nfft: int = 512):
    kernels = materialize_filters(params)
    rows = []
    freqs = None
    for k in kernels:
        freqs, mag = measured_frequency_response(k, nfft, params.sample_rate_hz)
        rows.append(mag)
    mags = np.array(rows)
    avg = mags.mean(axis=0)
    peak = avg.max()
    avg = avg / peak if peak > 0 else avg
    return freqs, mags, avg


def export_filters(params: SincFilterbankParams, path: str | Path, nfft: int = 512) -> None:
    """CSV ``filter_id,freq_hz,magnitude``; the normalized average response uses filter_id -1."""
    freqs, mags, avg = filter_responses(params, nfft)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["filter_id", "freq_hz", "magnitude"])
        for i, mag in enumerate(mags):
            for fr, m in zip(freqs, mag):
                w.writerow([i, repr(float(fr)), repr(float(m))])
        for fr, m in zip(freqs, avg):
            w.writerow([-1, repr(float(fr)), repr(float(m))])
