"""Signal processing: STFT/iSTFT, resampling, downmixing and WAV I/O.

Spectrogram tensors use a real layout ``(..., C, F, T)`` where the real and
imaginary planes of each audio channel are interleaved along ``C``:
``[ch0.re, ch0.im, ch1.re, ch1.im]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
from scipy import signal as sps
from scipy.io import wavfile

__all__ = [
    "AudioSignal",
    "StftConfig",
    "ComplexSpectrogram",
    "stft",
    "istft",
    "spectrogram",
    "inverse_spectrogram",
    "num_frames",
    "resample",
    "downmix_mono",
    "read_wav",
    "write_wav",
]

RESAMPLE_TAPS_PER_PHASE = 64


@dataclass
class AudioSignal:
    """Multichannel audio, ``samples`` shaped ``(channels, n)``."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise ValueError(f"samples must be (channels, n), got shape {samples.shape}")
        if samples.shape[0] not in (1, 2):
            raise ValueError(f"only mono or stereo audio is supported, got {samples.shape[0]} channels")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = samples

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 1024
    hop_size: int = 480
    window: str = "hann"
    center: bool = True

    def __post_init__(self):
        if self.window_size <= 0 or self.hop_size <= 0:
            raise ValueError("window_size and hop_size must be positive")
        if self.hop_size > self.window_size:
            raise ValueError(f"hop_size {self.hop_size} exceeds window_size {self.window_size}")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def invertible(self) -> bool:
        # truncated centre framing: the last frame must reach the final sample
        return self.window == "rect" or self.hop_size <= self.window_size // 2

    @property
    def n_bins(self) -> int:
        return self.window_size // 2 + 1

    def window_tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        if self.window == "rect":
            return torch.ones(self.window_size, dtype=dtype, device=device)
        return torch.hann_window(self.window_size, periodic=True, dtype=dtype, device=device)


@dataclass
class ComplexSpectrogram:
    data: torch.Tensor  # (..., C, F, T)
    sample_rate: int
    window_size: int
    hop_size: int

    def __post_init__(self):
        C, F = self.data.shape[-3], self.data.shape[-2]
        if C not in (2, 4):
            raise ValueError(f"channel planes must be 2 (mono) or 4 (stereo), got {C}")
        if F != self.window_size // 2 + 1:
            raise ValueError(f"expected {self.window_size // 2 + 1} bins, got {F}")

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def audio_channels(self) -> int:
        return self.data.shape[-3] // 2


def num_frames(length: int, hop_size: int) -> int:
    return math.ceil(length / hop_size)


def spectrogram(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """STFT of ``x`` shaped ``(..., channels, n)`` into ``(..., 2*channels, F, T)``.

    ``T = ceil(n / hop)``. Frames are centred with reflect padding; inputs too
    short to reflect fall back to zero padding. Differentiable.
    """
    if x.shape[-1] == 0:
        raise ValueError("cannot transform an empty signal")
    lead = x.shape[:-1]
    n = x.shape[-1]
    flat = x.reshape(-1, n)
    pad_mode = "reflect" if n > cfg.window_size // 2 else "constant"
    spec = torch.stft(
        flat,
        n_fft=cfg.window_size,
        hop_length=cfg.hop_size,
        window=cfg.window_tensor(x.dtype, x.device),
        center=cfg.center,
        pad_mode=pad_mode,
        return_complex=True,
    )
    if cfg.center:
        spec = spec[..., : num_frames(n, cfg.hop_size)]
    spec = torch.view_as_real(spec)  # (B, F, T, 2)
    F_, T_ = spec.shape[1], spec.shape[2]
    # (B, F, T, 2) -> (..., channels, 2, F, T) -> (..., 2*channels, F, T)
    spec = spec.permute(0, 3, 1, 2).reshape(*lead[:-1], lead[-1] * 2, F_, T_)
    return spec


def inverse_spectrogram(spec: torch.Tensor, cfg: StftConfig, length: int) -> torch.Tensor:
    """Inverse of :func:`spectrogram`; returns ``(..., channels, length)``."""
    C, F_, T_ = spec.shape[-3:]
    if F_ != cfg.n_bins:
        raise ValueError(f"spectrogram has {F_} bins but config expects {cfg.n_bins}")
    if C % 2:
        raise ValueError("channel planes must come in real/imaginary pairs")
    if not cfg.invertible:
        raise ValueError(f"hop {cfg.hop_size} is too large to invert a {cfg.window_size}-sample hann window")
    lead = spec.shape[:-3]
    z = spec.reshape(-1, 2, F_, T_).permute(0, 2, 3, 1).contiguous()
    z = torch.view_as_complex(z)
    x = torch.istft(
        z,
        n_fft=cfg.window_size,
        hop_length=cfg.hop_size,
        window=cfg.window_tensor(spec.dtype, spec.device),
        center=cfg.center,
        length=length,
    )
    return x.reshape(*lead, C // 2, length)


def stft(sig: AudioSignal, cfg: StftConfig) -> ComplexSpectrogram:
    if len(sig) == 0:
        raise ValueError("cannot transform an empty signal")
    x = torch.as_tensor(np.ascontiguousarray(sig.samples), dtype=torch.float64)
    data = spectrogram(x, cfg)
    return ComplexSpectrogram(data, sig.sample_rate, cfg.window_size, cfg.hop_size)


def istft(spec: ComplexSpectrogram, cfg: StftConfig, length: int) -> AudioSignal:
    if spec.window_size != cfg.window_size or spec.hop_size != cfg.hop_size:
        raise ValueError(
            f"spectrogram was made with window={spec.window_size}, hop={spec.hop_size}; "
            f"got window={cfg.window_size}, hop={cfg.hop_size}"
        )
    x = inverse_spectrogram(spec.data, cfg, length)
    return AudioSignal(x.detach().cpu().numpy(), spec.sample_rate)


def _resample_filter(up: int, down: int) -> np.ndarray:
    n_taps = RESAMPLE_TAPS_PER_PHASE * up
    h = sps.firwin(n_taps, 1.0 / max(up, down), window=("kaiser", 8.0))
    return h


def resample(sig: AudioSignal, target_rate: int) -> AudioSignal:
    """Polyphase windowed-sinc resampling (64 taps per phase)."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == sig.sample_rate:
        return AudioSignal(sig.samples.copy(), sig.sample_rate)
    ratio = Fraction(target_rate, sig.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    h = _resample_filter(up, down)
    y = sps.resample_poly(sig.samples.astype(np.float64), up, down, axis=-1, window=h)
    return AudioSignal(y, target_rate)


def downmix_mono(sig: AudioSignal) -> AudioSignal:
    if sig.channels == 1:
        return AudioSignal(sig.samples.copy(), sig.sample_rate)
    return AudioSignal(sig.samples.mean(axis=0, keepdims=True), sig.sample_rate)


def read_wav(path) -> AudioSignal:
    """Read a PCM16 or float32 RIFF file into floats in [-1, 1]."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample type {data.dtype}")
    if data.ndim == 1:
        data = data[None, :]
    else:
        data = data.T
    return AudioSignal(data, int(rate))


def write_wav(path, sig: AudioSignal, subtype: str = "float32") -> None:
    data = np.asarray(sig.samples).T
    if subtype == "float32":
        out = data.astype(np.float32)
    elif subtype == "pcm16":
        out = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    if out.shape[1] == 1:
        out = out[:, 0]
    wavfile.write(path, sig.sample_rate, out)
