"""Frequency-to-Mel-band mapping and the per-band input projection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .diffcore import rmsnorm

__all__ = [
    "MelBandMap",
    "hz_to_mel",
    "mel_to_hz",
    "mel_filterbank",
    "build_mel_band_map",
    "slice_band",
    "BandProjection",
    "band_project",
]

# Slaney Auditory Toolbox scale: linear below 1 kHz, logarithmic above.
_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(freq):
    freq = np.asarray(freq, dtype=np.float64)
    mel = freq / _F_SP
    log_region = freq >= _MIN_LOG_HZ
    return np.where(log_region, _MIN_LOG_MEL + np.log(np.maximum(freq, 1e-300) / _MIN_LOG_HZ) / _LOGSTEP, mel)


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    freq = _F_SP * mel
    log_region = mel >= _MIN_LOG_MEL
    return np.where(log_region, _MIN_LOG_HZ * np.exp(_LOGSTEP * (mel - _MIN_LOG_MEL)), freq)


def mel_filterbank(sample_rate: int, n_fft: int, num_bands: int, f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    """Triangular, area-normalised Mel filters, shape ``(num_bands, n_fft // 2 + 1)``."""
    if f_max is None:
        f_max = sample_rate / 2.0
    bin_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), num_bands + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - bin_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


@dataclass
class MelBandMap:
    """``bands[k] = (start, end)``, an inclusive range of STFT bins."""

    bands: list[tuple[int, int]]
    n_bins: int
    sample_rate: int | None = None
    n_fft: int | None = None
    overlap_count: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.bands = [(int(s), int(e)) for s, e in self.bands]
        for k, (s, e) in enumerate(self.bands):
            if not 0 <= s <= e < self.n_bins:
                raise ValueError(f"band {k} range [{s}, {e}] is empty or outside 0..{self.n_bins - 1}")
        counts = np.zeros(self.n_bins, dtype=np.int64)
        for s, e in self.bands:
            counts[s : e + 1] += 1
        self.overlap_count = counts

    @property
    def num_bands(self) -> int:
        return len(self.bands)

    @property
    def widths(self) -> list[int]:
        return [e - s + 1 for s, e in self.bands]

    def bins(self, k: int) -> np.ndarray:
        s, e = self.bands[k]
        return np.arange(s, e + 1)

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "n_fft": self.n_fft,
            "n_bins": self.n_bins,
            "bands": [[s, e] for s, e in self.bands],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MelBandMap":
        n_bins = d.get("n_bins")
        if n_bins is None:
            n_bins = d["n_fft"] // 2 + 1
        return cls([tuple(b) for b in d["bands"]], n_bins, d.get("sample_rate"), d.get("n_fft"))

    @classmethod
    def loads(cls, text: str) -> "MelBandMap":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, MelBandMap):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def build_mel_band_map(sample_rate: int, n_fft: int, num_bands: int, f_min: float = 0.0, f_max: float | None = None) -> MelBandMap:
    """Binarise a Mel filter-bank: each band is the non-zero support of one filter."""
    if f_max is None:
        f_max = sample_rate / 2.0
    if num_bands < 1:
        raise ValueError("num_bands must be at least 1")
    if not 0 <= f_min < f_max <= sample_rate / 2.0:
        raise ValueError(f"need 0 <= f_min < f_max <= {sample_rate / 2.0}, got f_min={f_min}, f_max={f_max}")
    fb = mel_filterbank(sample_rate, n_fft, num_bands, f_min, f_max)
    bands = []
    for k, row in enumerate(fb):
        nz = np.flatnonzero(row)
        if nz.size == 0:
            raise ValueError(f"mel band {k} covers no STFT bin; use fewer bands or a larger n_fft")
        bands.append((int(nz[0]), int(nz[-1])))
    return MelBandMap(bands, n_fft // 2 + 1, sample_rate, n_fft)


def slice_band(spec: torch.Tensor, band_map: MelBandMap, k: int) -> torch.Tensor:
    """Band ``k`` of ``(..., C, F, T)`` flattened channel-major to ``(..., C*|F_k|, T)``."""
    if not 0 <= k < band_map.num_bands:
        raise IndexError(f"band index {k} out of range for {band_map.num_bands} bands")
    if spec.shape[-2] != band_map.n_bins:
        raise ValueError(f"spectrogram has {spec.shape[-2]} bins, band map expects {band_map.n_bins}")
    s, e = band_map.bands[k]
    x = spec[..., s : e + 1, :]
    return x.reshape(*x.shape[:-3], x.shape[-3] * x.shape[-2], x.shape[-1])


class BandProjection(nn.Module):
    """One RMSNorm + linear layer per band, mapping ``(B, C, F, T)`` to ``(B, D, K, T)``."""

    def __init__(self, band_map: MelBandMap, channels: int, dim: int, eps: float = 1e-8):
        super().__init__()
        self.band_map = band_map
        self.channels = channels
        self.dim = dim
        self.eps = eps
        sizes = [channels * w for w in band_map.widths]
        self.norm_gains = nn.ParameterList([nn.Parameter(torch.ones(n)) for n in sizes])
        self.linears = nn.ModuleList([nn.Linear(n, dim) for n in sizes])

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        if spec.shape[-3] != self.channels:
            raise ValueError(f"expected {self.channels} channel planes, got {spec.shape[-3]}")
        outs = []
        for k in range(self.band_map.num_bands):
            x = slice_band(spec, self.band_map, k).transpose(-1, -2)  # (B, T, C|F_k|)
            x = rmsnorm(x, self.norm_gains[k], self.eps)
            outs.append(self.linears[k](x))
        return torch.stack(outs, dim=-3).movedim(-1, -3)  # (B, D, K, T)


def band_project(spec: torch.Tensor, band_map: MelBandMap, params: BandProjection) -> torch.Tensor:
    if params.band_map != band_map:
        raise ValueError("projection parameters were built for a different band map")
    return params(spec)
