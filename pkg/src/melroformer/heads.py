"""Embedding projection, mask assembly/application and transcription predictors."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .diffcore import glu, mean_pool, rmsnorm
from .melband import MelBandMap

__all__ = [
    "NUM_PITCHES",
    "LOWEST_MIDI",
    "NON_PITCH",
    "Posteriorgram",
    "EmbeddingProjection",
    "embedding_projection",
    "mask_scatter_index",
    "assemble_mask",
    "apply_mask",
    "OnsetHead",
    "FrameHead",
    "pool_to_frame_rate",
]

NUM_PITCHES = 60
LOWEST_MIDI = 36  # class i <-> MIDI 36 + i, i.e. C2..B6
NON_PITCH = NUM_PITCHES  # index of the extra frame-predictor class


@dataclass
class Posteriorgram:
    onset: torch.Tensor  # (..., 60, T_f)
    frame: torch.Tensor  # (..., 61, T_f)
    frame_rate: float = 50.0

    def __post_init__(self):
        if self.onset.shape[-2] != NUM_PITCHES or self.frame.shape[-2] != NUM_PITCHES + 1:
            raise ValueError(
                f"expected ({NUM_PITCHES}, T) onsets and ({NUM_PITCHES + 1}, T) frames, "
                f"got {tuple(self.onset.shape)} and {tuple(self.frame.shape)}"
            )
        if self.onset.shape[-1] != self.frame.shape[-1]:
            raise ValueError("onset and frame posteriors have different lengths")

    @property
    def num_frames(self) -> int:
        return self.onset.shape[-1]


class EmbeddingProjection(nn.Module):
    """Per-band MLP: RMSNorm, D->4D linear, tanh, 4D->2Z_k linear, GLU."""

    def __init__(self, dim: int, output_sizes: list[int], eps: float = 1e-8):
        super().__init__()
        self.dim = dim
        self.output_sizes = list(output_sizes)
        self.eps = eps
        K = len(output_sizes)
        self.norm_gains = nn.ParameterList([nn.Parameter(torch.ones(dim)) for _ in range(K)])
        self.linear1 = nn.ModuleList([nn.Linear(dim, 4 * dim) for _ in range(K)])
        self.linear2 = nn.ModuleList([nn.Linear(4 * dim, 2 * z) for z in output_sizes])

    @property
    def num_bands(self) -> int:
        return len(self.output_sizes)

    @property
    def total_size(self) -> int:
        return sum(self.output_sizes)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        """``(B, D, K, T)`` -> ``(B, Z, T)``."""
        if h.shape[-3] != self.dim or h.shape[-2] != self.num_bands:
            raise ValueError(f"expected (..., {self.dim}, {self.num_bands}, T), got {tuple(h.shape)}")
        outs = []
        for k in range(self.num_bands):
            x = h[..., :, k, :].transpose(-1, -2)  # (B, T, D)
            x = rmsnorm(x, self.norm_gains[k], self.eps)
            x = torch.tanh(self.linear1[k](x))
            outs.append(glu(self.linear2[k](x), axis=-1))
        return torch.cat(outs, dim=-1).transpose(-1, -2)


def embedding_projection(h: torch.Tensor, params: EmbeddingProjection) -> torch.Tensor:
    return params(h)


def mask_scatter_index(band_map: MelBandMap, channels: int) -> torch.Tensor:
    """Target row ``c * F + f`` in the flattened mask for every row of the concatenated output."""
    F_ = band_map.n_bins
    idx = []
    for s, e in band_map.bands:
        bins = torch.arange(s, e + 1)
        for c in range(channels):
            idx.append(c * F_ + bins)
    return torch.cat(idx)


def assemble_mask(y: torch.Tensor, band_map: MelBandMap, channels: int) -> torch.Tensor:
    """Average overlapping band outputs into a ``(..., C, F, T)`` mask.

    Bins covered by no band get the pass-through value ``1 + 0i``.
    """
    F_ = band_map.n_bins
    expected = channels * sum(band_map.widths)
    if y.shape[-2] != expected:
        raise ValueError(f"expected {expected} output rows for this band map, got {y.shape[-2]}")
    *lead, Z, T = y.shape
    idx = mask_scatter_index(band_map, channels).to(y.device)
    flat = y.new_zeros(*lead, channels * F_, T).index_add(-2, idx, y)
    counts = torch.as_tensor(band_map.overlap_count, dtype=y.dtype, device=y.device)
    counts = counts.repeat(channels)[:, None]
    covered = counts > 0
    flat = torch.where(covered, flat / counts.clamp(min=1), flat)
    mask = flat.reshape(*lead, channels, F_, T)
    if not bool(covered.all()):
        passthrough = torch.zeros(channels, F_, 1, dtype=y.dtype, device=y.device)
        passthrough[0::2] = 1.0
        uncovered = torch.as_tensor(band_map.overlap_count == 0, device=y.device)[None, :, None]
        mask = torch.where(uncovered, passthrough, mask)
    return mask


def apply_mask(mask: torch.Tensor, spec: torch.Tensor) -> torch.Tensor:
    """Complex product per audio channel of interleaved real/imag planes."""
    if mask.shape != spec.shape:
        raise ValueError(f"mask shape {tuple(mask.shape)} differs from spectrogram shape {tuple(spec.shape)}")
    mr, mi = mask[..., 0::2, :, :], mask[..., 1::2, :, :]
    xr, xi = spec[..., 0::2, :, :], spec[..., 1::2, :, :]
    out = torch.stack((mr * xr - mi * xi, mr * xi + mi * xr), dim=-3)  # (..., ch, 2, F, T)
    return out.flatten(-4, -3)


class OnsetHead(nn.Module):
    def __init__(self, in_features: int, hidden: int = 512, dropout: float = 0.5):
        super().__init__()
        self.hidden = nn.Linear(in_features, hidden)
        self.drop = nn.Dropout(dropout)
        self.out = nn.Linear(hidden, NUM_PITCHES)

    def logits(self, e: torch.Tensor) -> torch.Tensor:
        x = e.transpose(-1, -2)
        x = self.drop(torch.relu(self.hidden(x)))
        return self.out(x).transpose(-1, -2)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        """``(B, 64K, T_f)`` -> onset posteriors ``(B, 60, T_f)``."""
        return torch.sigmoid(self.logits(e))


class FrameHead(nn.Module):
    def __init__(self, in_features: int):
        super().__init__()
        self.out = nn.Linear(in_features, NUM_PITCHES + 1)

    def logits(self, e: torch.Tensor) -> torch.Tensor:
        return self.out(e.transpose(-1, -2)).transpose(-1, -2)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(e))


def pool_to_frame_rate(y: torch.Tensor, source_rate: float, target_rate: float = 50.0) -> torch.Tensor:
    if source_rate <= 0 or target_rate <= 0:
        raise ValueError("frame rates must be positive")
    if source_rate == target_rate:
        return y
    T = y.shape[-1]
    target_len = max(1, round(T * target_rate / source_rate))
    return mean_pool(y, -1, target_len)
