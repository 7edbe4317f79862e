"""RoPE Transformer encoders and the interleaved time/band stack."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .diffcore import rmsnorm, softmax

__all__ = [
    "EncoderConfig",
    "InterleavedStackConfig",
    "rope_angles",
    "rope_rotate",
    "attention_logits",
    "Attention",
    "EncoderBlock",
    "InterleavedStack",
    "interleaved_stack",
]


@dataclass
class EncoderConfig:
    dim: int = 128
    num_heads: int = 8
    ffn_multiplier: int = 4
    dropout: float = 0.1
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.dim % self.num_heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.num_heads} heads")
        if self.head_dim % 2:
            raise ValueError(f"head dimension {self.head_dim} must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads


@dataclass
class InterleavedStackConfig:
    layers: int = 12
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")


def rope_angles(positions: torch.Tensor, head_dim: int, base: float = 10000.0, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    if head_dim % 2:
        raise ValueError(f"head_dim must be even, got {head_dim}")
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    theta = positions.to(torch.float64)[:, None] * inv_freq[None, :]  # (seq, head_dim/2)
    return theta.cos().to(dtype), theta.sin().to(dtype)


def rope_rotate(x: torch.Tensor, positions: torch.Tensor | None = None, base: float = 10000.0) -> torch.Tensor:
    """Rotate dimension pairs ``(2i, 2i+1)`` of ``(..., seq, head_dim)`` by ``pos * base**(-2i/head_dim)``."""
    seq, head_dim = x.shape[-2], x.shape[-1]
    if positions is None:
        positions = torch.arange(seq)
    cos, sin = rope_angles(torch.as_tensor(positions), head_dim, base, x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return out.flatten(-2)


def attention_logits(q, k, q_positions=None, k_positions=None, base: float = 10000.0):
    """Scaled dot-product logits after applying RoPE to queries and keys."""
    q = rope_rotate(q, q_positions, base)
    k = rope_rotate(k, k_positions, base)
    return q @ k.transpose(-1, -2) * q.shape[-1] ** -0.5


class Attention(nn.Module):
    """Multi-head self-attention with rotary position encoding on q and k."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.to_qkv = nn.Linear(cfg.dim, 3 * cfg.dim, bias=False)
        self.to_out = nn.Linear(cfg.dim, cfg.dim, bias=False)

    def forward(self, x: torch.Tensor, explicit: bool = False) -> torch.Tensor:
        *lead, seq, dim = x.shape
        if dim != self.cfg.dim:
            raise ValueError(f"expected model dim {self.cfg.dim}, got {dim}")
        h = self.cfg.num_heads
        qkv = self.to_qkv(x).reshape(*lead, seq, 3, h, dim // h)
        qkv = qkv.movedim(-3, 0).transpose(-2, -3).contiguous()  # (3, ..., heads, seq, head_dim)
        q, k, v = qkv.unbind(0)
        q = rope_rotate(q, None, self.cfg.rope_base)
        k = rope_rotate(k, None, self.cfg.rope_base)
        if explicit:
            weights = softmax(q @ k.transpose(-1, -2) * q.shape[-1] ** -0.5, axis=-1)
            out = weights @ v
        else:
            # the fused CPU kernel only accepts 4-D inputs
            out = F.scaled_dot_product_attention(*(t.reshape(-1, h, seq, dim // h) for t in (q, k, v)))
            out = out.reshape(*lead, h, seq, dim // h)
        out = out.transpose(-2, -3).reshape(*lead, seq, dim)
        return self.to_out(out)


class EncoderBlock(nn.Module):
    """Pre-norm block: residual attention, then residual feed-forward."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.attn_norm = nn.Parameter(torch.ones(cfg.dim))
        self.attn = Attention(cfg)
        self.ffn_norm = nn.Parameter(torch.ones(cfg.dim))
        hidden = cfg.ffn_multiplier * cfg.dim
        self.ffn_in = nn.Linear(cfg.dim, hidden)
        self.ffn_out = nn.Linear(hidden, cfg.dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attn(rmsnorm(x, self.attn_norm)))
        h = F.gelu(self.ffn_in(rmsnorm(x, self.ffn_norm)))
        return x + self.drop(self.ffn_out(self.drop(h)))

    def zero_output_projections(self):
        with torch.no_grad():
            self.attn.to_out.weight.zero_()
            self.ffn_out.weight.zero_()
            self.ffn_out.bias.zero_()


class InterleavedStack(nn.Module):
    """``layers`` pairs of (time encoder, band encoder) over a ``(B, D, K, T)`` grid."""

    def __init__(self, cfg: InterleavedStackConfig):
        super().__init__()
        self.cfg = cfg
        self.time_blocks = nn.ModuleList([EncoderBlock(cfg.encoder) for _ in range(cfg.layers)])
        self.band_blocks = nn.ModuleList([EncoderBlock(cfg.encoder) for _ in range(cfg.layers)])

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-3] != self.cfg.encoder.dim:
            raise ValueError(f"expected {self.cfg.encoder.dim} features on axis -3, got {h.shape[-3]}")
        x = h.movedim(-3, -1)  # (..., K, T, D): each band is a time sequence
        for time_block, band_block in zip(self.time_blocks, self.band_blocks):
            x = time_block(x)
            x = band_block(x.transpose(-2, -3)).transpose(-2, -3)
        return x.movedim(-1, -3)


def interleaved_stack(h: torch.Tensor, stack: InterleavedStack) -> torch.Tensor:
    return stack(h)
