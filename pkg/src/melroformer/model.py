"""Model configuration, presets and the assembled Mel-RoFormer network."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import torch
from torch import nn

from .dsp import StftConfig, inverse_spectrogram, spectrogram
from .heads import EmbeddingProjection, FrameHead, OnsetHead, Posteriorgram, apply_mask, assemble_mask, pool_to_frame_rate
from .melband import BandProjection, MelBandMap, build_mel_band_map
from .roformer import EncoderConfig, InterleavedStack, InterleavedStackConfig

__all__ = ["ModelConfig", "PRESETS", "preset", "MelRoFormer", "count_parameters"]

SEPARATION = "separation"
TRANSCRIPTION = "transcription"


@dataclass
class ModelConfig:
    mode: str = SEPARATION
    sample_rate: int = 24000
    channels: int = 1
    window_size: int = 1024
    hop_size: int = 480
    chunk_frames: int = 300
    bands: int = 32
    dim: int = 128
    layers: int = 12
    num_heads: int = 8
    ffn_multiplier: int = 4
    dropout: float = 0.1
    rope_base: float = 10000.0
    f_min: float = 0.0
    f_max: float | None = None
    # transcription
    band_embedding: int = 64
    onset_hidden: int = 512
    onset_dropout: float = 0.5
    frame_rate: float = 50.0

    def __post_init__(self):
        if self.mode not in (SEPARATION, TRANSCRIPTION):
            raise ValueError(f"mode must be {SEPARATION!r} or {TRANSCRIPTION!r}, got {self.mode!r}")
        if self.channels not in (1, 2):
            raise ValueError("channels must be 1 or 2")
        self.stft  # validates window/hop
        self.encoder

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.window_size, self.hop_size)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.dim, self.num_heads, self.ffn_multiplier, self.dropout, self.rope_base)

    @property
    def spec_channels(self) -> int:
        return 2 * self.channels

    @property
    def chunk_samples(self) -> int:
        return self.chunk_frames * self.hop_size

    @property
    def stft_frame_rate(self) -> float:
        return self.sample_rate / self.hop_size

    def band_map(self) -> MelBandMap:
        return build_mel_band_map(self.sample_rate, self.window_size, self.bands, self.f_min, self.f_max)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


PRESETS = {
    "flagship": ModelConfig(sample_rate=44100, channels=2, window_size=2048, hop_size=441, chunk_frames=800, bands=60, dim=384, layers=12),
    "24k-small": ModelConfig(sample_rate=24000, channels=1, window_size=1024, hop_size=480, chunk_frames=300, bands=32, dim=128, layers=12),
    "24k-large": ModelConfig(sample_rate=24000, channels=1, window_size=1024, hop_size=480, chunk_frames=300, bands=32, dim=256, layers=24),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    unknown = set(overrides) - {f.name for f in fields(ModelConfig)}
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    return replace(base, **overrides)


def count_parameters(module: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


class MelRoFormer(nn.Module):
    """Mel-band projection, interleaved RoFormer stack and a task head.

    In separation mode the embedding projection emits a complex mask; in
    transcription mode it emits 64 features per band that feed the onset
    and frame predictors.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.band_map = config.band_map()
        C = config.spec_channels
        self.band_projection = BandProjection(self.band_map, C, config.dim)
        self.stack = InterleavedStack(InterleavedStackConfig(config.layers, config.encoder))
        self._build_head()

    def _build_head(self):
        cfg = self.config
        if cfg.mode == SEPARATION:
            sizes = [cfg.spec_channels * w for w in self.band_map.widths]
            self.embedding = EmbeddingProjection(cfg.dim, sizes)
            self.onset_head = None
            self.frame_head = None
        else:
            sizes = [cfg.band_embedding] * cfg.bands
            self.embedding = EmbeddingProjection(cfg.dim, sizes)
            Z = sum(sizes)
            self.onset_head = OnsetHead(Z, cfg.onset_hidden, cfg.onset_dropout)
            self.frame_head = FrameHead(Z)

    @property
    def mode(self) -> str:
        return self.config.mode

    def backbone_modules(self) -> list[nn.Module]:
        return [self.band_projection, self.stack]

    def head_modules(self) -> list[nn.Module]:
        mods = [self.embedding]
        if self.onset_head is not None:
            mods += [self.onset_head, self.frame_head]
        return mods

    def embed(self, spec: torch.Tensor) -> torch.Tensor:
        """Complex spectrogram ``(B, C, F, T)`` -> embedding-projection output ``(B, Z, T)``."""
        h = self.band_projection(spec)
        h = self.stack(h)
        return self.embedding(h)

    def estimate_mask(self, spec: torch.Tensor) -> torch.Tensor:
        return assemble_mask(self.embed(spec), self.band_map, self.config.spec_channels)

    def separate_waveform(self, audio: torch.Tensor) -> torch.Tensor:
        """Separate ``(B, channels, n)`` audio of at most one chunk."""
        self._require(SEPARATION)
        n = audio.shape[-1]
        spec = spectrogram(audio, self.config.stft)
        est = apply_mask(self.estimate_mask(spec), spec)
        return inverse_spectrogram(est, self.config.stft, n)

    def transcription_logits(self, audio: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._require(TRANSCRIPTION)
        spec = spectrogram(audio, self.config.stft)
        e = pool_to_frame_rate(self.embed(spec), self.config.stft_frame_rate, self.config.frame_rate)
        return self.onset_head.logits(e), self.frame_head.logits(e)

    def posteriorgram(self, audio: torch.Tensor) -> Posteriorgram:
        on, fr = self.transcription_logits(audio)
        return Posteriorgram(torch.sigmoid(on), torch.sigmoid(fr), self.config.frame_rate)

    def forward(self, audio: torch.Tensor):
        if self.mode == SEPARATION:
            return self.separate_waveform(audio)
        return self.posteriorgram(audio)

    def _require(self, mode):
        if self.mode != mode:
            raise ValueError(f"this is a {self.mode} model, {mode} requested")

    def swap_head_for_transcription(self, seed: int | None = None) -> "MelRoFormer":
        """New transcription model sharing copies of this model's backbone weights.

        The embedding projection is re-initialised with 64 outputs per band and
        fresh onset/frame predictors are attached.
        """
        self._require(SEPARATION)
        cfg = replace(self.config, mode=TRANSCRIPTION)
        with torch.random.fork_rng():
            if seed is not None:
                torch.manual_seed(seed)
            new = MelRoFormer(cfg)
        new.band_projection.load_state_dict(self.band_projection.state_dict())
        new.stack.load_state_dict(self.stack.state_dict())
        new.to(next(self.parameters()).dtype)
        return new
