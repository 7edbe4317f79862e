"""Separation loss (waveform + multi-resolution spectrogram MAE) and transcription BCE."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .heads import NON_PITCH, NUM_PITCHES, Posteriorgram

__all__ = [
    "MultiResLossConfig",
    "NoteTargets",
    "analysis_spectrogram",
    "separation_loss",
    "separation_loss_arguments",
    "transcription_loss",
    "transcription_loss_from_logits",
    "notes_to_targets",
]

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class MultiResLossConfig:
    window_sizes: tuple[int, ...] = (4096, 2048, 1024, 512, 256)
    frame_rates: tuple[float, ...] = (100.0, 300.0)

    def hops(self, sample_rate: int) -> list[int]:
        return [max(1, round(sample_rate / r)) for r in self.frame_rates]


@dataclass
class NoteTargets:
    onset_roll: torch.Tensor  # (..., 60, T_f) in {0, 1}
    frame_roll: torch.Tensor  # (..., 61, T_f) in {0, 1}


def analysis_spectrogram(x: torch.Tensor, window_size: int, hop: int) -> torch.Tensor:
    """Centred Hann STFT of ``(..., n)`` as ``(..., F, T, 2)``.

    Only used for the loss, so ``hop`` may exceed the window.
    """
    n = x.shape[-1]
    lead = x.shape[:-1]
    pad_mode = "reflect" if n > window_size // 2 else "constant"
    window = torch.hann_window(window_size, periodic=True, dtype=x.dtype, device=x.device)
    z = torch.stft(
        x.reshape(-1, n),
        n_fft=window_size,
        hop_length=hop,
        window=window,
        center=True,
        pad_mode=pad_mode,
        return_complex=True,
    )
    z = torch.view_as_real(z)
    return z.reshape(*lead, *z.shape[-3:])


def separation_loss(
    est: torch.Tensor,
    target: torch.Tensor,
    sample_rate: int,
    cfg: MultiResLossConfig = MultiResLossConfig(),
) -> torch.Tensor:
    """Waveform MAE plus the MAE of real/imag planes at every (window, rate) pair."""
    if est.shape != target.shape:
        raise ValueError(f"estimate shape {tuple(est.shape)} differs from target shape {tuple(target.shape)}")
    loss = (est - target).abs().mean()
    diff = est - target  # STFT is linear
    for w in cfg.window_sizes:
        for hop in cfg.hops(sample_rate):
            loss = loss + analysis_spectrogram(diff, w, hop).abs().mean()
    return loss


def separation_loss_arguments(
    est: torch.Tensor,
    target: torch.Tensor,
    sample_rate: int,
    cfg: MultiResLossConfig = MultiResLossConfig(),
) -> torch.Tensor:
    """Every value the separation loss takes an absolute value of, flattened (its kink set)."""
    diff = est - target
    parts = [diff.reshape(-1)]
    for w in cfg.window_sizes:
        for hop in cfg.hops(sample_rate):
            parts.append(analysis_spectrogram(diff, w, hop).reshape(-1))
    return torch.cat(parts)


def _bce(p: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    p = p.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    return -(t * torch.log(p) + (1 - t) * torch.log1p(-p)).mean()


def transcription_loss(post: Posteriorgram, targets: NoteTargets) -> torch.Tensor:
    if post.onset.shape != targets.onset_roll.shape or post.frame.shape != targets.frame_roll.shape:
        raise ValueError("posteriorgram and targets differ in shape")
    for roll in (targets.onset_roll, targets.frame_roll):
        if not bool(((roll == 0) | (roll == 1)).all()):
            raise ValueError("targets must be binary")
    return _bce(post.onset, targets.onset_roll.to(post.onset.dtype)) + _bce(post.frame, targets.frame_roll.to(post.frame.dtype))


def transcription_loss_from_logits(onset_logits: torch.Tensor, frame_logits: torch.Tensor, targets: NoteTargets) -> torch.Tensor:
    """Same objective as :func:`transcription_loss`, evaluated on pre-sigmoid logits.

    Values agree wherever the posteriors sit inside the clamp range. Unlike the
    clamped form, saturated cells keep a gradient, so a head that has pushed a
    true onset far below 1e-7 can still recover.
    """
    if onset_logits.shape != targets.onset_roll.shape or frame_logits.shape != targets.frame_roll.shape:
        raise ValueError("logits and targets differ in shape")
    on = F.binary_cross_entropy_with_logits(onset_logits, targets.onset_roll.to(onset_logits.dtype))
    fr = F.binary_cross_entropy_with_logits(frame_logits, targets.frame_roll.to(frame_logits.dtype))
    return on + fr


def notes_to_targets(notes, num_frames: int, frame_rate: float = 50.0, lowest_midi: int = 36) -> NoteTargets:
    """Rasterise monophonic notes onto the frame grid.

    Onset and offset times round to the nearest frame; the onset roll marks one
    frame per note and the frame roll is active on ``[onset, offset)``.
    """
    onset = torch.zeros(NUM_PITCHES, num_frames)
    frame = torch.zeros(NUM_PITCHES + 1, num_frames)
    for note in notes:
        p = int(note.pitch) - lowest_midi
        if not 0 <= p < NUM_PITCHES:
            raise ValueError(f"pitch {note.pitch} outside MIDI {lowest_midi}..{lowest_midi + NUM_PITCHES - 1}")
        on = int(round(note.onset * frame_rate))
        off = int(round(note.offset * frame_rate))
        if on >= num_frames:
            continue
        if on >= 0:
            onset[p, on] = 1.0
        frame[p, max(on, 0) : min(off, num_frames)] = 1.0
    frame[NON_PITCH] = (frame[:NUM_PITCHES].sum(0) == 0).float()
    return NoteTargets(onset, frame)
