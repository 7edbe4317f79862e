"""End-to-end inference: chunking, overlap-and-average deframing, separation,
transcription and note decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .dsp import AudioSignal
from .heads import LOWEST_MIDI, Posteriorgram
from .model import SEPARATION, TRANSCRIPTION, MelRoFormer

__all__ = [
    "NoteEvent",
    "chunk",
    "deframe",
    "separate",
    "transcribe_posteriorgram",
    "transcribe",
    "swap_head_for_transcription",
    "decode_notes",
    "check_monophonic",
]

ONSET_THRESHOLD = 0.45
FRAME_THRESHOLD = 0.25
PEAK_RADIUS = 2  # frames either side for onset peak picking
CONFIRM_FRAMES = 3  # onset frame plus the two after it
MIN_NOTE_FRAMES = 2


@dataclass(frozen=True, order=True)
class NoteEvent:
    onset: float
    offset: float
    pitch: int

    def __post_init__(self):
        if not self.onset < self.offset:
            raise ValueError(f"note onset {self.onset} must precede offset {self.offset}")

    def to_dict(self) -> dict:
        return {"onset": self.onset, "offset": self.offset, "pitch": int(self.pitch)}


def check_monophonic(notes) -> None:
    for a, b in zip(notes, notes[1:]):
        if b.onset < a.onset:
            raise ValueError("notes are not sorted by onset")
        if b.onset < a.offset:
            raise ValueError(f"notes overlap: {a} and {b}")


def chunk(x: np.ndarray | torch.Tensor, chunk_len: int, hop: int | None = None):
    """Split the last axis into zero-padded windows of ``chunk_len`` every ``hop`` samples.

    Returns an array stacked on a new leading axis.
    """
    if chunk_len <= 0:
        raise ValueError("chunk_len must be positive")
    if hop is None:
        hop = chunk_len // 2
    if hop <= 0:
        raise ValueError("hop must be positive")
    n = x.shape[-1]
    count = math.ceil(max(n - chunk_len, 0) / hop) + 1
    is_torch = isinstance(x, torch.Tensor)
    pad = (count - 1) * hop + chunk_len - n
    if is_torch:
        xp = torch.nn.functional.pad(x, (0, pad))
        return torch.stack([xp[..., i * hop : i * hop + chunk_len] for i in range(count)])
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(0, pad)])
    return np.stack([xp[..., i * hop : i * hop + chunk_len] for i in range(count)])


def deframe(chunks, hop: int, length: int):
    """Overlap-and-average chunks back to ``length`` samples.

    Each output sample is the mean of the chunk values covering it; the zero
    padding beyond ``length`` never takes part.
    """
    count, chunk_len = chunks.shape[0], chunks.shape[-1]
    if count == 0:
        raise ValueError("no chunks to deframe")
    if (count - 1) * hop + chunk_len < length:
        raise ValueError("chunks do not cover the requested length")
    total = (count - 1) * hop + chunk_len
    if isinstance(chunks, torch.Tensor):
        acc = chunks.new_zeros(tuple(chunks.shape[1:-1]) + (total,))
        cover = chunks.new_zeros(total)
    else:
        acc = np.zeros(chunks.shape[1:-1] + (total,), dtype=chunks.dtype)
        cover = np.zeros(total, dtype=chunks.dtype)
    for i in range(count):
        acc[..., i * hop : i * hop + chunk_len] += chunks[i]
        cover[i * hop : i * hop + chunk_len] += 1
    return acc[..., :length] / cover[:length]


def _check_input(model: MelRoFormer, audio: AudioSignal):
    cfg = model.config
    if audio.sample_rate != cfg.sample_rate:
        raise ValueError(f"audio is {audio.sample_rate} Hz but the model expects {cfg.sample_rate} Hz; resample first")
    if audio.channels != cfg.channels:
        raise ValueError(f"audio has {audio.channels} channel(s) but the model expects {cfg.channels}; downmix first")


@torch.no_grad()
def separate(model: MelRoFormer, mixture: AudioSignal, batch_size: int = 4) -> AudioSignal:
    """Vocals estimate with the same length as ``mixture``."""
    model._require(SEPARATION)
    _check_input(model, mixture)
    cfg = model.config
    was_training = model.training
    model.eval()
    try:
        n = len(mixture)
        dtype = next(model.parameters()).dtype
        x = torch.as_tensor(mixture.samples, dtype=dtype)
        hop = cfg.chunk_samples // 2
        chunks = chunk(x, cfg.chunk_samples, hop)
        outs = [model.separate_waveform(chunks[i : i + batch_size]) for i in range(0, len(chunks), batch_size)]
        y = deframe(torch.cat(outs), hop, n)
    finally:
        model.train(was_training)
    return AudioSignal(y.numpy().astype(np.float64), mixture.sample_rate)


@torch.no_grad()
def transcribe_posteriorgram(model: MelRoFormer, audio: AudioSignal, batch_size: int = 4) -> Posteriorgram:
    model._require(TRANSCRIPTION)
    _check_input(model, audio)
    cfg = model.config
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        x = torch.as_tensor(audio.samples, dtype=dtype)
        hop = cfg.chunk_samples // 2
        chunks = chunk(x, cfg.chunk_samples, hop)
        on, fr = [], []
        for i in range(0, len(chunks), batch_size):
            post = model.posteriorgram(chunks[i : i + batch_size])
            on.append(post.onset)
            fr.append(post.frame)
        on, fr = torch.cat(on), torch.cat(fr)
        frames_per_chunk = on.shape[-1]
        frame_hop = frames_per_chunk * hop / cfg.chunk_samples
        if frame_hop != int(frame_hop):
            raise ValueError("chunk hop does not fall on the posteriorgram frame grid")
        n_frames = math.ceil(len(audio) * cfg.frame_rate / cfg.sample_rate)
        onset = deframe(on, int(frame_hop), n_frames)
        frame = deframe(fr, int(frame_hop), n_frames)
    finally:
        model.train(was_training)
    return Posteriorgram(onset, frame, cfg.frame_rate)


def transcribe(model: MelRoFormer, audio: AudioSignal, onset_threshold=ONSET_THRESHOLD, frame_threshold=FRAME_THRESHOLD) -> list[NoteEvent]:
    return decode_notes(transcribe_posteriorgram(model, audio), onset_threshold, frame_threshold)


def swap_head_for_transcription(sep_model: MelRoFormer, seed: int | None = None) -> MelRoFormer:
    return sep_model.swap_head_for_transcription(seed)


def decode_notes(
    post: Posteriorgram,
    onset_threshold: float = ONSET_THRESHOLD,
    frame_threshold: float = FRAME_THRESHOLD,
    lowest_midi: int = LOWEST_MIDI,
) -> list[NoteEvent]:
    """Turn onset/frame posteriors into a monophonic note list.

    A note starts at an onset peak (>= ``onset_threshold`` and maximal within
    two frames either side) whose pitch is confirmed by the frame posterior
    (>= ``frame_threshold``) in the onset frame or the two after it. Competing
    onsets within two frames of each other keep the stronger one. A note ends
    where its frame posterior (from the confirming frame on) drops below
    threshold or the next note starts; notes under two frames are dropped.
    """
    onset = np.asarray(torch.as_tensor(post.onset).detach().cpu(), dtype=np.float64)
    frame = np.asarray(torch.as_tensor(post.frame).detach().cpu(), dtype=np.float64)
    if onset.ndim != 2:
        raise ValueError("decode_notes expects a single (unbatched) posteriorgram")
    fps = post.frame_rate
    P, T = onset.shape

    candidates = []
    for p in range(P):
        row = onset[p]
        for t in np.flatnonzero(row >= onset_threshold):
            lo, hi = max(0, t - PEAK_RADIUS), min(T, t + PEAK_RADIUS + 1)
            # first frame of a plateau wins
            if row[t] < row[lo:hi].max() or (row[lo:t] >= row[t]).any():
                continue
            confirmed = np.flatnonzero(frame[p, t : t + CONFIRM_FRAMES] >= frame_threshold)
            if confirmed.size == 0:
                continue
            candidates.append((float(row[t]), int(t), p, int(t + confirmed[0])))

    # strongest first; ties go to the earlier frame, then the lower pitch
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    kept = []
    for cand in candidates:
        if all(abs(cand[1] - k[1]) > PEAK_RADIUS for k in kept):
            kept.append(cand)
    kept.sort(key=lambda c: c[1])

    notes = []
    for i, (_, t, p, confirm) in enumerate(kept):
        stop = kept[i + 1][1] if i + 1 < len(kept) else T
        # the pitch may switch on a frame or two after its onset
        end = min(confirm, stop - 1) + 1
        while end < stop and frame[p, end] >= frame_threshold:
            end += 1
        if end - t >= MIN_NOTE_FRAMES:
            notes.append(NoteEvent(t / fps, end / fps, lowest_midi + p))
    return notes
