"""Synthetic clips for toy training runs and tests."""

from __future__ import annotations

import numpy as np
from scipy import signal as sps

from .pipeline import NoteEvent


def sine_sweep(duration: float, sample_rate: int, f_start: float, f_end: float, amplitude: float = 0.3) -> np.ndarray:
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    # exponential sweep: instantaneous frequency moves geometrically from f_start to f_end
    k = np.log(f_end / f_start) / duration
    phase = 2 * np.pi * f_start * (np.exp(k * t) - 1) / k
    return amplitude * np.sin(phase)


def filtered_noise(duration: float, sample_rate: int, rng: np.random.Generator, band=(60.0, 400.0), rms: float = 0.1) -> np.ndarray:
    n = int(round(duration * sample_rate))
    sos = sps.butter(4, band, btype="bandpass", fs=sample_rate, output="sos")
    x = sps.sosfilt(sos, rng.standard_normal(n))
    return x * (rms / np.sqrt(np.mean(x**2)))


def separation_toy_set(n_examples: int = 4, duration: float = 6.0, sample_rate: int = 24000, seed: int = 0):
    """``(mixture, vocals)`` pairs shaped ``(1, n)``: a sine sweep over band-passed noise."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_examples):
        f0 = rng.uniform(500.0, 900.0)
        f1 = rng.uniform(1500.0, 3000.0)
        if rng.random() < 0.5:
            f0, f1 = f1, f0
        vocal = sine_sweep(duration, sample_rate, f0, f1)
        accomp = filtered_noise(duration, sample_rate, rng)
        pairs.append(((vocal + accomp)[None, :], vocal[None, :]))
    return pairs


def midi_to_hz(pitch):
    return 440.0 * 2.0 ** ((np.asarray(pitch, dtype=np.float64) - 69) / 12)


def random_melody(
    rng: np.random.Generator,
    duration: float,
    frame_rate: float = 50.0,
    pitch_range=(48, 84),
    min_frames: int = 2,
    max_frames: int = 40,
    max_gap: int = 15,
) -> list[NoteEvent]:
    """Monophonic notes on the frame grid, each at least ``min_frames`` long with >= 1 frame gaps."""
    total = int(round(duration * frame_rate))
    notes = []
    t = int(rng.integers(1, max_gap + 1))
    while True:
        length = int(rng.integers(min_frames, max_frames + 1))
        if t + length >= total:
            break
        pitch = int(rng.integers(pitch_range[0], pitch_range[1] + 1))
        notes.append(NoteEvent(t / frame_rate, (t + length) / frame_rate, pitch))
        t += length + int(rng.integers(1, max_gap + 1))
    return notes


def render_melody(notes, duration: float, sample_rate: int, amplitude: float = 0.3) -> np.ndarray:
    """Harmonic tones with short linear fades, one per note."""
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    fade = int(0.005 * sample_rate)
    for note in notes:
        a, b = int(round(note.onset * sample_rate)), min(n, int(round(note.offset * sample_rate)))
        t = np.arange(b - a) / sample_rate
        f = midi_to_hz(note.pitch)
        tone = sum(np.sin(2 * np.pi * h * f * t) / h for h in (1, 2, 3) if h * f < sample_rate / 2)
        env = np.ones(b - a)
        m = min(fade, (b - a) // 2)
        if m:
            env[:m] = np.linspace(0, 1, m)
            env[-m:] = np.linspace(1, 0, m)
        out[a:b] += amplitude * tone * env
    return out


def transcription_toy_set(n_clips: int = 10, duration: float = 3.0, sample_rate: int = 24000, seed: int = 0, **melody_kw):
    """``(audio (1, n), notes)`` pairs of rendered random melodies."""
    rng = np.random.default_rng(seed)
    melody_kw.setdefault("min_frames", 10)
    melody_kw.setdefault("max_frames", 30)
    melody_kw.setdefault("max_gap", 10)
    clips = []
    for _ in range(n_clips):
        notes = random_melody(rng, duration, **melody_kw)
        clips.append((render_melody(notes, duration, sample_rate)[None, :], notes))
    return clips
