"""Mel-RoFormer for vocal separation and vocal melody transcription."""

__version__ = "0.1.0"

from .dsp import AudioSignal, StftConfig, downmix_mono, istft, read_wav, resample, stft, write_wav
from .estimators import MelRoFormerSeparator, MelRoFormerTranscriber
from .eval import note_fmeasures, sdr
from .melband import MelBandMap, build_mel_band_map
from .model import PRESETS, MelRoFormer, ModelConfig, preset
from .pipeline import NoteEvent, decode_notes, separate, transcribe

__all__ = [
    "AudioSignal",
    "StftConfig",
    "stft",
    "istft",
    "resample",
    "downmix_mono",
    "read_wav",
    "write_wav",
    "MelBandMap",
    "build_mel_band_map",
    "ModelConfig",
    "PRESETS",
    "preset",
    "MelRoFormer",
    "NoteEvent",
    "separate",
    "transcribe",
    "decode_notes",
    "sdr",
    "note_fmeasures",
    "MelRoFormerSeparator",
    "MelRoFormerTranscriber",
]
