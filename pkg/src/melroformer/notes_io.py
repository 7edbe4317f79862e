"""Note-list files: JSON lines and single-track Standard MIDI."""

from __future__ import annotations

import json
import struct

from .pipeline import NoteEvent

TICKS_PER_QUARTER = 480
TEMPO_US_PER_QUARTER = 500_000  # 120 BPM
VELOCITY = 100


def dumps_jsonl(notes) -> str:
    notes = sorted(notes, key=lambda n: n.onset)
    return "".join(json.dumps({"onset": n.onset, "offset": n.offset, "pitch": int(n.pitch)}) + "\n" for n in notes)


def write_jsonl(path, notes) -> None:
    with open(path, "w") as f:
        f.write(dumps_jsonl(notes))


def read_jsonl(path) -> list[NoteEvent]:
    notes = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                notes.append(NoteEvent(float(d["onset"]), float(d["offset"]), int(d["pitch"])))
            except (KeyError, TypeError, json.JSONDecodeError) as e:
                raise ValueError(f"{path}:{lineno}: not a note record ({e})") from None
    return sorted(notes, key=lambda n: n.onset)


def _vlq(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _seconds_to_ticks(t: float) -> int:
    return int(round(t * 1e6 / TEMPO_US_PER_QUARTER * TICKS_PER_QUARTER))


def midi_bytes(notes) -> bytes:
    events = []  # (tick, order, message); note-offs sort before note-ons at the same tick
    for n in notes:
        events.append((_seconds_to_ticks(n.onset), 1, bytes([0x90, n.pitch, VELOCITY])))
        events.append((_seconds_to_ticks(n.offset), 0, bytes([0x80, n.pitch, 0])))
    events.sort(key=lambda e: (e[0], e[1]))
    track = bytearray(b"\x00\xff\x51\x03" + TEMPO_US_PER_QUARTER.to_bytes(3, "big"))
    now = 0
    for tick, _, msg in events:
        track += _vlq(tick - now) + msg
        now = tick
    track += b"\x00\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, TICKS_PER_QUARTER)
    return header + b"MTrk" + struct.pack(">I", len(track)) + bytes(track)


def write_midi(path, notes) -> None:
    with open(path, "wb") as f:
        f.write(midi_bytes(notes))
