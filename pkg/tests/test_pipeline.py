import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from melroformer.dsp import AudioSignal
from melroformer.heads import Posteriorgram
from melroformer.losses import notes_to_targets
from melroformer.model import MelRoFormer, preset
from melroformer.pipeline import NoteEvent, check_monophonic, chunk, decode_notes, deframe, separate, transcribe
from melroformer.synthetic import random_melody


def tiny_config(**kw):
    return preset("24k-small", dim=8, layers=1, num_heads=2, bands=8, chunk_frames=20, dropout=0.0, **kw)


def empty_post(T=50):
    return np.zeros((60, T)), np.zeros((61, T))


def decode(on, fr):
    return decode_notes(Posteriorgram(torch.as_tensor(on), torch.as_tensor(fr)))


def test_decode_hand_trace_single_note():
    on, fr = empty_post()
    on[24, 10] = 0.9
    fr[24, 10:30] = 0.8
    assert decode(on, fr) == [NoteEvent(0.2, 0.6, 60)]


def test_decode_empty_and_unconfirmed():
    on, fr = empty_post()
    assert decode(on, fr) == []
    on[5, 10] = 0.9
    fr[5, :] = 0.1
    assert decode(on, fr) == []


def test_decode_plateau_gives_one_onset():
    on, fr = empty_post()
    on[3, 10:13] = 0.8
    fr[3, 10:20] = 0.9
    assert decode(on, fr) == [NoteEvent(0.2, 0.4, 39)]


def test_decode_stronger_onset_wins():
    on, fr = empty_post()
    on[3, 10], on[7, 11] = 0.6, 0.9
    fr[3, 10:20], fr[7, 11:20] = 0.9, 0.9
    assert decode(on, fr) == [NoteEvent(0.22, 0.4, 43)]


def test_decode_next_onset_ends_note():
    on, fr = empty_post()
    on[3, 10], on[7, 20] = 0.9, 0.9
    fr[3, 10:40], fr[7, 20:30] = 0.9, 0.9
    assert decode(on, fr) == [NoteEvent(0.2, 0.4, 39), NoteEvent(0.4, 0.6, 43)]


def test_decode_late_confirmation_and_min_length():
    on, fr = empty_post()
    on[3, 10] = 0.9
    fr[3, 12:16] = 0.5  # confirmed two frames late
    on[9, 30] = 0.9
    fr[9, 30] = 0.5  # one frame long
    assert decode(on, fr) == [NoteEvent(0.2, 0.32, 45 - 6)]


def test_decode_thresholds_inclusive():
    on, fr = empty_post()
    on[0, 5] = 0.45
    fr[0, 5:8] = 0.25
    assert decode(on, fr) == [NoteEvent(0.1, 0.16, 36)]
    on[0, 5] = 0.449
    assert decode(on, fr) == []


def test_decode_rejects_batched():
    with pytest.raises(ValueError):
        decode_notes(Posteriorgram(torch.zeros(2, 60, 5), torch.zeros(2, 61, 5)))


def round_trip(notes, T):
    tg = notes_to_targets(notes, T)
    return decode_notes(Posteriorgram(tg.onset_roll, tg.frame_roll[:61]))


@given(seed=st.integers(0, 2**32 - 1))
def test_encode_decode_round_trip(seed):
    rng = np.random.default_rng(seed)
    notes = random_melody(rng, 6.0, pitch_range=(36, 95), min_frames=2, max_frames=30, max_gap=8)
    assert round_trip(notes, 300) == notes


@given(seed=st.integers(0, 10_000))
def test_random_posteriors_monophonic_and_deterministic(seed):
    rng = np.random.default_rng(seed)
    on, fr = rng.uniform(size=(60, 80)) ** 4, rng.uniform(size=(61, 80))
    a, b = decode(on, fr), decode(on, fr)
    assert a == b
    check_monophonic(a)
    assert all(n.offset - n.onset >= 0.04 - 1e-12 for n in a)


def test_note_event_validation():
    with pytest.raises(ValueError):
        NoteEvent(1.0, 1.0, 60)
    with pytest.raises(ValueError):
        check_monophonic([NoteEvent(0, 1, 60), NoteEvent(0.5, 2, 61)])


def test_chunk_counts():
    x = np.arange(100.0)
    assert chunk(x, 100).shape == (1, 100)
    assert chunk(np.zeros(200), 100, 50).shape == (3, 100)
    c = chunk(np.arange(130.0), 100, 50)
    assert c.shape == (2, 100) and c[1, 79] == 129 and c[1, 80] == 0


@given(n=st.integers(1, 500), L=st.integers(1, 120), hop_frac=st.sampled_from([1, 2, 3]))
def test_deframe_inverts_chunk(n, L, hop_frac):
    hop = max(1, L // hop_frac)
    x = np.random.default_rng(n).standard_normal((2, n))
    y = deframe(chunk(x, L, hop), hop, n)
    assert np.array_equal(y, x) or np.allclose(y, x, rtol=0, atol=1e-15)


def test_deframe_averages():
    chunks = np.stack([np.full(4, 0.7), np.full(4, 0.7)])
    assert np.allclose(deframe(chunks, 2, 6), 0.7)
    ab = np.stack([np.full(4, 1.0), np.full(4, 3.0)])
    assert np.allclose(deframe(ab, 2, 6), [1, 1, 2, 2, 3, 3])
    single = np.arange(5.0)[None]
    assert np.array_equal(deframe(single, 5, 5), np.arange(5.0))
    with pytest.raises(ValueError):
        deframe(ab, 2, 10)


@pytest.mark.parametrize("n", [1, 500, 9600, 23456])
def test_separate_length_and_silence(n):
    torch.manual_seed(0)
    model = MelRoFormer(tiny_config())
    out = separate(model, AudioSignal(np.zeros(n), 24000))
    assert len(out) == n and np.all(out.samples == 0)


def test_separate_rejects_mismatch():
    model = MelRoFormer(tiny_config())
    with pytest.raises(ValueError):
        separate(model, AudioSignal(np.zeros(1000), 44100))
    with pytest.raises(ValueError):
        separate(model, AudioSignal(np.zeros((2, 1000)), 24000))
    with pytest.raises(ValueError):
        transcribe(model, AudioSignal(np.zeros(1000), 24000))


def test_transcribe_runs_and_is_monophonic():
    torch.manual_seed(0)
    model = MelRoFormer(tiny_config()).swap_head_for_transcription(0)
    notes = transcribe(model, AudioSignal(np.random.default_rng(0).standard_normal(30000) * 0.1, 24000))
    check_monophonic(notes)
