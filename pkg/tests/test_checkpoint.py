import struct

import pytest
import torch

from melroformer.checkpoint import FORMAT_VERSION, CheckpointError, load_checkpoint, load_model, save_checkpoint
from melroformer.model import MelRoFormer, preset
from melroformer.train import OptimizerState, adamw_step


def tiny_model(seed=0):
    torch.manual_seed(seed)
    return MelRoFormer(preset("24k-small", dim=8, layers=1, num_heads=2, bands=6, chunk_frames=10))


@pytest.fixture
def saved(tmp_path):
    model = tiny_model()
    params = dict(model.named_parameters())
    state = OptimizerState()
    adamw_step(params, {k: torch.ones_like(v) for k, v in params.items()}, state)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, state, {"note": "x"})
    return path, model, state


def test_round_trip(saved):
    path, model, state = saved
    ckpt = load_checkpoint(path)
    assert ckpt.config == model.config and ckpt.mode == "separation" and ckpt.extra["note"] == "x"
    restored = ckpt.build_model()
    for (k, a), b in zip(model.state_dict().items(), restored.state_dict().values()):
        assert torch.equal(a, b), k
    assert set(ckpt.optimizer) == {f"optim.{kind}.{n}" for n in state.exp_avg for kind in ("exp_avg", "exp_avg_sq")}
    assert ckpt.extra["optimizer"]["step"] == 1


def test_transcription_and_double_round_trip(tmp_path):
    model = tiny_model().swap_head_for_transcription(0).double()
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, model)
    restored = load_model(path)
    assert restored.mode == "transcription" and next(restored.parameters()).dtype == torch.float64
    for (k, a), b in zip(model.state_dict().items(), restored.state_dict().values()):
        assert torch.equal(a, b), k


def test_header_layout(saved):
    raw = saved[0].read_bytes()
    assert raw[:8] == b"MELROFMR"
    assert struct.unpack("<I", raw[8:12])[0] == FORMAT_VERSION


def _corrupt(path, data):
    path.write_bytes(data)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_rejects_bad_files(saved, tmp_path):
    raw = saved[0].read_bytes()
    bad = tmp_path / "bad.ckpt"
    _corrupt(bad, b"NOTMAGIC" + raw[8:])
    _corrupt(bad, raw[:8] + struct.pack("<I", FORMAT_VERSION + 1) + raw[12:])
    _corrupt(bad, raw[:-7])
    _corrupt(bad, raw + b"\x00")
    _corrupt(bad, raw[:5])

