import csv
import math

import numpy as np
import pytest
import torch

from melroformer.checkpoint import load_checkpoint
from melroformer.model import MelRoFormer, preset
from melroformer.synthetic import separation_toy_set, transcription_toy_set
from melroformer.train import (
    DivergenceError,
    OptimizerState,
    PlateauSchedule,
    RemixSpec,
    adamw_step,
    lr_schedule_separation,
    random_remix,
    train_toy_separation,
    train_toy_transcription,
    write_loss_trace,
)


def tiny(**kw):
    return preset("24k-small", dim=8, layers=1, num_heads=2, bands=8, chunk_frames=20, dropout=0.0, **kw)


def test_adamw_matches_torch():
    g = torch.Generator().manual_seed(0)
    p0 = torch.randn(5, 3, generator=g, dtype=torch.float64)
    ours, theirs = p0.clone(), p0.clone().requires_grad_(True)
    opt = torch.optim.AdamW([theirs], lr=1e-2, weight_decay=0.01)
    state = OptimizerState(lr=1e-2, weight_decay=0.01)
    for _ in range(20):
        grad = torch.randn(5, 3, generator=g, dtype=torch.float64)
        adamw_step({"p": ours}, {"p": grad}, state)
        theirs.grad = grad.clone()
        opt.step()
    assert torch.allclose(ours, theirs.detach(), atol=1e-12)


def test_adamw_hand_cases():
    p = torch.ones(3, dtype=torch.float64)
    state = OptimizerState(lr=1e-3, weight_decay=0.0)
    adamw_step({"p": p}, {"p": torch.zeros(3, dtype=torch.float64)}, state)
    assert torch.equal(p, torch.ones(3, dtype=torch.float64))

    p = torch.zeros(1, dtype=torch.float64)
    adamw_step({"p": p}, {"p": torch.tensor([2.5], dtype=torch.float64)}, OptimizerState(lr=1e-3, weight_decay=0.0))
    assert math.isclose(p.item(), -1e-3, rel_tol=1e-6)

    p = torch.ones(1, dtype=torch.float64)
    adamw_step({"p": p}, {"p": torch.zeros(1, dtype=torch.float64)}, OptimizerState(lr=0.1, weight_decay=0.01))
    assert math.isclose(p.item(), 1 - 0.1 * 0.01, rel_tol=1e-12)


def test_adamw_rejects_non_finite():
    p = torch.ones(2)
    state = OptimizerState()
    assert not adamw_step({"p": p}, {"p": torch.tensor([1.0, math.nan])}, state)
    assert state.step == 0 and torch.equal(p, torch.ones(2)) and not state.exp_avg


def test_lr_schedule_table():
    for step, lr in {0: 5e-4, 39_999: 5e-4, 40_000: 4.5e-4, 80_000: 4.05e-4}.items():
        assert math.isclose(lr_schedule_separation(step), lr, rel_tol=1e-12)
    with pytest.raises(ValueError):
        lr_schedule_separation(-1)


def test_plateau_schedule():
    sched = PlateauSchedule()
    lrs = sched.run([1.0] * 15)  # first epoch sets the best, then 14 flat ones
    assert lrs == {"heads": 1e-3, "backbone": 1e-4}
    lrs = sched.step(1.0)
    assert math.isclose(lrs["heads"], 9e-4) and math.isclose(lrs["backbone"], 9e-5)
    improving = PlateauSchedule()
    assert improving.run([1.0 / (i + 1) for i in range(100)]) == {"heads": 1e-3, "backbone": 1e-4}


def test_random_remix():
    voc, acc = np.ones(8), np.full(8, 2.0)
    spec = RemixSpec({"vocals": [voc], "accomp": [acc]}, gain_range=None)
    mix, target = random_remix(spec, np.random.default_rng(0))
    assert np.array_equal(mix, voc + acc) and np.array_equal(target, voc)
    pools = {"vocals": [np.full(8, float(i)) for i in range(5)], "drums": [np.full(8, 10.0 * i) for i in range(5)]}
    spec = RemixSpec(pools)
    a = random_remix(spec, np.random.default_rng(7))
    b = random_remix(spec, np.random.default_rng(7))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        RemixSpec({"vocals": []})
    with pytest.raises(ValueError):
        RemixSpec({"drums": [voc]})
    with pytest.raises(ValueError):
        RemixSpec({"vocals": [voc], "drums": [np.ones(9)]})


def test_separation_loss_decreases():
    data = separation_toy_set(1, duration=0.5)
    res = train_toy_separation(tiny(), data, 30, lr=3e-3, seed=0)
    losses = [l for _, l, _ in res.trace]
    assert len(losses) == 30 and np.mean(losses[-5:]) < np.mean(losses[:5])


def test_separation_from_remix_spec():
    voc, acc = separation_toy_set(2, duration=0.25)[0]
    spec = RemixSpec({"vocals": [voc], "accomp": [acc - voc]})
    res = train_toy_separation(tiny(), spec, 3, seed=1)
    assert len(res.trace) == 3


def test_divergence_on_nan_data():
    mix = np.full((1, 4000), np.nan)
    with pytest.raises(DivergenceError) as info:
        train_toy_separation(tiny(), [(mix, mix)], 2)
    assert info.value.step == 0


def test_resume_is_deterministic(tmp_path):
    data = separation_toy_set(2, duration=0.3)
    full = train_toy_separation(tiny(), data, 6, seed=3)
    ckpt = tmp_path / "half.ckpt"
    train_toy_separation(tiny(), data, 3, seed=3, checkpoint_path=ckpt)
    resumed = train_toy_separation(tiny(), data, 6, seed=3, resume_from=ckpt)
    assert [round(l, 10) for _, l, _ in resumed.trace] == [round(l, 10) for _, l, _ in full.trace]
    for (n, a), b in zip(full.model.state_dict().items(), resumed.model.state_dict().values()):
        assert torch.allclose(a, b, atol=1e-6), n
    assert load_checkpoint(ckpt).extra["optimizer"]["step"] == 3


def test_loss_trace_csv(tmp_path):
    path = tmp_path / "trace.csv"
    write_loss_trace(path, [(0, 1.5, 5e-4), (1, 1.25, 5e-4)])
    rows = list(csv.DictReader(open(path)))
    assert [float(r["loss"]) for r in rows] == [1.5, 1.25] and rows[1]["step"] == "1"


def test_transcription_finetune_short_run():
    torch.manual_seed(0)
    model = MelRoFormer(tiny())
    clips = transcription_toy_set(2, duration=0.4)
    res = train_toy_transcription(model, clips, 4, steps_per_epoch=2)
    assert res.model.mode == "transcription" and len(res.trace) == 4
    assert all(np.isfinite(l) for _, l, _ in res.trace)
    with pytest.raises(ValueError):
        train_toy_transcription(res.model, [], 1)


def test_numeric_gradient_step_matches_analytic():
    g = torch.Generator().manual_seed(2)
    w0 = torch.randn(10, dtype=torch.float64, generator=g)
    x = torch.randn(6, 10, dtype=torch.float64, generator=g)
    y = torch.randn(6, dtype=torch.float64, generator=g)

    def loss(w):
        return torch.tanh(x @ w - y).pow(2).mean()

    w_a = w0.clone().requires_grad_(True)
    (grad_a,) = torch.autograd.grad(loss(w_a), [w_a])
    grad_n = torch.zeros(10, dtype=torch.float64)
    for i in range(10):
        e = torch.zeros(10, dtype=torch.float64)
        e[i] = 1e-6
        grad_n[i] = (loss(w0 + e) - loss(w0 - e)) / 2e-6
    pa, pn = w0.clone(), w0.clone()
    adamw_step({"w": pa}, {"w": grad_a}, OptimizerState(lr=1e-2))
    adamw_step({"w": pn}, {"w": grad_n}, OptimizerState(lr=1e-2))
    assert (pa - pn).abs().max() < 1e-5


def test_zero_steps_and_bitwise_determinism(tmp_path):
    data = separation_toy_set(1, duration=0.3)
    torch.manual_seed(0)
    model = MelRoFormer(tiny())
    before = {k: v.clone() for k, v in model.state_dict().items()}
    res = train_toy_separation(model, data, 0)
    assert res.trace == [] and all(torch.equal(before[k], v) for k, v in res.model.state_dict().items())
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    train_toy_separation(tiny(), data, 3, seed=4, checkpoint_path=a)
    train_toy_separation(tiny(), data, 3, seed=4, checkpoint_path=b)
    assert a.read_bytes() == b.read_bytes()


def test_remix_is_additive():
    rng = np.random.default_rng(3)
    # dyadic samples keep every sum exact
    voc = [np.round(rng.standard_normal(16) * 1024) / 1024 for _ in range(3)]
    acc = [np.round(rng.standard_normal(16) * 1024) / 1024 for _ in range(3)]
    mix, target = random_remix(RemixSpec({"vocals": voc, "accomp": acc}, gain_range=None), rng)
    assert any(np.array_equal(target, v) for v in voc)
    assert any(np.array_equal(mix - a, target) for a in acc)
    voc, acc = [rng.standard_normal(16)], [rng.standard_normal(16)]
    mix, target = random_remix(RemixSpec({"vocals": voc, "accomp": acc}, gain_range=None), rng)
    assert np.allclose(mix - acc[0], target, rtol=0, atol=1e-15)
