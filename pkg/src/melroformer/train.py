"""Toy-scale training: AdamW, learning-rate schedules, random remixing and train loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .diffcore import NonFiniteError
from .dsp import AudioSignal
from .eval import note_fmeasures, sdr
from .losses import MultiResLossConfig, NoteTargets, notes_to_targets, separation_loss, transcription_loss_from_logits
from .model import SEPARATION, TRANSCRIPTION, MelRoFormer, ModelConfig
from .pipeline import separate, transcribe

__all__ = [
    "DivergenceError",
    "OptimizerState",
    "adamw_step",
    "lr_schedule_separation",
    "PlateauSchedule",
    "RemixSpec",
    "random_remix",
    "TrainResult",
    "train_toy_separation",
    "train_toy_transcription",
    "write_loss_trace",
]

log = logging.getLogger(__name__)

SEPARATION_LR = 5e-4
SEPARATION_DECAY_EVERY = 40_000
FINETUNE_HEAD_LR = 1e-3
FINETUNE_BACKBONE_LR = 1e-4
DECAY_FACTOR = 0.9


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, step=None, trace=None):
        super().__init__(message)
        self.step = step
        self.trace = trace or []


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "weight_decay": self.weight_decay, "step": self.step}

    @classmethod
    def from_checkpoint(cls, hyper: dict, blocks: Mapping[str, np.ndarray]) -> "OptimizerState":
        state = cls(hyper["lr"], tuple(hyper["betas"]), hyper["eps"], hyper["weight_decay"], hyper["step"])
        for key, arr in blocks.items():
            kind, _, name = key.removeprefix("optim.").partition(".")
            target = state.exp_avg if kind == "exp_avg" else state.exp_avg_sq
            target[name] = torch.from_numpy(arr.copy())
        return state


def adamw_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor | None],
    state: OptimizerState,
    lr: float | Mapping[str, float] | None = None,
) -> bool:
    """One AdamW update in place; returns False (and leaves everything untouched) on non-finite gradients."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            log.warning("rejecting step %d: non-finite gradient for %s", state.step + 1, name)
            return False
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1 - b1**state.step
    bc2 = 1 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if isinstance(lr, Mapping):
                step_lr = lr[name]
            else:
                step_lr = state.lr if lr is None else lr
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} differs from parameter {name} {tuple(p.shape)}")
            m = state.exp_avg.setdefault(name, torch.zeros_like(p))
            v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
            p.mul_(1 - step_lr * state.weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-step_lr / bc1)
    return True


def lr_schedule_separation(step: int, base_lr: float = SEPARATION_LR, every: int = SEPARATION_DECAY_EVERY, factor: float = DECAY_FACTOR) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    return base_lr * factor ** (step // every)


class PlateauSchedule:
    """Scale every group's learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lrs: Mapping[str, float] | None = None, patience: int = 15, factor: float = DECAY_FACTOR):
        self.lrs = dict(lrs or {"heads": FINETUNE_HEAD_LR, "backbone": FINETUNE_BACKBONE_LR})
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> dict[str, float]:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lrs = {k: v * self.factor for k, v in self.lrs.items()}
                self.bad_epochs = 0
        return dict(self.lrs)

    def run(self, history: Sequence[float]) -> dict[str, float]:
        for v in history:
            self.step(v)
        return dict(self.lrs)


@dataclass
class RemixSpec:
    """Stem pools keyed by source type; ``target`` names the pool used as the training target."""

    pools: dict[str, list[np.ndarray]]
    target: str = "vocals"
    gain_range: tuple[float, float] | None = (0.5, 1.25)

    def __post_init__(self):
        if self.target not in self.pools:
            raise ValueError(f"no pool named {self.target!r}")
        for name, pool in self.pools.items():
            if not pool:
                raise ValueError(f"stem pool {name!r} is empty")
        lengths = {s.shape[-1] for pool in self.pools.values() for s in pool}
        if len(lengths) != 1:
            raise ValueError("all stems must share one chunk length")


def random_remix(spec: RemixSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw one stem per pool independently and sum them; returns ``(mixture, target)``."""
    stems = {}
    for name in sorted(spec.pools):
        pool = spec.pools[name]
        stem = np.asarray(pool[int(rng.integers(len(pool)))], dtype=np.float64)
        if spec.gain_range is not None:
            stem = stem * rng.uniform(*spec.gain_range)
        stems[name] = stem
    target = stems[spec.target]
    mixture = sum(stems.values())
    return mixture, target


@dataclass
class TrainResult:
    model: MelRoFormer
    trace: list[tuple[int, float, float]]
    optimizer: OptimizerState
    stopped_early: bool = False
    metric: float | None = None


def write_loss_trace(path, trace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in trace:
            w.writerow([step, f"{loss:.8g}", f"{lr:.8g}"])


def _named_params(model: MelRoFormer) -> dict[str, torch.Tensor]:
    return {n: p for n, p in model.named_parameters() if p.requires_grad}


def _resume(model: MelRoFormer, path) -> tuple[MelRoFormer, OptimizerState, list]:
    ckpt = load_checkpoint(path)
    model = ckpt.build_model()
    hyper = ckpt.extra.get("optimizer")
    state = OptimizerState.from_checkpoint(hyper, ckpt.optimizer) if hyper else OptimizerState()
    trace = [tuple(r) for r in ckpt.extra.get("trace", [])]
    return model, state, trace


def _seed_step(seed: int, step: int):
    torch.manual_seed(seed * 1_000_003 + step)
    return np.random.default_rng([seed, step])


def train_toy_separation(
    model: MelRoFormer | ModelConfig,
    dataset: Sequence[tuple[np.ndarray, np.ndarray]] | RemixSpec,
    steps: int,
    *,
    batch_size: int = 1,
    lr: float | Callable[[int], float] = lr_schedule_separation,
    weight_decay: float = 0.01,
    seed: int = 0,
    loss_config: MultiResLossConfig = MultiResLossConfig(),
    target_sdr: float | None = None,
    eval_every: int = 50,
    checkpoint_path=None,
    checkpoint_every: int | None = None,
    resume_from=None,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Minimise the separation loss on ``(mixture, vocals)`` pairs or random remixes.

    With ``target_sdr`` set, the median chunked SDR over the training pairs is
    checked every ``eval_every`` steps and training stops once it is reached.
    """
    if isinstance(model, ModelConfig):
        torch.manual_seed(seed)
        model = MelRoFormer(model)
    state = OptimizerState(weight_decay=weight_decay)
    trace: list = []
    if resume_from is not None:
        model, state, trace = _resume(model, resume_from)
    model._require(SEPARATION)
    schedule = lr if callable(lr) else (lambda _step, _lr=lr: _lr)
    sample_rate = model.config.sample_rate
    dtype = next(model.parameters()).dtype
    remix = isinstance(dataset, RemixSpec)
    if not remix and not dataset:
        raise ValueError("empty dataset")

    def training_sdr():
        if remix:
            return None
        scores = [sdr(separate(model, AudioSignal(mix, sample_rate)).samples, voc, sample_rate).median for mix, voc in dataset]
        return float(np.median(scores))

    result = TrainResult(model, trace, state)
    model.train()
    start = state.step
    for step in range(start, steps):
        rng = _seed_step(seed, step)
        if remix:
            batch = [random_remix(dataset, rng) for _ in range(batch_size)]
        else:
            order = [(step * batch_size + i) % len(dataset) for i in range(batch_size)]
            batch = [dataset[i] for i in order]
        mix = torch.as_tensor(np.stack([b[0] for b in batch]), dtype=dtype)
        voc = torch.as_tensor(np.stack([b[1] for b in batch]), dtype=dtype)
        try:
            loss = separation_loss(model.separate_waveform(mix), voc, sample_rate, loss_config)
        except NonFiniteError as err:
            raise DivergenceError(f"{err} at step {step}", step, trace) from err
        if not torch.isfinite(loss):
            raise DivergenceError(f"loss became {loss.item()} at step {step}", step, trace)
        params = _named_params(model)
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
        step_lr = schedule(step)
        if not adamw_step(params, dict(zip(params, grads)), state, step_lr):
            raise DivergenceError(f"non-finite gradient at step {step}", step, trace)
        trace.append((step, loss.item(), step_lr))
        if callback:
            callback(step, loss.item())
        done = step + 1
        if checkpoint_path and checkpoint_every and done % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, state, {"trace": trace, "seed": seed})
        if target_sdr is not None and done % eval_every == 0:
            result.metric = training_sdr()
            log.info("step %d: loss %.4f, training SDR %.2f dB", done, loss.item(), result.metric)
            model.train()
            if result.metric is not None and result.metric >= target_sdr:
                result.stopped_early = True
                break
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, state, {"trace": trace, "seed": seed})
    return result


def _head_param_names(model: MelRoFormer) -> set[str]:
    names = set()
    for prefix, mod in (("embedding", model.embedding), ("onset_head", model.onset_head), ("frame_head", model.frame_head)):
        names |= {f"{prefix}.{n}" for n, _ in mod.named_parameters()}
    return names


def train_toy_transcription(
    model: MelRoFormer,
    dataset: Sequence[tuple[np.ndarray, list]],
    steps: int,
    *,
    batch_size: int = 2,
    head_lr: float = FINETUNE_HEAD_LR,
    backbone_lr: float = FINETUNE_BACKBONE_LR,
    weight_decay: float = 0.01,
    seed: int = 0,
    steps_per_epoch: int = 100,
    patience: int = 15,
    validation: Sequence[tuple[np.ndarray, list]] | None = None,
    target_con: float | None = None,
    eval_every: int = 100,
    checkpoint_path=None,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Fine-tune on ``(audio, notes)`` clips with summed onset/frame BCE.

    A separation model gets its head swapped first. Head and backbone groups
    use their own learning rates, both decayed on validation plateaus (the
    training clips stand in when no validation set is given).
    """
    if model.mode == SEPARATION:
        model = model.swap_head_for_transcription(seed)
    model._require(TRANSCRIPTION)
    if not dataset:
        raise ValueError("empty dataset")
    cfg = model.config
    dtype = next(model.parameters()).dtype
    heads = _head_param_names(model)
    plateau = PlateauSchedule({"heads": head_lr, "backbone": backbone_lr}, patience)
    state = OptimizerState(lr=head_lr, weight_decay=weight_decay)
    validation = validation or dataset

    def frames_for(n_samples):
        return math.ceil(n_samples * cfg.frame_rate / cfg.sample_rate)

    def batch_loss(items):
        audio = torch.as_tensor(np.stack([a for a, _ in items]), dtype=dtype)
        on_logits, fr_logits = model.transcription_logits(audio)
        T = on_logits.shape[-1]
        targets = [notes_to_targets(notes, T, cfg.frame_rate) for _, notes in items]
        on = torch.stack([t.onset_roll for t in targets]).to(dtype)
        fr = torch.stack([t.frame_roll for t in targets]).to(dtype)
        return transcription_loss_from_logits(on_logits, fr_logits, NoteTargets(on, fr))

    def evaluate_con():
        scores = [note_fmeasures(transcribe(model, AudioSignal(a, cfg.sample_rate)), notes).con.f_measure for a, notes in dataset]
        model.train()
        return float(np.mean(scores))

    trace = []
    result = TrainResult(model, trace, state)
    model.train()
    for step in range(steps):
        rng = _seed_step(seed, step)
        idx = rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
        try:
            loss = batch_loss([dataset[i] for i in idx])
        except NonFiniteError as err:
            raise DivergenceError(f"{err} at step {step}", step, trace) from err
        if not torch.isfinite(loss):
            raise DivergenceError(f"loss became {loss.item()} at step {step}", step, trace)
        params = _named_params(model)
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
        lrs = {n: plateau.lrs["heads"] if n in heads else plateau.lrs["backbone"] for n in params}
        if not adamw_step(params, dict(zip(params, grads)), state, lrs):
            raise DivergenceError(f"non-finite gradient at step {step}", step, trace)
        trace.append((step, loss.item(), plateau.lrs["heads"]))
        if callback:
            callback(step, loss.item())
        done = step + 1
        if done % steps_per_epoch == 0:
            with torch.no_grad():
                model.eval()
                val = float(np.mean([batch_loss([v]).item() for v in validation]))
                model.train()
            plateau.step(val)
        if target_con is not None and done % eval_every == 0:
            result.metric = evaluate_con()
            log.info("step %d: loss %.4f, COn %.3f", done, loss.item(), result.metric)
            if result.metric >= target_con:
                result.stopped_early = True
                break
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, state, {"trace": trace, "seed": seed})
    return result
