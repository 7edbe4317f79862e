"""scikit-learn style wrappers around training and inference."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dsp import AudioSignal
from .eval import median_of_medians, note_fmeasures, sdr
from .model import MelRoFormer, preset
from .pipeline import NoteEvent, separate, transcribe, transcribe_posteriorgram
from .train import train_toy_separation, train_toy_transcription


def check_audio(x, sample_rate: int | None = None, channels: int | None = None) -> np.ndarray:
    """Validate one clip and return it as float32 ``(channels, n)``.

    Accepts an ``AudioSignal`` (whose rate must match) or an array of shape
    ``(n,)`` or ``(channels, n)``.
    """
    if isinstance(x, AudioSignal):
        if sample_rate is not None and x.sample_rate != sample_rate:
            raise ValueError(f"audio is {x.sample_rate} Hz, model expects {sample_rate} Hz")
        x = x.samples
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2:
        raise ValueError(f"audio must be (n,) or (channels, n), got shape {x.shape}")
    if x.shape[-1] == 0:
        raise ValueError("audio is empty")
    if not np.all(np.isfinite(x)):
        raise ValueError("audio contains NaN or infinite samples")
    if channels is not None and x.shape[0] != channels:
        raise ValueError(f"audio has {x.shape[0]} channels, model expects {channels}")
    return x


def check_audio_list(X, sample_rate=None, channels=None) -> list[np.ndarray]:
    if isinstance(X, (np.ndarray, AudioSignal)):
        X = [X]
    X = [check_audio(x, sample_rate, channels) for x in X]
    if not X:
        raise ValueError("no audio given")
    return X


def check_note_list(notes) -> list[NoteEvent]:
    out = []
    for n in notes:
        if not isinstance(n, NoteEvent):
            n = NoteEvent(*n)
        out.append(n)
    return sorted(out)


def _aligned_pairs(X, y, sr, ch):
    X = check_audio_list(X, sr, ch)
    y = check_audio_list(y, sr, ch)
    if len(X) != len(y):
        raise ValueError(f"{len(X)} mixtures but {len(y)} targets")
    for i, (a, b) in enumerate(zip(X, y)):
        if a.shape != b.shape:
            raise ValueError(f"pair {i}: mixture {a.shape} and target {b.shape} differ in shape")
    return X, y


class MelRoFormerSeparator(BaseEstimator, TransformerMixin):
    """Vocal separator: ``fit(mixtures, vocals)``, ``predict(mixtures)``."""

    def __init__(
        self,
        preset="24k-small",
        model_params=None,
        steps=1000,
        batch_size=1,
        lr=5e-4,
        weight_decay=0.01,
        target_sdr=None,
        eval_every=50,
        random_state=0,
    ):
        self.preset = preset
        self.model_params = model_params
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.target_sdr = target_sdr
        self.eval_every = eval_every
        self.random_state = random_state

    def _config(self):
        return preset(self.preset, **(self.model_params or {}))

    def fit(self, X, y):
        cfg = self._config()
        X, y = _aligned_pairs(X, y, cfg.sample_rate, cfg.channels)
        torch.manual_seed(self.random_state)
        result = train_toy_separation(
            MelRoFormer(cfg),
            list(zip(X, y)),
            self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            seed=self.random_state,
            target_sdr=self.target_sdr,
            eval_every=self.eval_every,
        )
        self.model_ = result.model.eval()
        self.loss_trace_ = result.trace
        self.n_steps_ = len(result.trace)
        return self

    def predict(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        X = check_audio_list(X, cfg.sample_rate, cfg.channels)
        return [separate(self.model_, AudioSignal(x, cfg.sample_rate)).samples for x in X]

    def transform(self, X):
        return self.predict(X)

    def score(self, X, y) -> float:
        """Median over clips of the median chunked SDR, in dB."""
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        X, y = _aligned_pairs(X, y, cfg.sample_rate, cfg.channels)
        reports = [sdr(est, ref, cfg.sample_rate) for est, ref in zip(self.predict(X), y)]
        return median_of_medians(reports)


class MelRoFormerTranscriber(BaseEstimator):
    """Melody transcriber: ``fit(clips, note_lists)``, ``predict(clips)``.

    ``separator`` may be a fitted ``MelRoFormerSeparator`` whose backbone is
    fine-tuned; otherwise a freshly initialised backbone is used.
    """

    def __init__(
        self,
        separator=None,
        preset="24k-small",
        model_params=None,
        steps=1000,
        batch_size=2,
        head_lr=1e-3,
        backbone_lr=1e-4,
        weight_decay=0.01,
        target_con=None,
        eval_every=100,
        random_state=0,
    ):
        self.separator = separator
        self.preset = preset
        self.model_params = model_params
        self.steps = steps
        self.batch_size = batch_size
        self.head_lr = head_lr
        self.backbone_lr = backbone_lr
        self.weight_decay = weight_decay
        self.target_con = target_con
        self.eval_every = eval_every
        self.random_state = random_state

    def _base_model(self):
        if self.separator is not None:
            check_is_fitted(self.separator, "model_")
            return self.separator.model_
        torch.manual_seed(self.random_state)
        return MelRoFormer(preset(self.preset, **(self.model_params or {})))

    def fit(self, X, y):
        base = self._base_model()
        cfg = base.config
        X = check_audio_list(X, cfg.sample_rate, cfg.channels)
        y = [check_note_list(notes) for notes in y]
        if len(X) != len(y):
            raise ValueError(f"{len(X)} clips but {len(y)} note lists")
        if len({x.shape[-1] for x in X}) != 1:
            raise ValueError("training clips must share one length")
        result = train_toy_transcription(
            base,
            list(zip(X, y)),
            self.steps,
            batch_size=self.batch_size,
            head_lr=self.head_lr,
            backbone_lr=self.backbone_lr,
            weight_decay=self.weight_decay,
            seed=self.random_state,
            target_con=self.target_con,
            eval_every=self.eval_every,
        )
        self.model_ = result.model.eval()
        self.loss_trace_ = result.trace
        self.n_steps_ = len(result.trace)
        return self

    def _clips(self, X):
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        return cfg, check_audio_list(X, cfg.sample_rate, cfg.channels)

    def predict(self, X) -> list[list[NoteEvent]]:
        cfg, X = self._clips(X)
        return [transcribe(self.model_, AudioSignal(x, cfg.sample_rate)) for x in X]

    def predict_proba(self, X):
        """Onset and frame posteriorgrams, one per clip."""
        cfg, X = self._clips(X)
        return [transcribe_posteriorgram(self.model_, AudioSignal(x, cfg.sample_rate)) for x in X]

    def score(self, X, y) -> float:
        """Mean COn F-measure."""
        preds = self.predict(X)
        return float(np.mean([note_fmeasures(p, check_note_list(r)).con.f_measure for p, r in zip(preds, y)]))
