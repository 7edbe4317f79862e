"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .diffcore import NonFiniteError
from .dsp import read_wav, write_wav
from .eval import note_fmeasures, reports_to_csv, sdr
from .melband import build_mel_band_map
from .model import MelRoFormer, ModelConfig, preset
from .notes_io import read_jsonl, write_jsonl, write_midi
from .pipeline import check_monophonic, separate, transcribe
from .synthetic import separation_toy_set, transcription_toy_set
from .train import DivergenceError, RemixSpec, lr_schedule_separation, train_toy_separation, train_toy_transcription, write_loss_trace

log = logging.getLogger("melroformer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        cfg = yaml.safe_load(f) or {}
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: expected a key-value document")
    return cfg


def _model_config(section: dict) -> ModelConfig:
    section = dict(section or {})
    name = section.pop("preset", "24k-small")
    return preset(name, **section)


def cmd_bandmap(args):
    band_map = build_mel_band_map(args.sr, args.nfft, args.bands, args.fmin, args.fmax)
    text = band_map.dumps() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    counts = band_map.overlap_count
    print(
        f"{band_map.num_bands} bands over {band_map.n_bins} bins; "
        f"uncovered bins: {int((counts == 0).sum())}; max overlap: {int(counts.max())}",
        file=sys.stderr,
    )


def _load_mode(path, mode):
    ckpt = load_checkpoint(path)
    if ckpt.mode != mode:
        raise ValueError(f"{path} is a {ckpt.mode} checkpoint; a {mode} checkpoint is required")
    return ckpt.build_model()


def cmd_separate(args):
    model = _load_mode(args.model, "separation")
    audio = read_wav(args.input)
    vocals = separate(model, audio)
    write_wav(args.output, vocals)


def cmd_transcribe(args):
    model = _load_mode(args.model, "transcription")
    audio = read_wav(args.input)
    notes = transcribe(model, audio)
    check_monophonic(notes)
    if args.format == "json":
        write_jsonl(args.output, notes)
    else:
        write_midi(args.output, notes)
    print(f"{len(notes)} notes", file=sys.stderr)


def _separation_data(section: dict, sample_rate: int):
    if not section or "synthetic" in section:
        syn = dict((section or {}).get("synthetic") or {})
        return separation_toy_set(syn.get("examples", 4), syn.get("duration", 6.0), sample_rate, syn.get("seed", 0))
    if "pairs" in section:
        pairs = []
        for mix_path, voc_path in section["pairs"]:
            mix, voc = read_wav(mix_path), read_wav(voc_path)
            if mix.sample_rate != sample_rate or voc.sample_rate != sample_rate:
                raise ValueError(f"{mix_path}: training audio must be {sample_rate} Hz")
            pairs.append((mix.samples, voc.samples))
        return pairs
    if "stems" in section:
        pools = {name: [read_wav(p).samples for p in paths] for name, paths in section["stems"].items()}
        gain = section.get("gain_range", [0.5, 1.25])
        return RemixSpec(pools, section.get("target", "vocals"), tuple(gain) if gain else None)
    raise ValueError("data section needs one of: synthetic, pairs, stems")


def cmd_train(args):
    cfg = _load_config(args.config)
    model_cfg = _model_config(cfg.get("model"))
    opt = cfg.get("optimizer", {})
    run = cfg.get("train", {})
    steps = args.steps if args.steps is not None else run.get("steps", 100)
    data = _separation_data(cfg.get("data"), model_cfg.sample_rate)
    lr = opt.get("lr")
    schedule = lr_schedule_separation if lr is None else lr
    torch.manual_seed(args.seed)
    result = train_toy_separation(
        MelRoFormer(model_cfg) if args.resume is None else model_cfg,
        data,
        steps,
        batch_size=run.get("batch_size", 1),
        lr=schedule,
        weight_decay=opt.get("weight_decay", 0.01),
        seed=args.seed,
        target_sdr=run.get("target_sdr"),
        eval_every=run.get("eval_every", 50),
        checkpoint_path=args.out,
        checkpoint_every=run.get("checkpoint_every"),
        resume_from=args.resume,
    )
    if args.trace:
        write_loss_trace(args.trace, result.trace)
    last = result.trace[-1][1] if result.trace else float("nan")
    print(f"trained {len(result.trace)} steps, final loss {last:.5f}", file=sys.stderr)


def _transcription_data(section: dict, sample_rate: int):
    if not section or "synthetic" in section:
        syn = dict((section or {}).get("synthetic") or {})
        return transcription_toy_set(syn.get("clips", 10), syn.get("duration", 3.0), sample_rate, syn.get("seed", 0))
    if "clips" in section:
        clips = []
        for wav_path, notes_path in section["clips"]:
            audio = read_wav(wav_path)
            if audio.sample_rate != sample_rate:
                raise ValueError(f"{wav_path}: training audio must be {sample_rate} Hz")
            clips.append((audio.samples, read_jsonl(notes_path)))
        return clips
    raise ValueError("data section needs one of: synthetic, clips")


def cmd_finetune(args):
    cfg = _load_config(args.config)
    model = _load_mode(args.model, "separation")
    opt = cfg.get("optimizer", {})
    run = cfg.get("train", {})
    steps = args.steps if args.steps is not None else run.get("steps", 100)
    data = _transcription_data(cfg.get("data"), model.config.sample_rate)
    result = train_toy_transcription(
        model,
        data,
        steps,
        batch_size=run.get("batch_size", 2),
        head_lr=opt.get("head_lr", 1e-3),
        backbone_lr=opt.get("backbone_lr", 1e-4),
        weight_decay=opt.get("weight_decay", 0.01),
        seed=args.seed,
        target_con=run.get("target_con"),
        eval_every=run.get("eval_every", 100),
        checkpoint_path=args.out,
    )
    if args.trace:
        write_loss_trace(args.trace, result.trace)
    print(f"fine-tuned {len(result.trace)} steps", file=sys.stderr)


def cmd_eval_sdr(args):
    rows, reports = {}, []
    if len(args.est) != len(args.ref):
        raise UsageError("give one --ref per --est")
    for est_path, ref_path in zip(args.est, args.ref):
        est, ref = read_wav(est_path), read_wav(ref_path)
        if est.sample_rate != ref.sample_rate:
            raise ValueError(f"{est_path} and {ref_path} have different sample rates")
        rep = sdr(est.samples, ref.samples, ref.sample_rate)
        reports.append(rep)
        rows[Path(est_path).name] = {"median_sdr": rep.median, "chunks": len(rep.chunk_sdrs), "silent_chunks": rep.silent_chunks}
    summary = {"median_of_medians": float(np.median([r.median for r in reports])), "songs": rows}
    print(json.dumps(summary, indent=2))
    if args.csv:
        Path(args.csv).write_text(reports_to_csv(rows))


def cmd_eval_notes(args):
    if len(args.est) != len(args.ref):
        raise UsageError("give one --ref per --est")
    rows = {}
    for est_path, ref_path in zip(args.est, args.ref):
        rep = note_fmeasures(read_jsonl(est_path), read_jsonl(ref_path), onset_tol=args.onset_tol)
        rows[Path(est_path).name] = rep.csv_row()
    print(json.dumps(rows, indent=2))
    if args.csv:
        Path(args.csv).write_text(reports_to_csv(rows))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="melroformer", description="Mel-RoFormer vocal separation and melody transcription")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--threads", type=int, default=1, help="cap on intra-op worker threads")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("bandmap", help="export a Mel-band map")
    s.add_argument("--sr", type=int, default=44100)
    s.add_argument("--nfft", type=int, default=2048)
    s.add_argument("--bands", type=int, required=True)
    s.add_argument("--fmin", type=float, default=0.0)
    s.add_argument("--fmax", type=float, default=None)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bandmap)

    s = sub.add_parser("separate", help="extract vocals from a WAV file")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("transcribe", help="transcribe the vocal melody of a WAV file")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--format", choices=("json", "midi"), default="json")
    s.set_defaults(func=cmd_transcribe)

    s = sub.add_parser("train", help="train a separation model")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--steps", type=int)
    s.add_argument("--trace", help="CSV loss trace path")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", help="fine-tune a separation checkpoint for transcription")
    s.add_argument("--model", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--trace")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval-sdr", help="chunked SDR of estimates against references")
    s.add_argument("--est", nargs="+", required=True)
    s.add_argument("--ref", nargs="+", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval_sdr)

    s = sub.add_parser("eval-notes", help="COn/COnP/COnPOff of note lists")
    s.add_argument("--est", nargs="+", required=True)
    s.add_argument("--ref", nargs="+", required=True)
    s.add_argument("--onset-tol", type=float, default=0.05)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval_notes)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    torch.manual_seed(args.seed)
    try:
        args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NonFiniteError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, CheckpointError, OSError, KeyError, yaml.YAMLError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
