"""Command line entry point: ``mmdistill <subcommand> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from .config import ConfigError, RunConfig, load_config

SUBCOMMANDS = ("gen-data", "spectrogram", "pretrain-pretext", "train", "eval", "track", "sweep", "report", "config")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value file")
    common.add_argument("--out", type=Path, help="run directory")
    keys = common.add_argument_group("config overrides")
    for f in fields(RunConfig):
        keys.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar=f.type.upper())

    p = argparse.ArgumentParser(prog="mmdistill", description="Multi-teacher audio distillation at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="export synthetic scenes")
    g.add_argument("--write-audio", action="store_true", help="also write per-microphone WAV files")
    s = sub.add_parser("spectrogram", parents=[common], help="Mel spectrograms and student input for one clip")
    s.add_argument("--wav", nargs="+", help="one 16-bit mono WAV per microphone")
    s.add_argument("--timestamp", type=int, help="clip centre in ns (defaults to mid-recording)")
    s.add_argument("--scene", type=int, default=0, help="synthetic scene index when no WAVs are given")
    s.add_argument("--manifest", type=Path, help="clip manifest (JSON lines with frame, center_ts_ns, wavs)")
    s.add_argument("--frame", type=int, default=0, help="manifest frame to extract")
    sub.add_parser("pretrain-pretext", parents=[common], help="train the car-count pretext model")
    t = sub.add_parser("train", parents=[common], help="train the student detector")
    t.add_argument("--init", type=Path, help="pretext checkpoint to initialize the backbone from")
    for name in ("eval", "track"):
        e = sub.add_parser(name, parents=[common], help=f"{name} a detection checkpoint")
        e.add_argument("--checkpoint", type=Path, required=True)
        if name == "eval":
            e.add_argument("--on", choices=("train", "val", "test"), default="test", help="which split to score")
    sub.add_parser("sweep", parents=[common], help="grid over r, temperature, teacher subsets, mic counts")
    r = sub.add_parser("report", parents=[common], help="figures and a delimited summary of a run directory")
    r.add_argument("run_dir", type=Path)
    c = sub.add_parser("config", parents=[common], help="print the resolved configuration")
    c.add_argument("--dump", action="store_true", help="print every key with its value")
    return p


def _config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _config(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = args.out or Path("runs") / args.command

    from . import pipeline

    if args.command == "config":
        sys.stdout.write(cfg.dump())
        return 0
    try:
        if args.command == "gen-data":
            info = pipeline.run_gen_data(cfg, out, args.write_audio)
            print(f"gen-data|scenes={info['scenes']}|frames={info['frames']}|out={out}")
        elif args.command == "spectrogram":
            info = pipeline.run_spectrogram(
                cfg, out, args.wav, args.timestamp, args.scene, args.manifest, args.frame
            )
            print(f"spectrogram|mel_shape={info['mel_shape']}|input_shape={info['input_shape']}|out={out}")
        elif args.command == "pretrain-pretext":
            res = pipeline.run_pretext(cfg, out)
            print(f"pretext|val_accuracy={res.val_accuracy:.4f}|out={out}")
        elif args.command == "train":
            res = pipeline.run_train(cfg, out, init_checkpoint=args.init)
            print(
                f"train|initial_total={res.initial_total:.6g}|final_total={res.final_total:.6g}"
                f"|best_epoch={res.best_epoch}|out={out}"
            )
        elif args.command == "eval":
            rep = pipeline.run_eval(cfg, args.checkpoint, out, split=args.on)
            print(rep.table())
        elif args.command == "track":
            rep = pipeline.run_track(cfg, args.checkpoint, out)
            print(rep.table())
        elif args.command == "sweep":
            rows = pipeline.run_sweep(cfg, out)
            failed = sum(r["status"] != "ok" for r in rows)
            print(f"sweep|rows={len(rows)}|failed={failed}|out={out}")
        elif args.command == "report":
            for line in pipeline.run_report(args.run_dir, args.out):
                print(line)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
