"""End-to-end runs shared by the command line and the acceptance suite.

Each ``run_*`` function writes its artifacts under an output directory and
returns the in-memory result. Data are regenerated from the configuration,
so a run depends only on its config and seed.
"""

from __future__ import annotations

import itertools
import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import attention_map, l2_normalize, teacher_target, write_pgm
from .audio import (
    clip_to_input,
    extract_clip,
    load_recording,
    log_compress,
    mel_spectrogram,
    peak_normalize,
    read_manifest,
    write_wav,
)
from .config import RunConfig, parse_modalities
from .geometry import write_detections
from .metrics import EvalReport, pr_curve
from .student import Student, init_from_pretext
from .synth import generate_dataset
from .tensor import save_named, save_tensor
from .tracker import write_tracks
from .training import (
    PretextResult,
    Sample,
    TrainResult,
    build_samples,
    evaluate,
    groundtruth_sets,
    load_checkpoint,
    pretrain_pretext,
    read_csv,
    save_checkpoint,
    split_scenes,
    track_scenes,
    train,
    write_csv,
)
from . import plotting

SWEEP_COLUMNS = (
    "seed", "r", "temperature", "teachers", "n_mics", "status", "error",
    "initial_total", "final_total", "map_avg", "map_50", "map_75", "cdx", "cdy",
)


@dataclass
class Splits:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]


@lru_cache(maxsize=2)
def _cached_splits(cfg: RunConfig) -> Splits:
    scenes = generate_dataset(cfg.n_scenes, cfg.scene_config())
    parts = split_scenes(scenes, cfg.split_fractions, cfg.seed)
    hw = (cfg.image_size, cfg.image_size)
    return Splits(*(build_samples(p, cfg.stft_config(), hw, cfg.mics) for p in parts))


def make_splits(cfg: RunConfig) -> Splits:
    """Synthetic train/val/test samples; memoised on the data-relevant keys."""
    return _cached_splits(replace(RunConfig(), **{k: getattr(cfg, k) for k in _DATA_FIELDS}))


_DATA_FIELDS = ("seed", "n_scenes", "frames", "image_size", "min_objects", "max_objects", "condition",
                "night_probability", "snr_db", "n_mics", "split")


def _prepare(out: str | Path, cfg: RunConfig) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump())
    return out


def _meta(cfg: RunConfig, kind: str, **extra) -> dict:
    return {"kind": kind, "config": asdict(cfg), **extra}


# -- data export --------------------------------------------------------


def run_gen_data(cfg: RunConfig, out: str | Path, write_audio: bool = False) -> dict:
    """Export scenes as detection JSON lines, activation tensors and optional WAVs."""
    out = _prepare(out, cfg)
    scenes = generate_dataset(cfg.n_scenes, cfg.scene_config())
    sets: dict[str, list] = {}
    manifest, clips = [], []
    index = 0
    (out / "activations").mkdir(exist_ok=True)
    for s_idx, scene in enumerate(scenes):
        for fr in scene.frames:
            sets.setdefault("groundtruth", []).append(replace(fr.groundtruth, frame_id=index))
            tensors = {}
            for mod, det in fr.teachers.items():
                sets.setdefault(mod, []).append(replace(det, frame_id=index))
                tensors.update({f"{mod}.{lv}": a.values for lv, a in fr.activations[mod].items()})
            save_named(out / "activations" / f"{index:06d}.bin", tensors, {"frame": index})
            manifest.append({"frame": index, "scene": s_idx, "scene_frame": fr.frame_id, "seed": scene.seed,
                             "condition": scene.condition, "timestamp": fr.timestamp, "gt_ids": fr.gt_ids})
            index += 1
        if write_audio:
            (out / "audio").mkdir(exist_ok=True)
            rec = peak_normalize(scene.recording)
            wavs = [f"scene{s_idx:05d}_mic{m}.wav" for m in range(rec.channels.shape[0])]
            for name, ch in zip(wavs, rec.channels):
                write_wav(out / "audio" / name, ch, rec.sample_rate)
            for fr, entry in zip(scene.frames, manifest[-len(scene.frames):]):
                clips.append({"frame": entry["frame"], "center_ts_ns": fr.timestamp, "wavs": wavs})
    for name, s in sets.items():
        write_detections(out / f"{name}.jsonl", s)
    with open(out / "frames.jsonl", "w") as fh:
        fh.writelines(json.dumps(m, sort_keys=True) + "\n" for m in manifest)
    if write_audio:
        with open(out / "audio" / "manifest.jsonl", "w") as fh:
            fh.writelines(json.dumps(c, sort_keys=True) + "\n" for c in clips)
    return {"scenes": len(scenes), "frames": index}


def run_spectrogram(cfg: RunConfig, out: str | Path, wavs: Sequence[str] | None = None,
                    timestamp_ns: int | None = None, scene: int = 0,
                    manifest: str | Path | None = None, frame: int = 0) -> dict:
    """Mel spectrograms (80 × frames per mic) and the resized student input.

    The clip comes from a manifest entry, explicit WAV files, or a synthetic scene.
    WAV paths in a manifest are relative to the manifest's directory.
    """
    out = _prepare(out, cfg)
    if manifest is not None:
        entries = [e for e in read_manifest(manifest) if e["frame"] == frame]
        if not entries:
            raise ValueError(f"{manifest} has no frame {frame}")
        wavs = [Path(manifest).parent / w for w in entries[0]["wavs"]]
        timestamp_ns = int(entries[0]["center_ts_ns"])
    if wavs:
        rec = load_recording(wavs)
        center = timestamp_ns if timestamp_ns is not None else int(rec.duration * 5e8)
        clip = extract_clip(rec, center)
    else:
        sc = generate_dataset(scene + 1, replace(cfg.scene_config(), frames=1))[scene]
        clip = sc.frames[0].clip
    stft = cfg.stft_config()
    norm = peak_normalize(clip)
    mels = [log_compress(mel_spectrogram(ch, stft, i)).values for i, ch in enumerate(norm.channels)]
    save_named(out / "mel.bin", {f"mic{i}": m for i, m in enumerate(mels)})
    x = clip_to_input(clip, stft, (cfg.image_size, cfg.image_size), cfg.mics if clip.channels.shape[0] == 8 else None)
    save_tensor(out / "input.bin", x)
    for i, m in enumerate(mels):
        write_pgm(out / f"mel_mic{i}.pgm", m.data[::-1])
    return {"mel_shape": mels[0].shape, "input_shape": x.shape}


# -- training -----------------------------------------------------------


def run_pretext(cfg: RunConfig, out: str | Path, splits: Splits | None = None) -> PretextResult:
    out = _prepare(out, cfg)
    splits = splits or make_splits(cfg)
    student = Student(cfg.student_config(), cfg.loss_config())
    res = pretrain_pretext(student, splits.train, splits.val, cfg.optim_config(cfg.pretext_epochs), cfg.modalities)
    write_csv(out / "pretext_epochs.csv", res.history)
    save_checkpoint(out / "pretext.bin", res.params, _meta(cfg, "pretext", val_accuracy=res.val_accuracy))
    (out / "pretext_summary.json").write_text(json.dumps({"val_accuracy": res.val_accuracy}, sort_keys=True) + "\n")
    return res


def run_train(cfg: RunConfig, out: str | Path, splits: Splits | None = None,
              init_checkpoint: str | Path | None = None) -> TrainResult:
    """Train the detector; optional pretext initialization from a checkpoint or a fresh pretext run."""
    out = _prepare(out, cfg)
    splits = splits or make_splits(cfg)
    student = Student(cfg.student_config(), cfg.loss_config())
    params = None
    if init_checkpoint is not None:
        pre, meta = load_checkpoint(init_checkpoint)
        params = init_from_pretext(student, pre, cfg.seed)
    elif cfg.pretext_init:
        params = init_from_pretext(student, run_pretext(cfg, out, splits).params, cfg.seed)
    res = train(student, splits.train, splits.val, cfg.optim_config(), cfg.modalities, params)
    write_csv(out / "loss.csv", res.steps, ("step", "epoch", "focal", "box", "mta", "total", "learning_rate"))
    write_csv(out / "epochs.csv", res.epochs)
    save_checkpoint(out / "checkpoint.bin", res.best_params,
                    _meta(cfg, "detect", best_epoch=res.best_epoch, step=len(res.steps)), res.optimizer)
    return res


def _student_for(cfg: RunConfig, checkpoint: str | Path) -> tuple[Student, dict]:
    params, meta = load_checkpoint(checkpoint)
    if meta.get("kind") != "detect":
        raise ValueError(f"{checkpoint} is not a detection checkpoint")
    student = Student(cfg.student_config(), cfg.loss_config())
    shapes = {**student.backbone_shapes(), **student.head_shapes()}
    for name, shape in shapes.items():
        if name not in params or params[name].shape != shape:
            got = None if name not in params else params[name].shape
            raise ValueError(f"checkpoint incompatible with config: {name} has shape {got}, expected {shape}")
    return student, params


def run_eval(cfg: RunConfig, checkpoint: str | Path, out: str | Path, splits: Splits | None = None,
             split: str = "test") -> EvalReport:
    out = _prepare(out, cfg)
    student, params = _student_for(cfg, checkpoint)
    samples = getattr(splits or make_splits(cfg), split)
    report, preds = evaluate(student, params, samples, cfg.score_threshold, cfg.tracker_config())
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.table() + "\n")
    write_detections(out / "predictions.jsonl", preds)
    scores, precision, recall = pr_curve(preds, groundtruth_sets(samples), 0.5)
    rows = [{"score": s, "precision": p, "recall": r} for s, p, r in zip(scores, precision, recall)]
    write_csv(out / "pr.csv", rows, ("score", "precision", "recall"))
    return report


def run_track(cfg: RunConfig, checkpoint: str | Path, out: str | Path) -> EvalReport:
    """Decode multi-frame scenes, link detections into tracklets, score with CLEAR-MOT."""
    frames = max(cfg.frames, 2)
    tcfg = replace(cfg, frames=frames)
    out = _prepare(out, tcfg)
    student, params = _student_for(tcfg, checkpoint)
    samples = make_splits(tcfg).test
    report, preds = evaluate(student, params, samples, tcfg.score_threshold, tcfg.tracker_config())
    hyp, _ = track_scenes(preds, samples, tcfg.tracker_config())
    write_tracks(out / "tracks.jsonl", hyp)
    (out / "report.json").write_text(report.to_json())
    return report


# -- sweep --------------------------------------------------------------


def sweep_grid(cfg: RunConfig) -> list[RunConfig]:
    rs = [float(v) for v in cfg.sweep_r.split(",")]
    ts = [float(v) for v in cfg.sweep_temperature.split(",")]
    subsets = [",".join(parse_modalities(s)) for s in cfg.sweep_teachers.split(";")]
    mics = [int(v) for v in cfg.sweep_mics.split(",")]
    seeds = [int(v) for v in cfg.sweep_seeds.split(",")]
    return [
        replace(cfg, r=r, temperature=t, teachers=sub, n_mics=m, seed=s)
        for s, m, sub, r, t in itertools.product(seeds, mics, subsets, rs, ts)
    ]


def _sweep_row(cfg: RunConfig) -> dict:
    row = {"seed": cfg.seed, "r": cfg.r, "temperature": cfg.temperature, "teachers": cfg.teachers,
           "n_mics": cfg.n_mics, "status": "ok", "error": ""}
    try:
        splits = make_splits(cfg)
        student = Student(cfg.student_config(), cfg.loss_config())
        res = train(student, splits.train, splits.val, cfg.optim_config(), cfg.modalities)
        report, _ = evaluate(student, res.best_params, splits.test, cfg.score_threshold)
        row.update(initial_total=res.initial_total, final_total=res.final_total)
        row.update({k: getattr(report, k) for k in ("map_avg", "map_50", "map_75", "cdx", "cdy")})
    except Exception as exc:  # recorded per row; the sweep carries on
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}".replace("\n", " "))
        traceback.print_exc()
    return row


def run_sweep(cfg: RunConfig, out: str | Path) -> list[dict]:
    out = _prepare(out, cfg)
    grid = sweep_grid(cfg)
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            rows = list(pool.map(_sweep_row, grid))
    else:
        rows = [_sweep_row(c) for c in grid]
    write_csv(out / "sweep.csv", rows, SWEEP_COLUMNS)
    return rows


# -- reporting ----------------------------------------------------------


def run_report(run_dir: str | Path, out: str | Path | None = None) -> list[str]:
    """Render figures for whatever artifacts a run directory holds; returns summary lines."""
    run_dir = Path(run_dir)
    out = Path(out) if out else run_dir / "figures"
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    if (run_dir / "epochs.csv").exists():
        epochs = read_csv(run_dir / "epochs.csv")
        plotting.loss_curves(epochs, out / "loss.png")
        first, last = float(epochs[0]["train_total"]), float(epochs[-1]["train_total"])
        lines.append(f"loss|initial_total={first:.6g}|final_total={last:.6g}|ratio={last / first:.4f}")
    if (run_dir / "pr.csv").exists():
        pr = read_csv(run_dir / "pr.csv")
        p = np.array([float(r["precision"]) for r in pr])
        r = np.array([float(r["recall"]) for r in pr])
        plotting.pr_curve(p, r, out / "pr.png", "IoU 0.5")
    if (run_dir / "report.json").exists():
        rep = EvalReport.from_json((run_dir / "report.json").read_text())
        lines.append("eval|" + "|".join(f"{k}={v}" for k, v in asdict(rep).items()))
    if (run_dir / "sweep.csv").exists():
        rows = read_csv(run_dir / "sweep.csv")
        plotting.sweep_bars(rows, out / "sweep.png")
        for row in rows:
            lines.append("sweep|" + "|".join(f"{k}={row[k]}" for k in SWEEP_COLUMNS if k in row))
    if (run_dir / "checkpoint.bin").exists() and (run_dir / "config.txt").exists():
        from .config import load_config

        cfg = replace(load_config(run_dir / "config.txt"), n_scenes=1, frames=1)
        student, params = _student_for(cfg, run_dir / "checkpoint.bin")
        sample = make_splits(replace(cfg, n_scenes=1, split="1,0,0")).train[0]
        feats = student.forward_detect(params, sample.x).features
        maps = {}
        for lv in ("P3", "P4", "P5"):
            t = teacher_target([sample.activations[m][lv] for m in cfg.modalities], cfg.r).values.data
            s = l2_normalize(attention_map(feats[lv], cfg.r)).values.data
            write_pgm(out / f"teacher_{lv}.pgm", t)
            write_pgm(out / f"student_{lv}.pgm", s)
            maps[f"teacher {lv}"], maps[f"student {lv}"] = t, s
        plotting.attention_panels(maps, out / "attention.png")
    lines.extend(f"figure|{p.name}" for p in sorted(out.glob("*.png")))
    return lines
