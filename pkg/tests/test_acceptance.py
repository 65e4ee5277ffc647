"""Acceptance gate: each criterion records one PASS/FAIL line, printed in the summary."""

import filecmp
import math
import time

import numpy as np

from conftest import ACCEPTANCE_LINES
from mmdistill.attention import ActivationTensor, PyramidLevel
from mmdistill.audio import StftConfig, mel_spectrogram
from mmdistill.autograd import fd_gradient
from mmdistill.cli import main
from mmdistill.config import RunConfig
from mmdistill.geometry import Box, DetectionSet, fuse_teachers, nms
from mmdistill.losses import kl_temperature, mta_loss
from mmdistill.metrics import TrackRecord, map_suite, mot_metrics
from mmdistill import pipeline
from mmdistill.pipeline import make_splits
from mmdistill.student import Student, StudentConfig, init_from_pretext
from mmdistill.synth import SceneConfig, generate_dataset, generate_scene
from mmdistill.tensor import Tensor
from mmdistill.tracker import run as run_tracker
from mmdistill.tracker import to_records
from mmdistill.training import (
    OptimConfig,
    build_samples,
    detection_bindings,
    evaluate,
    pretrain_pretext,
    split_scenes,
    train,
)
from oracles import ap_101, match_by_rank, pr_points, suppression_fixed_point

ALL = ("rgb", "depth", "thermal")


def record(number, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_01_gradient_correctness():
    t0 = time.perf_counter()
    cfg = StudentConfig(input_channels=2, input_hw=(64, 64), widths=(2, 2, 3, 3, 3), head_init_std=0.1)
    student = Student(cfg)
    params = student.init_detect_params(0)
    n_params = sum(v.size for v in params.values())
    scenes = generate_dataset(1, SceneConfig(seed=2, image_hw=(64, 64), min_objects=2, max_objects=3, condition="day"))
    sample = build_samples(scenes, input_hw=(64, 64), mics=[0, 7])[0]
    bind = {**detection_bindings(student, sample, ALL), **params}
    g = student.train_graph
    g.forward(bind)
    analytic = g.backward("total")
    worst, worst_name = 0.0, ""
    for name in params:
        fd = fd_gradient(lambda v: g.forward({**bind, name: v.data})["total"].item(), params[name], 1e-5, False).data
        a = analytic[name].data
        rel = np.linalg.norm(a - fd) / max(np.linalg.norm(fd), 1e-300)
        if rel > worst:
            worst, worst_name = rel, name
    elapsed = time.perf_counter() - t0
    ok = n_params <= 5000 and worst <= 1e-3 and elapsed < 60
    record(1, ok, f"{n_params} params, worst per-tensor relative error {worst:.2e} ({worst_name}), {elapsed:.1f} s")


def test_02_kl_properties():
    rng = np.random.default_rng(2)
    worst_equal, min_distinct, min_value = 0.0, np.inf, np.inf
    for i in range(1000):
        n = int(rng.integers(2, 200))
        s = rng.normal(size=n) * rng.uniform(0.1, 5)
        t = rng.normal(size=n) * rng.uniform(0.1, 5)
        temp = float(rng.uniform(0.5, 20))
        v = kl_temperature(s, t, temp)
        min_value = min(min_value, v)
        min_distinct = min(min_distinct, v)
        # same softmax: identical maps or a constant shift
        same = kl_temperature(s, s + (rng.normal() if i % 2 else 0.0), temp)
        worst_equal = max(worst_equal, abs(same))
    ok = min_value >= 0 and worst_equal <= 1e-9 and min_distinct > 1e-9
    record(2, ok, f"1000 pairs: min KL {min_value:.2e}, min KL for distinct {min_distinct:.2e}, max |KL| for coinciding {worst_equal:.1e}")


def test_03_mta_scale_invariance():
    rng = np.random.default_rng(3)
    shapes = {"P3": (12, 12), "P4": (6, 6), "P5": (3, 3)}

    def feats(c):
        return {k: ActivationTensor(PyramidLevel[k], Tensor(rng.normal(size=(c, *hw)))) for k, hw in shapes.items()}

    worst = 0.0
    for _ in range(200):
        student, teachers = feats(8), [feats(4) for _ in range(3)]
        base = mta_loss(student, teachers)
        j, lam = int(rng.integers(3)), float(rng.uniform(0.1, 10))
        scaled = list(teachers)
        scaled[j] = {k: ActivationTensor(a.level, Tensor(a.values.data * lam)) for k, a in teachers[j].items()}
        worst = max(worst, abs(mta_loss(student, scaled) - base))
    record(3, worst < 1e-9, f"200 trials, max |change| {worst:.1e}")


def test_04_fusion_oracle():
    rng = np.random.default_rng(4)
    mods = ("rgb", "depth", "thermal")
    bad = 0
    for _ in range(1000):
        sets = []
        for m in mods[: int(rng.integers(1, 4))]:
            boxes = []
            for _ in range(int(rng.integers(0, 4))):
                x, y = rng.integers(0, 30, size=2).astype(float)
                w, h = rng.integers(2, 15, size=2).astype(float)
                boxes.append(Box(x, y, x + w, y + h, float(rng.choice([0.5, 0.7, 0.9])), 0))
            sets.append(DetectionSet(0, m, boxes))
        pooled = [b for s in sets for b in s.boxes]
        fused = fuse_teachers(sets).boxes
        oracle = [pooled[i] for i in suppression_fixed_point(pooled, 0.5)]
        if fused != oracle or nms(fused, 0.5) != fused:
            bad += 1
    record(4, bad == 0, f"1000 instances, {bad} mismatches against brute-force suppression or idempotence")


def test_05_spectrogram_shape():
    t = np.arange(44100) / 44100
    shape = mel_spectrogram(np.sin(2 * np.pi * 1000 * t), StftConfig()).values.shape
    record(5, shape == (80, 173), f"1 s at 44.1 kHz -> {shape}")


def test_06_map_oracle():
    rng = np.random.default_rng(6)
    bad = 0
    for _ in range(500):
        gts, preds, k = [], [], 0
        for f in range(int(rng.integers(1, 4))):
            g = [Box(*(lambda x, y, w: (x, y, x + w, y + w))(*rng.integers(0, 20, 2) * 2.0, float(rng.integers(4, 14))))
                 for _ in range(int(rng.integers(0, 4)))]
            p = []
            for _ in range(int(rng.integers(0, 5))):
                k += 1
                x, y = rng.integers(0, 20, 2) * 2.0
                w = float(rng.integers(4, 14))
                p.append(Box(x, y, x + w, y + w, float(rng.uniform(0.01, 1.0)), 0))
            gts.append(DetectionSet(f, "groundtruth", g))
            preds.append(DetectionSet(f, "audio", p))
        if sum(len(g) for g in gts) == 0:
            gts[0] = DetectionSet(0, "groundtruth", [Box(0, 0, 5, 5)])
        n_gt = sum(len(g) for g in gts)
        ranked = sorted(((s.frame_id, b) for s in preds for b in s.boxes), key=lambda fb: -fb[1].score)
        by_frame = {g.frame_id: list(g.boxes) for g in gts}
        aps = {}
        for thr in np.linspace(0.5, 0.95, 10):
            flags = match_by_rank(ranked, by_frame, thr)
            aps[round(float(thr), 2)] = ap_101(pr_points(flags, n_gt)) if flags else 0.0
        oracle = (math.fsum(aps.values()) / 10, aps[0.5], aps[0.75])
        if map_suite(preds, gts) != oracle:
            bad += 1
    gt = [DetectionSet(0, "groundtruth", [Box(0, 0, 10, 10), Box(30, 30, 40, 40)])]
    perfect = map_suite([DetectionSet(0, "audio", [Box(0, 0, 10, 10, 0.9), Box(30, 30, 40, 40, 0.8)])], gt)
    # 10 px boxes offset by 2.5 px on x: IoU = 7.5 / 12.5 = 0.6
    loose = map_suite([DetectionSet(0, "audio", [Box(2.5, 0, 12.5, 10, 0.9), Box(32.5, 30, 42.5, 40, 0.8)])], gt)
    ok = bad == 0 and perfect == (1.0, 1.0, 1.0) and loose[1:] == (1.0, 0.0)
    record(6, ok, f"500 instances, {bad} mismatches; perfect {perfect}; IoU-0.6 case map_50={loose[1]}, map_75={loose[2]}")


def test_07_tracker_fixture():
    def box(x, y):
        return Box(x, y, x + 10, y + 10, 0.9, 0)

    # two objects crossing horizontally on overlapping rows
    seq = [DetectionSet(t, "audio", [box(2 * t, 0), box(18 - 2 * t, 4)]) for t in range(10)]
    table = sorted((r.frame, r.track_id, r.box.x_min) for r in to_records(run_tracker(seq)))
    expected = sorted([(t, 0, 2.0 * t) for t in range(10)] + [(t, 1, 18.0 - 2 * t) for t in range(10)])
    # teleport: track 0 holds frames 0-2, the object jumps at frame 3 and a new id takes over
    gt = [TrackRecord(f, 0, box(f, 0)) for f in range(6)]
    hyp = [TrackRecord(f, 0, box(f, 0)) for f in range(3)] + [TrackRecord(f, 1, box(f, 0)) for f in range(3, 6)]
    mot = mot_metrics(hyp, gt)
    got = (round(mot.mota, 12), mot.id_switches, mot.fp, mot.fn)
    want = (round(1 - 1 / 6, 12), 1, 0, 0)
    record(7, table == expected and got == want, f"tracklet table {'matches' if table == expected else 'differs'}; teleport (MOTA, IDSW, FP, FN) = {got}")


def test_08_end_to_end():
    t0 = time.perf_counter()
    cfg = RunConfig()
    splits = make_splits(cfg)
    student = Student(cfg.student_config(), cfg.loss_config())
    res = train(student, splits.train, splits.val, cfg.optim_config(), cfg.modalities)
    report, _ = evaluate(student, res.best_params, splits.test, cfg.score_threshold)
    elapsed = time.perf_counter() - t0
    pipeline._cached_splits.cache_clear()  # release the 512-scene sample cache

    one = build_samples([generate_scene(SceneConfig(seed=11))])
    over = train(Student(), one, one, OptimConfig(epochs=500, batch_size=1, scheduler_patience=10**6))
    totals = [s["total"] for s in over.steps]
    first = next((i + 1 for i, v in enumerate(totals) if v < 0.01), None)
    ratio = res.final_total / res.initial_total
    ok = report.map_50 >= 0.5 and ratio <= 0.5 and elapsed <= 600 and first is not None and first <= 500
    record(
        8, ok,
        f"{cfg.n_scenes} scenes, {cfg.epochs} epochs in {elapsed:.0f} s: test mAP@0.5 {report.map_50:.3f} "
        f"(avg {report.map_avg:.3f}, CDx {report.cdx:.2f}, CDy {report.cdy:.2f}), L_total {res.initial_total:.3f} -> "
        f"{res.final_total:.3f} (x{ratio:.3f}); overfit below 0.01 at step {first}",
    )


def test_09_multi_teacher_benefit():
    maps = {"all": [], "rgb": []}
    for seed in range(3):
        scenes = generate_dataset(192, SceneConfig(seed=100 + seed))
        tr, va, te = (build_samples(p) for p in split_scenes(scenes, seed=seed))
        for name, mods in (("all", ALL), ("rgb", ("rgb",))):
            student = Student()
            res = train(student, tr, va, OptimConfig(epochs=12, seed=seed), modalities=mods)
            maps[name].append(evaluate(student, res.best_params, te)[0].map_50)
    a, r = np.mean(maps["all"]), np.mean(maps["rgb"])
    record(9, a >= r, f"mean test mAP@0.5 over 3 seeds: rgb+depth+thermal {a:.3f} vs rgb only {r:.3f}")


def test_10_pretext_benefit():
    pre_runs, rand_runs = [], []
    for seed in range(5):
        scenes = generate_dataset(128, SceneConfig(seed=200 + seed))
        tr, va, _ = split_scenes(scenes, seed=seed)
        tr, va = build_samples(tr), build_samples(va)
        student = Student()
        pre = pretrain_pretext(student, tr, va, OptimConfig(epochs=8, seed=seed))
        init = init_from_pretext(student, pre.params, seed)
        cfg = OptimConfig(epochs=8, seed=seed)
        pre_runs.append([r["train_total"] for r in train(student, tr, va, cfg, params=init).epochs])
        rand_runs.append([r["train_total"] for r in train(student, tr, va, cfg).epochs])
    p, r = np.mean(pre_runs, axis=0), np.mean(rand_runs, axis=0)
    # epoch 0 is the evaluation before any update; both start from zeroed heads
    trained = bool(np.all(p[1:] < r[1:]))
    reduction = 100 * np.mean(1 - p[1:] / r[1:])
    record(
        10, trained,
        f"5 seeds, epochs 1-8 pretext < random: {trained} (mean reduction {reduction:.1f}%); "
        f"epoch 0 (before training) {p[0]:.6f} vs {r[0]:.6f}",
    )


def test_11_determinism(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(
        "n_scenes = 6\nimage_size = 32\nwidths = 2,3,3,4,4\nn_mics = 2\npretext_classes = 3\n"
        "epochs = 2\npretext_epochs = 1\nbatch_size = 2\nframes = 2\nsweep_r = 1,2\n"
    )
    dirs = []
    for rep in ("a", "b"):
        d = tmp_path / rep
        for argv in (
            ["gen-data", "--out", d / "data"],
            ["pretrain-pretext", "--out", d / "pre"],
            ["train", "--out", d / "run", "--init", d / "pre" / "pretext.bin"],
            ["eval", "--out", d / "run", "--checkpoint", d / "run" / "checkpoint.bin"],
            ["track", "--out", d / "trk", "--checkpoint", d / "run" / "checkpoint.bin"],
            ["sweep", "--out", d / "sweep"],
        ):
            assert main([str(a) for a in argv] + ["--config", str(cfg)]) == 0
        dirs.append(d)
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
    differing = [str(f) for f in files if not filecmp.cmp(dirs[0] / f, dirs[1] / f, shallow=False)]
    key = ["run/loss.csv", "run/report.json", "trk/report.json", "sweep/sweep.csv"]
    ok = not differing and all((dirs[0] / k).exists() for k in key)
    record(11, ok, f"6 subcommands twice: {len(files)} files compared, {len(differing)} differ {differing[:3]}")
