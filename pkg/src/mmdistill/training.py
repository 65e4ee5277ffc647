"""Sample preparation, optimizer, scheduler, training loops and evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .attention import ActivationTensor
from .audio import StftConfig, clip_to_input
from .autograd import GraphError
from .geometry import POSITIVE, DetectionSet, assign_targets, encode, fuse_teachers
from .losses import focal_inputs, mta_target
from .metrics import EvalReport, TrackRecord, evaluate_detections, mot_metrics
from .student import Student, decode_boxes
from .synth import Scene
from .tensor import load_named, save_named
from .tracker import TrackerConfig, run as run_tracker, to_records


class TrainingError(RuntimeError):
    pass


# -- data ---------------------------------------------------------------


@dataclass
class Sample:
    index: int
    scene: int
    frame: int
    x: np.ndarray  # (n_mics, H, W)
    groundtruth: DetectionSet
    gt_ids: list[int]
    teachers: dict[str, DetectionSet]
    activations: dict[str, dict[str, ActivationTensor]]

    def fused(self, modalities: Sequence[str]) -> DetectionSet:
        return fuse_teachers([self.teachers[m] for m in modalities])


def build_samples(
    scenes: Sequence[Scene],
    stft: StftConfig = StftConfig(),
    input_hw: tuple[int, int] = (96, 96),
    mics: Sequence[int] | None = None,
) -> list[Sample]:
    """One sample per scene frame, numbered consecutively."""
    out = []
    for s_idx, scene in enumerate(scenes):
        for fr in scene.frames:
            x = clip_to_input(fr.clip, stft, input_hw, mics).numpy()
            out.append(
                Sample(len(out), s_idx, fr.frame_id, x, fr.groundtruth, fr.gt_ids, fr.teachers, fr.activations)
            )
    return out


def split_dataset(items: Sequence, fractions: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> tuple[list, list, list]:
    """Shuffled split; val and test get floor(f * n), train takes the rest."""
    if len(items) == 0:
        raise ValueError("cannot split an empty dataset")
    if len(fractions) != 3 or min(fractions) < 0 or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions {fractions} must be three nonnegative values summing to 1")
    n = len(items)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    n_test = int(math.floor(fractions[2] * n + 1e-9))
    n_train = n - n_val - n_test
    pick = lambda idx: [items[i] for i in idx]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train : n_train + n_val]), pick(order[n_train + n_val :])


def split_scenes(scenes: Sequence[Scene], fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Split at scene level so frames of one scene never straddle splits."""
    return split_dataset(list(scenes), fractions, seed)


def detection_bindings(student: Student, sample: Sample, modalities: Sequence[str]) -> dict[str, np.ndarray]:
    """Every non-parameter input of the student's training graph for one sample."""
    fused = sample.fused(modalities)
    anchors = student.all_anchors
    labels, matched = assign_targets(anchors, fused, student.cfg.anchors)
    is_pos, keep, norm = focal_inputs(labels)
    per_anchor = np.zeros((len(anchors), 4))
    weight = np.zeros((len(anchors), 4))
    pos = labels == POSITIVE
    if pos.any():
        per_anchor[pos] = encode(anchors[pos], fused.to_array()[matched[pos]])
        weight[pos] = 1.0
    bind = {
        "x": sample.x,
        "is_pos": is_pos,
        "keep": keep,
        "norm": np.array(norm),
        "box_target": student.box_target_layout(per_anchor),
        "box_weight": student.box_target_layout(weight),
    }
    for level in student.loss_cfg.levels:
        bind[f"mta_target.{level}"] = mta_target([sample.activations[m][level] for m in modalities], student.loss_cfg)
    return bind


def count_label(sample: Sample, modalities: Sequence[str], classes: int) -> int:
    return min(len(sample.fused(modalities)), classes - 1)


# -- optimisation --------------------------------------------------------


@dataclass
class Adam:
    """Adam with bias-corrected moments and decoupled weight decay."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be nonnegative")

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = np.asarray(grads[name])
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = p - self.learning_rate * update - self.learning_rate * self.weight_decay * p


@dataclass
class ReduceLROnPlateau:
    """Multiply the rate by ``factor`` after ``patience`` epochs without relative improvement."""

    factor: float = 0.1
    patience: int = 3
    threshold: float = 1e-4
    min_lr: float = 0.0
    best: float = math.inf
    bad_epochs: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")

    def step(self, metric: float, lr: float) -> float:
        if metric < self.best * (1.0 - self.threshold):
            self.best = metric
            self.bad_epochs = 0
            return lr
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.bad_epochs = 0
            return max(lr * self.factor, self.min_lr)
        return lr


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 2e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 8
    scheduler_factor: float = 0.1
    scheduler_patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need epochs >= 0 and batch_size >= 1")


LOSS_COLUMNS = ("step", "epoch", "focal", "box", "mta", "total", "learning_rate")
EPOCH_COLUMNS = ("epoch", "train_total", "train_focal", "train_mta", "val_total", "learning_rate")


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    best_epoch: int
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    optimizer: Adam | None = None

    @property
    def initial_total(self) -> float:
        return self.epochs[0]["train_total"]

    @property
    def final_total(self) -> float:
        return self.epochs[-1]["train_total"]


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _loss_terms(out) -> dict[str, float]:
    return {k: out[k].item() for k in ("focal", "box", "mta", "total")}


def mean_loss(student: Student, params: Mapping[str, np.ndarray], bindings: Sequence[dict]) -> dict[str, float]:
    g = student.train_graph
    acc = {"focal": 0.0, "box": 0.0, "mta": 0.0, "total": 0.0}
    for b in bindings:
        for k, v in _loss_terms(g.forward({**b, **params})).items():
            acc[k] += v
    return {k: v / max(1, len(bindings)) for k, v in acc.items()}


def _run_epochs(
    loss_graph,
    loss_name: str,
    params: dict[str, np.ndarray],
    train_bind: Sequence[dict],
    val_bind: Sequence[dict],
    cfg: OptimConfig,
    terms: Callable[[dict], dict[str, float]],
    progress: Callable[[dict], None] | None,
) -> TrainResult:
    """Shared mini-batch loop: per-sample graphs, gradients averaged over the batch."""
    if not train_bind or not val_bind:
        raise TrainingError("training needs nonempty train and validation sets")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    sched = ReduceLROnPlateau(cfg.scheduler_factor, cfg.scheduler_patience)
    names = list(params)

    def evaluate(bind, epoch):
        acc: dict[str, float] = {}
        for i, b in enumerate(bind):
            try:
                out = loss_graph.forward({**b, **params})
            except GraphError as exc:
                raise TrainingError(f"non-finite loss evaluating epoch {epoch} (sample {i}): {exc}") from exc
            for k, v in terms(out).items():
                acc[k] = acc.get(k, 0.0) + v
        return {k: v / len(bind) for k, v in acc.items()}

    def epoch_row(epoch, train_terms, val_terms):
        row = {"epoch": epoch, "learning_rate": opt.learning_rate}
        row.update({f"train_{k}": v for k, v in train_terms.items()})
        row.update({f"val_{k}": v for k, v in val_terms.items()})
        if progress:
            progress(row)
        return row

    result = TrainResult(params, {k: v.copy() for k, v in params.items()}, 0, optimizer=opt)
    val0 = evaluate(val_bind, 0)
    result.epochs.append(epoch_row(0, evaluate(train_bind, 0), val0))
    best_val = val0[loss_name]
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = {}
        for b_idx, batch in enumerate(_batches(len(train_bind), cfg.batch_size, rng)):
            grads = {k: np.zeros_like(params[k]) for k in names}
            batch_terms: dict[str, float] = {}
            for i in batch:
                try:
                    out = loss_graph.forward({**train_bind[i], **params})
                except GraphError as exc:
                    raise TrainingError(f"non-finite loss in epoch {epoch}, batch {b_idx} (sample {i}): {exc}") from exc
                for k, v in terms(out).items():
                    batch_terms[k] = batch_terms.get(k, 0.0) + v / len(batch)
                g = loss_graph.backward(loss_name)
                for k in names:
                    grads[k] += g[k].data
            for k in names:
                grads[k] /= len(batch)
            opt.step(params, grads)
            step += 1
            result.steps.append({"step": step, "epoch": epoch, **batch_terms, "learning_rate": opt.learning_rate})
            for k, v in batch_terms.items():
                sums[k] = sums.get(k, 0.0) + v * len(batch)
        val = evaluate(val_bind, epoch)
        result.epochs.append(epoch_row(epoch, {k: v / len(train_bind) for k, v in sums.items()}, val))
        if val[loss_name] < best_val:
            best_val = val[loss_name]
            result.best_params = {k: v.copy() for k, v in params.items()}
            result.best_epoch = epoch
        opt.learning_rate = sched.step(val[loss_name], opt.learning_rate)
    result.params = params
    return result


def train(
    student: Student,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    cfg: OptimConfig = OptimConfig(),
    modalities: Sequence[str] = ("rgb", "depth", "thermal"),
    params: dict[str, np.ndarray] | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minimise the total distillation loss; epoch 0 records the loss at init."""
    params = dict(params) if params is not None else student.init_detect_params(cfg.seed)
    train_bind = [detection_bindings(student, s, modalities) for s in train_samples]
    val_bind = [detection_bindings(student, s, modalities) for s in val_samples]
    return _run_epochs(student.train_graph, "total", params, train_bind, val_bind, cfg, _loss_terms, progress)


@dataclass
class PretextResult:
    params: dict[str, np.ndarray]
    history: list[dict]
    val_accuracy: float


def pretrain_pretext(
    student: Student,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    cfg: OptimConfig = OptimConfig(),
    modalities: Sequence[str] = ("rgb", "depth", "thermal"),
    progress: Callable[[dict], None] | None = None,
) -> PretextResult:
    """Train backbone + perceptron to classify the fused-teacher car count."""
    k = student.cfg.pretext_classes
    params = student.init_pretext_params(cfg.seed)

    def bind(samples):
        eye = np.eye(k)
        return [{"x": s.x, "onehot": eye[count_label(s, modalities, k)]} for s in samples]

    res = _run_epochs(
        student.pretext_train_graph, "loss", params, bind(train_samples), bind(val_samples), cfg,
        lambda out: {"loss": out["loss"].item()}, progress,
    )
    best = res.best_params
    correct = sum(
        int(np.argmax(student.forward_pretext(best, s.x)) == count_label(s, modalities, k)) for s in val_samples
    )
    return PretextResult(best, res.epochs, correct / max(1, len(val_samples)))


# -- evaluation ----------------------------------------------------------


def predict(
    student: Student, params: Mapping[str, np.ndarray], samples: Iterable[Sample], score_threshold: float = 0.05
) -> list[DetectionSet]:
    return [
        decode_boxes(
            student.forward_detect(params, s.x), student.anchors, score_threshold, student.cfg.input_hw, s.index
        )
        for s in samples
    ]


def groundtruth_sets(samples: Iterable[Sample]) -> list[DetectionSet]:
    return [replace(s.groundtruth, frame_id=s.index) for s in samples]


def track_scenes(
    preds: Sequence[DetectionSet], samples: Sequence[Sample], cfg: TrackerConfig = TrackerConfig()
) -> tuple[list[TrackRecord], list[TrackRecord]]:
    """Track each scene independently; ids are offset so they stay unique overall."""
    hyp, gt = [], []
    by_scene: dict[int, list[tuple[Sample, DetectionSet]]] = {}
    for s, p in zip(samples, preds):
        by_scene.setdefault(s.scene, []).append((s, p))
    offset = 0
    for scene in sorted(by_scene):
        pairs = sorted(by_scene[scene], key=lambda t: t[0].frame)
        recs = to_records(run_tracker([p for _, p in pairs], cfg))
        hyp += [TrackRecord(r.frame, r.track_id + offset, r.box) for r in recs]
        for s, _ in pairs:
            gt += [TrackRecord(s.index, oid + offset, b) for oid, b in zip(s.gt_ids, s.groundtruth.boxes)]
        offset += 1 + max([r.track_id for r in recs] + list(pairs[0][0].gt_ids) + [0])
    return hyp, gt


def evaluate(
    student: Student,
    params: Mapping[str, np.ndarray],
    samples: Sequence[Sample],
    score_threshold: float = 0.05,
    tracker_cfg: TrackerConfig | None = None,
) -> tuple[EvalReport, list[DetectionSet]]:
    """Detection metrics against groundtruth; tracking metrics when scenes have several frames."""
    missing = set(student.detect_graph.parameters) - set(params)
    if missing:
        raise ValueError(f"checkpoint lacks parameters {sorted(missing)[:3]}")
    preds = predict(student, params, samples, score_threshold)
    report = evaluate_detections(preds, groundtruth_sets(samples))
    if tracker_cfg is not None and len({s.frame for s in samples}) > 1:
        hyp, gt = track_scenes(preds, samples, tracker_cfg)
        mot = mot_metrics(hyp, gt)
        report = replace(
            report, mota=mot.mota, id_switches=mot.id_switches, fragments=mot.fragments, fp=mot.fp, fn=mot.fn
        )
    return report, preds


# -- files ---------------------------------------------------------------


def write_csv(path: str | Path, rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items() if k in columns})


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], meta: dict, optimizer: Adam | None = None):
    tensors = dict(params)
    if optimizer is not None:
        tensors.update({f"adam.m.{k}": v for k, v in optimizer.m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in optimizer.v.items()})
        meta = {**meta, "adam_t": optimizer.t}
    save_named(path, tensors, meta)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    tensors, meta = load_named(path)
    params = {k: v.numpy() for k, v in tensors.items() if not k.startswith("adam.")}
    return params, meta
