"""Deterministic synthetic scenes with procedural teachers and matched audio.

Cars drive horizontally in a road band of the image. Each car emits a pure
tone whose frequency is chosen so that, after the Mel projection and the
resize to the student input, its band lands on the image row of the car's
centre. The car's x position is carried by Gaussian gain panning across a
line of microphones spanning the image width.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .attention import LEVELS, ActivationTensor
from .audio import NS_PER_S, StftConfig, WaveClip, extract_clip, mel_points, mel_to_hz
from .geometry import Box, DetectionSet
from .tensor import Tensor

MAX_OBJECTS = 13
MODALITIES = ("rgb", "depth", "thermal")


@dataclass(frozen=True)
class TeacherOracle:
    modality: str
    dropout_day: float
    dropout_night: float
    center_jitter: float = 1.0  # px, std
    size_jitter: float = 0.04  # relative std
    score_range: tuple[float, float] = (0.75, 0.98)
    channels: int = 4
    bump_scale: float = 0.5  # bump std as a fraction of box extent
    background: float = 0.0

    def dropout(self, condition: str) -> float:
        return self.dropout_night if condition == "night" else self.dropout_day


DEFAULT_TEACHERS = (
    TeacherOracle("rgb", dropout_day=0.05, dropout_night=0.7),
    TeacherOracle("depth", dropout_day=0.2, dropout_night=0.2),
    TeacherOracle("thermal", dropout_day=0.3, dropout_night=0.05),
)


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    frames: int = 1
    image_hw: tuple[int, int] = (96, 96)
    min_objects: int = 1
    max_objects: int = 3
    condition: str | None = None  # None draws day/night per scene
    night_probability: float = 0.5
    frame_interval: float = 0.1  # s
    max_speed: float = 40.0  # px/s
    row_range: tuple[float, float] = (0.3, 0.82)  # fraction of height for car centres
    min_row_gap: float = 0.12  # fraction of height between car centres
    width_range: tuple[float, float] = (0.25, 0.5)  # fraction of image width, far to near
    aspect: float = 0.5  # height / width
    n_mics: int = 8
    mic_sigma: float = 1.0 / 3.0  # gain panning width, fraction of image width
    delay_per_px: float = 1e-5  # s
    amplitude: float = 0.3
    snr_db: float = 30.0
    stft: StftConfig = StftConfig()
    teachers: tuple[TeacherOracle, ...] = DEFAULT_TEACHERS
    static: bool = False

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects <= MAX_OBJECTS:
            raise ValueError(f"object count range must lie within 1..{MAX_OBJECTS}")
        if self.frames < 1:
            raise ValueError("need at least one frame")
        if self.condition not in (None, "day", "night"):
            raise ValueError(f"unknown condition {self.condition!r}")


@dataclass(frozen=True)
class SceneObject:
    obj_id: int
    x0: float  # centre x at frame 0
    vx: float  # px / s
    cy: float
    width: float
    height: float
    frequency: float
    phase: float

    def center_x(self, t: float | np.ndarray) -> float | np.ndarray:
        return self.x0 + self.vx * t

    def box(self, t: float) -> Box:
        cx = self.center_x(t)
        return Box(cx - self.width / 2, self.cy - self.height / 2, cx + self.width / 2, self.cy + self.height / 2, 1.0, 0)


@dataclass
class Frame:
    frame_id: int
    timestamp: int  # ns
    groundtruth: DetectionSet
    gt_ids: list[int]
    teachers: dict[str, DetectionSet]
    activations: dict[str, dict[str, ActivationTensor]]
    clip: WaveClip


@dataclass
class Scene:
    seed: int
    condition: str
    objects: list[SceneObject]
    image_hw: tuple[int, int]
    frames: list[Frame] = field(default_factory=list)
    recording: WaveClip | None = None


def row_frequency(cy: float, image_h: int, stft: StftConfig) -> float:
    """Tone frequency whose Mel band maps onto image row ``cy`` after resizing."""
    mel = mel_points(stft)
    step = mel[1] - mel[0]
    src = cy * stft.mel_bins / image_h - 0.5  # fractional Mel-bin index
    return float(mel_to_hz(mel[1] + src * step))


def mic_positions(cfg: SceneConfig) -> np.ndarray:
    return (np.arange(cfg.n_mics) + 0.5) * cfg.image_hw[1] / cfg.n_mics


def mic_gains(x: float | np.ndarray, cfg: SceneConfig) -> np.ndarray:
    """(n_mics, ...) linear gains for sources at horizontal position ``x``."""
    sigma = cfg.mic_sigma * cfg.image_hw[1]
    d = np.asarray(x, dtype=np.float64)[None, ...] - mic_positions(cfg).reshape((-1,) + (1,) * np.ndim(x))
    return np.exp(-0.5 * (d / sigma) ** 2)


def _place_objects(cfg: SceneConfig, rng: np.random.Generator, duration: float) -> list[SceneObject]:
    h, w = cfg.image_hw
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    lo, hi = cfg.row_range[0] * h, cfg.row_range[1] * h
    gap = cfg.min_row_gap * h
    rows: list[float] = []
    for _ in range(200):
        if len(rows) == n:
            break
        cy = float(rng.uniform(lo, hi))
        if all(abs(cy - r) >= gap for r in rows):
            rows.append(cy)
    objects = []
    for k, cy in enumerate(rows):
        depth = (cy - lo) / max(hi - lo, 1e-9)
        width = w * (cfg.width_range[0] + depth * (cfg.width_range[1] - cfg.width_range[0]))
        width *= float(rng.uniform(0.9, 1.1))
        height = cfg.aspect * width
        vx = 0.0 if cfg.static else float(rng.uniform(-cfg.max_speed, cfg.max_speed))
        travel = vx * duration
        x_lo = width / 2 - min(0.0, travel)
        x_hi = w - width / 2 - max(0.0, travel)
        if x_hi < x_lo:
            vx, x_lo, x_hi = 0.0, width / 2, w - width / 2
        x0 = float(rng.uniform(x_lo, x_hi))
        freq = row_frequency(cy, h, cfg.stft)
        objects.append(SceneObject(k, x0, vx, cy, width, height, freq, float(rng.uniform(0, 2 * np.pi))))
    return objects


def _synth_audio(objects: Sequence[SceneObject], cfg: SceneConfig, rng: np.random.Generator) -> WaveClip:
    sr = cfg.stft.sample_rate
    duration = 1.0 + (cfg.frames - 1) * cfg.frame_interval
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    mics = mic_positions(cfg)
    out = np.zeros((cfg.n_mics, n))
    for obj in objects:
        # recording time 0.5 s is frame 0
        x = obj.center_x(t - 0.5)
        gains = mic_gains(x, cfg)
        delays = np.abs(x[None, :] - mics[:, None]) * cfg.delay_per_px
        out += cfg.amplitude * gains * np.sin(2 * np.pi * obj.frequency * (t[None, :] - delays) + obj.phase)
    noise_std = cfg.amplitude * 10.0 ** (-cfg.snr_db / 20.0)
    out += rng.normal(0.0, noise_std, size=out.shape)
    return WaveClip(out, sr, 0)


def teacher_detections(
    oracle: TeacherOracle,
    frame_id: int,
    gt_boxes: Sequence[Box],
    condition: str,
    image_hw: tuple[int, int],
    rng: np.random.Generator,
) -> DetectionSet:
    h, w = image_hw
    boxes = []
    p_drop = oracle.dropout(condition)
    for gt in gt_boxes:
        # draw every variate so dropout does not shift later draws
        drop = rng.random() < p_drop
        dx, dy = rng.normal(0.0, oracle.center_jitter, size=2)
        sw, sh = 1.0 + rng.normal(0.0, oracle.size_jitter, size=2)
        score = float(rng.uniform(*oracle.score_range))
        if drop:
            continue
        cx, cy = gt.center
        bw = (gt.x_max - gt.x_min) * max(sw, 0.5)
        bh = (gt.y_max - gt.y_min) * max(sh, 0.5)
        box = Box(cx + dx - bw / 2, cy + dy - bh / 2, cx + dx + bw / 2, cy + dy + bh / 2, score, 0).clipped(w, h)
        if box is not None:
            boxes.append(box)
    return DetectionSet(frame_id, oracle.modality, boxes)


def teacher_activations(
    oracle: TeacherOracle, detections: DetectionSet, image_hw: tuple[int, int]
) -> dict[str, ActivationTensor]:
    """Gaussian bumps at detected box centres on each pyramid grid, scaled by score."""
    h, w = image_hw
    out = {}
    chan = (np.arange(oracle.channels) + 1.0) / oracle.channels
    for level in LEVELS:
        s = level.stride
        gh, gw = h // s, w // s
        yy = (np.arange(gh) + 0.5)[:, None]
        xx = (np.arange(gw) + 0.5)[None, :]
        m = np.full((gh, gw), oracle.background)
        for b in detections.boxes:
            cx, cy = b.center
            sx = max(0.5, oracle.bump_scale * (b.x_max - b.x_min) / s)
            sy = max(0.5, oracle.bump_scale * (b.y_max - b.y_min) / s)
            m = m + b.score * np.exp(-0.5 * ((xx - cx / s) / sx) ** 2 - 0.5 * ((yy - cy / s) / sy) ** 2)
        out[level.name] = ActivationTensor(level, Tensor(chan[:, None, None] * m[None]))
    return out


def generate_scene(cfg: SceneConfig) -> Scene:
    root = np.random.SeedSequence(cfg.seed)
    s_layout, s_audio, s_teach = root.spawn(3)
    rng = np.random.default_rng(s_layout)
    condition = cfg.condition or ("night" if rng.random() < cfg.night_probability else "day")
    duration = (cfg.frames - 1) * cfg.frame_interval
    objects = _place_objects(cfg, rng, duration)
    recording = _synth_audio(objects, cfg, np.random.default_rng(s_audio))
    teach_rngs = {o.modality: np.random.default_rng(s) for o, s in zip(cfg.teachers, s_teach.spawn(len(cfg.teachers)))}
    scene = Scene(cfg.seed, condition, objects, cfg.image_hw, recording=recording)
    for k in range(cfg.frames):
        t = k * cfg.frame_interval
        gt_boxes = [o.box(t) for o in objects]
        gt = DetectionSet(k, "groundtruth", gt_boxes)
        teachers, acts = {}, {}
        for oracle in cfg.teachers:
            det = teacher_detections(oracle, k, gt_boxes, condition, cfg.image_hw, teach_rngs[oracle.modality])
            teachers[oracle.modality] = det
            acts[oracle.modality] = teacher_activations(oracle, det, cfg.image_hw)
        ts = int(round((0.5 + t) * NS_PER_S))
        clip = extract_clip(recording, ts)
        scene.frames.append(Frame(k, ts, gt, [o.obj_id for o in objects], teachers, acts, clip))
    return scene


def scene_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_dataset(n_scenes: int, cfg: SceneConfig = SceneConfig()) -> list[Scene]:
    """``n_scenes`` independent scenes, each seeded from ``cfg.seed`` and its index."""
    return [generate_scene(replace(cfg, seed=scene_seed(cfg.seed, i))) for i in range(n_scenes)]
