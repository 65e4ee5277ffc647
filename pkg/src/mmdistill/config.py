"""Flat ``key = value`` run configuration with presets and typed overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Mapping

from .audio import StftConfig, mic_subset
from .losses import LossConfig
from .student import StudentConfig
from .synth import MODALITIES, SceneConfig
from .tracker import TrackerConfig
from .training import OptimConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    # data
    n_scenes: int = 512
    frames: int = 1
    image_size: int = 96
    min_objects: int = 1
    max_objects: int = 3
    condition: str = "mixed"  # day | night | mixed
    night_probability: float = 0.5
    snr_db: float = 30.0
    teachers: str = "rgb,depth,thermal"
    n_mics: int = 8
    split: str = "0.6,0.2,0.2"
    # model
    widths: str = "16,16,24,32,48"
    pretext_classes: int = 5
    # loss
    alpha: float = 0.25
    gamma: float = 2.0
    r: float = 2.0
    temperature: float = 9.0
    beta: float = 0.5
    delta: float = 1.0
    omega: float = 0.05
    power_first: bool = False
    # optimisation
    learning_rate: float = 2e-3
    weight_decay: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epochs: int = 30
    batch_size: int = 8
    scheduler_factor: float = 0.1
    scheduler_patience: int = 3
    pretext_epochs: int = 10
    pretext_init: bool = False
    # evaluation
    score_threshold: float = 0.05
    tracker_iou: float = 0.5
    tracker_init_score: float = 0.8
    # sweep grid: comma lists; teacher subsets separated by ';'
    sweep_r: str = "2"
    sweep_temperature: str = "9"
    sweep_teachers: str = "rgb,depth,thermal"
    sweep_mics: str = "8"
    sweep_seeds: str = "0"
    workers: int = 1

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.condition not in ("day", "night", "mixed"):
            raise ConfigError("condition must be day, night or mixed")
        for subset in [self.teachers, *self.sweep_teachers.split(";")]:
            parse_modalities(subset)
        if len(self.split_fractions) != 3:
            raise ConfigError("split needs three fractions")

    @property
    def modalities(self) -> tuple[str, ...]:
        return parse_modalities(self.teachers)

    @property
    def mics(self) -> list[int]:
        return mic_subset(self.n_mics, 8)

    @property
    def split_fractions(self) -> tuple[float, ...]:
        return tuple(float(v) for v in self.split.split(","))

    def scene_config(self) -> SceneConfig:
        return SceneConfig(
            seed=self.seed,
            frames=self.frames,
            image_hw=(self.image_size, self.image_size),
            min_objects=self.min_objects,
            max_objects=self.max_objects,
            condition=None if self.condition == "mixed" else self.condition,
            night_probability=self.night_probability,
            snr_db=self.snr_db,
        )

    def stft_config(self) -> StftConfig:
        return StftConfig()

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha=self.alpha, gamma=self.gamma, r=self.r, temperature=self.temperature,
            beta=self.beta, delta=self.delta, omega=self.omega, power_first=self.power_first,
        )

    def student_config(self) -> StudentConfig:
        return StudentConfig(
            input_channels=self.n_mics,
            input_hw=(self.image_size, self.image_size),
            widths=tuple(int(v) for v in self.widths.split(",")),
            pretext_classes=self.pretext_classes,
        )

    def optim_config(self, epochs: int | None = None) -> OptimConfig:
        return OptimConfig(
            learning_rate=self.learning_rate, weight_decay=self.weight_decay, beta1=self.adam_beta1,
            beta2=self.adam_beta2, epochs=self.epochs if epochs is None else epochs, batch_size=self.batch_size,
            scheduler_factor=self.scheduler_factor, scheduler_patience=self.scheduler_patience, seed=self.seed,
        )

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(self.tracker_iou, self.tracker_init_score)

    def dump(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())


# Full-scale values; not reachable on a desk machine but kept selectable.
PRESETS: dict[str, dict[str, object]] = {
    "desk": {},
    "paper": {"learning_rate": 1e-5, "epochs": 50, "image_size": 768},
}

_FIELDS = {f.name: f for f in fields(RunConfig)}
_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_modalities(text: str) -> tuple[str, ...]:
    mods = tuple(m.strip() for m in text.split(",") if m.strip())
    if not mods or any(m not in MODALITIES for m in mods):
        raise ConfigError(f"teacher subset {text!r} must list modalities from {MODALITIES}")
    return mods


def _format(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(key: str, raw: object):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[_FIELDS[key].type]
    if not isinstance(raw, str):
        return kind(raw)
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from exc


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, object] | None = None) -> RunConfig:
    """File values, then overrides; a ``preset`` supplies defaults beneath both."""
    raw: dict[str, object] = {}
    if path is not None:
        raw.update(parse_text(Path(path).read_text()))
    raw.update(overrides or {})
    values = {k: _coerce(k, v) for k, v in raw.items()}
    preset = values.get("preset", RunConfig.preset)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    return replace(RunConfig(), **{**PRESETS[preset], **values})


def config_keys() -> list[str]:
    return list(_FIELDS)
