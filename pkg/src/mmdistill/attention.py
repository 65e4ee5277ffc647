"""Channel-collapsed attention maps and the multi-teacher product."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import Graph, Node
from .tensor import Tensor, as_array

log = logging.getLogger(__name__)

NORM_GUARD = 1e-12


class PyramidLevel(enum.Enum):
    P3 = 8
    P4 = 16
    P5 = 32

    @property
    def stride(self) -> int:
        return self.value


LEVELS = (PyramidLevel.P3, PyramidLevel.P4, PyramidLevel.P5)


@dataclass(frozen=True)
class ActivationTensor:
    level: PyramidLevel
    values: Tensor  # C×H×W

    def __post_init__(self):
        if len(self.values.shape) != 3:
            raise ValueError(f"activations must be C×H×W, got {self.values.shape}")


@dataclass(frozen=True)
class AttentionMap:
    level: PyramidLevel
    values: Tensor  # H×W, nonnegative

    def __post_init__(self):
        if np.any(self.values.data < 0):
            raise ValueError("attention maps are nonnegative")


def attention_node(g: Graph, acts: Node, r: float, power_first: bool = False) -> Node:
    """(mean_c |A|)^r, or mean_c |A|^r when ``power_first``."""
    if not r > 0:
        raise ValueError(f"exponent r must be positive, got {r}")
    mag = g.abs(acts)
    if power_first:
        return g.channel_mean(g.pow(mag, r))
    return g.pow(g.channel_mean(mag), r)


def l2_normalize_node(g: Graph, q: Node) -> Node:
    return g.mul(q, g.pow(g.l2_norm(q, floor=NORM_GUARD), -1.0))


def attention_map(a: ActivationTensor, r: float, power_first: bool = False) -> AttentionMap:
    if not r > 0:
        raise ValueError(f"exponent r must be positive, got {r}")
    g = Graph()
    x = g.input("a", a.values.shape)
    g.output("q", attention_node(g, x, r, power_first))
    return AttentionMap(a.level, g.forward({"a": a.values})["q"])


def teacher_product(maps: Sequence[AttentionMap]) -> AttentionMap:
    if not maps:
        raise ValueError("teacher_product needs at least one map")
    level, shape = maps[0].level, maps[0].values.shape
    out = np.ones(shape)
    for m in maps:
        if m.level != level or m.values.shape != shape:
            raise ValueError(f"map mismatch: {m.level}/{m.values.shape} vs {level}/{shape}")
        out = out * m.values.data
    return AttentionMap(level, Tensor(out))


def l2_normalize(q: AttentionMap) -> AttentionMap:
    arr = q.values.data
    norm = float(np.sqrt(np.sum(arr * arr)))
    return AttentionMap(q.level, Tensor(arr / max(norm, NORM_GUARD)))


def teacher_target(
    teacher_acts: Sequence[ActivationTensor | None], r: float, power_first: bool = False
) -> AttentionMap:
    """Normalized product of the available teachers' maps at one level.

    ``None`` entries (teacher missing this frame) contribute no factor.
    """
    present = [a for a in teacher_acts if a is not None]
    if len(present) < len(teacher_acts):
        log.warning("%d teacher(s) missing activations; treated as identity", len(teacher_acts) - len(present))
    if not present:
        raise ValueError("no teacher activations available")
    return l2_normalize(teacher_product([attention_map(a, r, power_first) for a in present]))


def write_pgm(path: str | Path, q: AttentionMap | Tensor | np.ndarray) -> None:
    """Dump a map as 8-bit binary PGM, scaled so the maximum is 255."""
    arr = as_array(q.values if isinstance(q, AttentionMap) else q)
    top = arr.max() if arr.size else 0.0
    img = np.zeros(arr.shape, dtype=np.uint8) if top <= 0 else np.round(255 * arr / top).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
