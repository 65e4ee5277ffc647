"""Boxes, overlap, suppression, anchors and target assignment."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SOURCES = ("rgb", "depth", "thermal", "audio", "fused", "groundtruth")
LEVEL_NAMES = ("P3", "P4", "P5")

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise BoxError(f"degenerate box {self.coords}")
        if not 0.0 <= self.score <= 1.0:
            raise BoxError(f"score {self.score} outside [0, 1]")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    def clipped(self, width: float, height: float) -> "Box | None":
        x0, y0 = max(self.x_min, 0.0), max(self.y_min, 0.0)
        x1, y1 = min(self.x_max, width), min(self.y_max, height)
        if x0 >= x1 or y0 >= y1:
            return None
        return Box(x0, y0, x1, y1, self.score, self.class_id)

    def to_list(self) -> list:
        return [self.x_min, self.y_min, self.x_max, self.y_max, self.score, self.class_id]

    @classmethod
    def from_list(cls, row: Sequence) -> "Box":
        x0, y0, x1, y1 = (float(v) for v in row[:4])
        score = float(row[4]) if len(row) > 4 else 1.0
        cls_id = int(row[5]) if len(row) > 5 else 0
        return cls(x0, y0, x1, y1, score, cls_id)


@dataclass
class DetectionSet:
    frame_id: int
    source: str
    boxes: list[Box] = field(default_factory=list)

    def __post_init__(self):
        if self.frame_id < 0:
            raise BoxError(f"negative frame id {self.frame_id}")
        if self.source not in SOURCES:
            raise BoxError(f"unknown source {self.source!r}")

    def __len__(self):
        return len(self.boxes)

    def to_array(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 4))
        return np.array([b.coords for b in self.boxes], dtype=np.float64)

    def scores(self) -> np.ndarray:
        return np.array([b.score for b in self.boxes], dtype=np.float64)

    def to_json(self) -> dict:
        return {"frame": self.frame_id, "source": self.source, "boxes": [b.to_list() for b in self.boxes]}

    @classmethod
    def from_json(cls, obj: dict) -> "DetectionSet":
        return cls(int(obj["frame"]), obj["source"], [Box.from_list(r) for r in obj["boxes"]])


def write_detections(path: str | Path, sets: Iterable[DetectionSet]) -> None:
    with open(path, "w") as fh:
        for s in sets:
            fh.write(json.dumps(s.to_json()) + "\n")


def read_detections(path: str | Path) -> list[DetectionSet]:
    with open(path) as fh:
        return [DetectionSet.from_json(json.loads(line)) for line in fh if line.strip()]


# -- overlap --------------------------------------------------------------


def iou(a: Box, b: Box) -> float:
    for box in (a, b):
        if not (box.x_min < box.x_max and box.y_min < box.y_max):
            raise BoxError(f"degenerate box {box.coords}")
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) coordinate arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def priority_order(boxes: Sequence[Box]) -> list[int]:
    """Indices by descending score, then larger area, then lower x_min."""
    return sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, -boxes[i].area, boxes[i].x_min, i))


def nms(boxes: Sequence[Box], iou_threshold: float = 0.5) -> list[Box]:
    """Greedy suppression; a box is dropped if IoU with a kept box exceeds the threshold."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if not boxes:
        return []
    order = priority_order(boxes)
    coords = np.array([boxes[i].coords for i in order])
    ious = iou_matrix(coords, coords)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for k in range(len(order)):
        if not alive[k]:
            continue
        keep.append(boxes[order[k]])
        alive[k + 1 :] &= ious[k, k + 1 :] <= iou_threshold
    return keep


def fuse_teachers(sets: Sequence[DetectionSet], iou_threshold: float = 0.5) -> DetectionSet:
    if not sets:
        raise ValueError("need at least one teacher detection set")
    frames = {s.frame_id for s in sets}
    if len(frames) != 1:
        raise ValueError(f"teacher sets disagree on frame id: {sorted(frames)}")
    pooled = [b for s in sets for b in s.boxes]
    return DetectionSet(sets[0].frame_id, "fused", nms(pooled, iou_threshold))


# -- anchors --------------------------------------------------------------


@dataclass(frozen=True)
class AnchorConfig:
    aspect_ratios: tuple[tuple[float, float], ...] = ((1.0, 1.0), (1.4, 0.7), (0.7, 1.4))
    scale_multipliers: tuple[float, ...] = (2.0**0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))
    strides: tuple[int, ...] = (8, 16, 32)
    anchor_scale: float = 2.0  # base size = anchor_scale * stride
    positive_iou: float = 0.5
    negative_iou: float = 0.4

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError("strides must be strictly increasing")
        if not self.negative_iou <= self.positive_iou:
            raise ValueError("negative_iou must not exceed positive_iou")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.aspect_ratios) * len(self.scale_multipliers)

    @property
    def base_sizes(self) -> tuple[float, ...]:
        return tuple(self.anchor_scale * s for s in self.strides)


def cell_anchors(base: float, cfg: AnchorConfig) -> np.ndarray:
    """(A, 2) widths and heights, ordered ratio-major then scale."""
    sizes = [(base * m * rx, base * m * ry) for rx, ry in cfg.aspect_ratios for m in cfg.scale_multipliers]
    return np.array(sizes, dtype=np.float64)


def generate_anchors(cfg: AnchorConfig, image_size: tuple[int, int]) -> dict[str, np.ndarray]:
    """Per-level (A*H*W, 4) anchors in (anchor, row, column) order.

    This order matches the flattened layout of an A×H×W head output.
    """
    height, width = image_size
    top = max(cfg.strides)
    if height % top or width % top:
        raise ValueError(f"image size {image_size} not divisible by stride {top}")
    out = {}
    for name, stride, base in zip(LEVEL_NAMES, cfg.strides, cfg.base_sizes):
        gh, gw = height // stride, width // stride
        cy = (np.arange(gh) + 0.5) * stride
        cx = (np.arange(gw) + 0.5) * stride
        wh = cell_anchors(base, cfg)
        cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
        a = np.empty((len(wh), gh, gw, 4))
        a[..., 0] = cxx - wh[:, None, None, 0] / 2
        a[..., 1] = cyy - wh[:, None, None, 1] / 2
        a[..., 2] = cxx + wh[:, None, None, 0] / 2
        a[..., 3] = cyy + wh[:, None, None, 1] / 2
        out[name] = a.reshape(-1, 4)
    return out


def assign_targets(
    anchors: np.ndarray, groundtruth: DetectionSet | np.ndarray, cfg: AnchorConfig = AnchorConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Label anchors POSITIVE / NEGATIVE / IGNORE.

    Returns ``(labels, matched)`` where ``matched[i]`` indexes the groundtruth
    box of a positive anchor (-1 otherwise).
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if len(anchors) == 0:
        raise ValueError("no anchors")
    gt = groundtruth.to_array() if isinstance(groundtruth, DetectionSet) else np.asarray(groundtruth).reshape(-1, 4)
    labels = np.full(len(anchors), NEGATIVE, dtype=np.int8)
    matched = np.full(len(anchors), -1, dtype=np.int64)
    if len(gt) == 0:
        return labels, matched
    ious = iou_matrix(anchors, gt)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(anchors)), best]
    labels[best_iou >= cfg.positive_iou] = POSITIVE
    labels[(best_iou >= cfg.negative_iou) & (best_iou < cfg.positive_iou)] = IGNORE
    matched[labels == POSITIVE] = best[labels == POSITIVE]
    for j in range(len(gt)):
        i = int(ious[:, j].argmax())
        if ious[i, j] > 0:
            labels[i] = POSITIVE
            matched[i] = j
    return labels, matched


# -- box coding -----------------------------------------------------------

MAX_LOG_SIZE = math.log(1000.0 / 16.0)


def encode(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """(dx, dy, dw, dh) of boxes relative to anchors."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + bw / 2
    by = boxes[:, 1] + bh / 2
    return np.stack([(bx - ax) / aw, (by - ay) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1)


def decode(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(np.clip(deltas[:, 2], -MAX_LOG_SIZE, MAX_LOG_SIZE))
    h = ah * np.exp(np.clip(deltas[:, 3], -MAX_LOG_SIZE, MAX_LOG_SIZE))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
