"""IoU tracklet tracker: greedy association between consecutive frames."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .geometry import Box, DetectionSet, iou
from .metrics import TrackRecord


@dataclass(frozen=True)
class TrackerConfig:
    iou_threshold: float = 0.5
    init_score: float = 0.8

    def __post_init__(self):
        for v in (self.iou_threshold, self.init_score):
            if not 0.0 < v <= 1.0:
                raise ValueError("tracker thresholds must lie in (0, 1]")


@dataclass(frozen=True)
class Tracklet:
    id: int
    active: bool = True
    history: tuple[tuple[int, Box], ...] = field(default_factory=tuple)

    @property
    def state(self) -> str:
        return "active" if self.active else "inactive"

    @property
    def last_box(self) -> Box:
        return self.history[-1][1]

    @property
    def last_frame(self) -> int:
        return self.history[-1][0]

    def __len__(self):
        return len(self.history)


class TrackingError(ValueError):
    pass


def step(tracklets: Sequence[Tracklet], detections: DetectionSet, cfg: TrackerConfig = TrackerConfig()) -> list[Tracklet]:
    """Advance all tracklets by one frame.

    Pairs of (active tracklet, detection) are taken in descending IoU, each
    side at most once, ignoring pairs below the threshold. Unmatched active
    tracklets go inactive for good; unmatched detections scoring above
    ``init_score`` open new tracklets.
    """
    frame = detections.frame_id
    if any(t.history and t.last_frame >= frame for t in tracklets):
        raise TrackingError(f"frame {frame} is not after the tracked history")
    active = [t for t in tracklets if t.active]
    pairs = []
    for t in active:
        for j, d in enumerate(detections.boxes):
            v = iou(t.last_box, d)
            if v >= cfg.iou_threshold:
                pairs.append((-v, t.id, j))
    pairs.sort()
    taken_t: dict[int, int] = {}
    taken_d: set[int] = set()
    for _, tid, j in pairs:
        if tid in taken_t or j in taken_d:
            continue
        taken_t[tid] = j
        taken_d.add(j)
    out = []
    for t in tracklets:
        if not t.active:
            out.append(t)
        elif t.id in taken_t:
            out.append(replace(t, history=t.history + ((frame, detections.boxes[taken_t[t.id]]),)))
        else:
            out.append(replace(t, active=False))
    next_id = max((t.id for t in tracklets), default=-1) + 1
    for j, d in enumerate(detections.boxes):
        if j not in taken_d and d.score > cfg.init_score:
            out.append(Tracklet(next_id, True, ((frame, d),)))
            next_id += 1
    return out


def run(sequence: Sequence[DetectionSet], cfg: TrackerConfig = TrackerConfig()) -> list[Tracklet]:
    frames = [s.frame_id for s in sequence]
    if any(b <= a for a, b in zip(frames, frames[1:])):
        raise TrackingError("frames must be strictly increasing")
    state: list[Tracklet] = []
    for dets in sequence:
        state = step(state, dets, cfg)
    return state


def to_records(tracklets: Iterable[Tracklet]) -> list[TrackRecord]:
    recs = [TrackRecord(f, t.id, b) for t in tracklets for f, b in t.history]
    return sorted(recs, key=lambda r: (r.frame, r.track_id))


def write_tracks(path: str | Path, records: Iterable[TrackRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"frame": r.frame, "track_id": r.track_id, "box": r.box.to_list()}) + "\n")


def read_tracks(path: str | Path) -> list[TrackRecord]:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return [TrackRecord(int(r["frame"]), int(r["track_id"]), Box.from_list(r["box"])) for r in rows]
