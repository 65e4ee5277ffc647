"""Detection (AP, centre distance) and CLEAR-MOT tracking metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .geometry import Box, DetectionSet, iou, iou_matrix, priority_order

RECALL_POINTS = np.linspace(0.0, 1.0, 101)
COCO_THRESHOLDS = np.linspace(0.5, 0.95, 10)


@dataclass
class EvalReport:
    map_avg: float
    map_50: float
    map_75: float
    cdx: float | None
    cdy: float | None
    mota: float | None = None
    id_switches: int = 0
    fragments: int = 0
    fp: int = 0
    fn: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        def fmt(v):
            if v is None:
                return "n/a"
            return f"{v:.4f}" if isinstance(v, float) else str(v)

        rows = [(k, fmt(v)) for k, v in asdict(self).items()]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def _by_frame(sets: Iterable[DetectionSet]) -> dict[int, DetectionSet]:
    out = {}
    for s in sets:
        if s.frame_id in out:
            raise ValueError(f"duplicate frame {s.frame_id}")
        out[s.frame_id] = s
    return out


def _align(preds, gts) -> tuple[dict, dict]:
    p, g = _by_frame(preds), _by_frame(gts)
    if set(p) != set(g):
        raise ValueError(f"prediction frames {sorted(set(p) ^ set(g))} do not match groundtruth")
    return p, g


def ranked_predictions(preds: Mapping[int, DetectionSet]) -> list[tuple[int, Box]]:
    """All predictions by descending score; ties by frame then in-frame priority."""
    items = []
    for fid in sorted(preds):
        boxes = preds[fid].boxes
        for rank, i in enumerate(priority_order(boxes)):
            items.append((-boxes[i].score, fid, rank, boxes[i]))
    items.sort(key=lambda t: t[:3])
    return [(fid, box) for _, fid, _, box in items]


def greedy_match(ranked: Sequence[tuple[int, Box]], gts: Mapping[int, DetectionSet], iou_threshold: float) -> list[int]:
    """For each ranked prediction, the matched gt index in its frame or -1.

    Each prediction takes the unmatched gt of highest IoU at or above the
    threshold (lowest index on ties).
    """
    used = {fid: np.zeros(len(s.boxes), dtype=bool) for fid, s in gts.items()}
    arrays = {fid: s.to_array() for fid, s in gts.items()}
    out = []
    for fid, box in ranked:
        gt = arrays[fid]
        if len(gt) == 0:
            out.append(-1)
            continue
        ious = iou_matrix(np.array([box.coords]), gt)[0]
        ious[used[fid]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold:
            used[fid][j] = True
            out.append(j)
        else:
            out.append(-1)
    return out


def interpolated_ap(tp_flags: np.ndarray, n_gt: int) -> float:
    """101-point interpolated area under the precision/recall curve."""
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    precision = tp / np.arange(1, len(tp) + 1)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    # fsum is correctly rounded, so the result does not depend on summation order
    return math.fsum(interp) / len(RECALL_POINTS)


def average_precision(preds: Sequence[DetectionSet], gts: Sequence[DetectionSet], iou_threshold: float = 0.5) -> float:
    p, g = _align(preds, gts)
    n_gt = sum(len(s.boxes) for s in g.values())
    if n_gt == 0:
        raise ValueError("no groundtruth boxes: recall undefined")
    ranked = ranked_predictions(p)
    matches = greedy_match(ranked, g, iou_threshold)
    return interpolated_ap(np.array([m >= 0 for m in matches], dtype=float), n_gt)


def pr_curve(preds, gts, iou_threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(scores, precision, recall) at every rank cut-off."""
    p, g = _align(preds, gts)
    n_gt = max(1, sum(len(s.boxes) for s in g.values()))
    ranked = ranked_predictions(p)
    tp = np.cumsum([m >= 0 for m in greedy_match(ranked, g, iou_threshold)])
    k = np.arange(1, len(ranked) + 1)
    scores = np.array([b.score for _, b in ranked])
    return scores, tp / np.maximum(k, 1), tp / n_gt


def map_suite(preds, gts) -> tuple[float, float, float]:
    aps = {float(t): average_precision(preds, gts, float(t)) for t in COCO_THRESHOLDS}
    return math.fsum(aps.values()) / len(aps), aps[0.5], aps[float(COCO_THRESHOLDS[5])]


def center_distance(preds, gts, iou_threshold: float = 0.5) -> tuple[float | None, float | None]:
    """Mean |Δx| and |Δy| of box centres over IoU-matched pairs; (None, None) if none match."""
    p, g = _align(preds, gts)
    ranked = ranked_predictions(p)
    matches = greedy_match(ranked, g, iou_threshold)
    dx, dy = [], []
    for (fid, box), j in zip(ranked, matches):
        if j < 0:
            continue
        (px, py), (gx, gy) = box.center, g[fid].boxes[j].center
        dx.append(abs(px - gx))
        dy.append(abs(py - gy))
    if not dx:
        return None, None
    return float(np.mean(dx)), float(np.mean(dy))


# -- tracking -------------------------------------------------------------


class TrackRecord(NamedTuple):
    frame: int
    track_id: int
    box: Box


@dataclass
class MotResult:
    mota: float
    id_switches: int
    fragments: int
    fp: int
    fn: int
    matches: int
    n_gt: int


def _frames(records: Iterable[TrackRecord]) -> dict[int, list[TrackRecord]]:
    out: dict[int, list[TrackRecord]] = {}
    for r in records:
        out.setdefault(r.frame, []).append(r)
    return out


def mot_metrics(tracks: Iterable[TrackRecord], gt_tracks: Iterable[TrackRecord], iou_threshold: float = 0.5) -> MotResult:
    """CLEAR-MOT counts with correspondence carry-over between frames."""
    hyp = _frames(tracks)
    gt = _frames(gt_tracks)
    n_gt = sum(len(v) for v in gt.values())
    if n_gt == 0:
        raise ValueError("empty groundtruth")
    frames = sorted(set(gt) | set(hyp))
    last_hyp: dict[int, int] = {}  # gt id -> hyp id of its latest match
    prev: dict[int, int] = {}  # correspondences of the previous frame
    status: dict[int, list[bool]] = {}
    fp = fn = idsw = n_match = 0
    for f in frames:
        g_recs = sorted(gt.get(f, []), key=lambda r: r.track_id)
        h_recs = sorted(hyp.get(f, []), key=lambda r: r.track_id)
        g_idx = {r.track_id: r for r in g_recs}
        h_idx = {r.track_id: r for r in h_recs}
        matched: dict[int, int] = {}
        used_h: set[int] = set()
        for o, h in sorted(prev.items()):
            if o in g_idx and h in h_idx and iou(g_idx[o].box, h_idx[h].box) >= iou_threshold:
                matched[o] = h
                used_h.add(h)
        pairs = []
        for o in g_idx:
            if o in matched:
                continue
            for h in h_idx:
                if h in used_h:
                    continue
                v = iou(g_idx[o].box, h_idx[h].box)
                if v >= iou_threshold:
                    pairs.append((-v, o, h))
        for _, o, h in sorted(pairs):
            if o in matched or h in used_h:
                continue
            matched[o] = h
            used_h.add(h)
            if o in last_hyp and last_hyp[o] != h:
                idsw += 1
        for o in g_idx:
            status.setdefault(o, []).append(o in matched)
        for o, h in matched.items():
            last_hyp[o] = h
        fn += len(g_idx) - len(matched)
        fp += len(h_idx) - len(used_h)
        n_match += len(matched)
        prev = matched
    frag = 0
    for seq in status.values():
        hits = [i for i, s in enumerate(seq) if s]
        if not hits:
            continue
        span = seq[hits[0] : hits[-1] + 1]
        frag += sum(1 for a, b in zip(span, span[1:]) if a and not b)
    mota = 1.0 - (fn + fp + idsw) / n_gt
    return MotResult(mota, idsw, frag, fp, fn, n_match, n_gt)


def evaluate_detections(preds: Sequence[DetectionSet], gts: Sequence[DetectionSet]) -> EvalReport:
    m_avg, m50, m75 = map_suite(preds, gts)
    cdx, cdy = center_distance(preds, gts)
    return EvalReport(m_avg, m50, m75, cdx, cdy)


def finite_or_none(v: float | None) -> float | None:
    return None if v is None or not math.isfinite(v) else v
