"""Desk-scale audio student: strided-conv backbone, anchor heads, count head.

The backbone has five stride-2 stages with swish activations; stages 3-5
expose the P3/P4/P5 features used both by the heads and by the alignment
loss. Two fixed coordinate planes are appended to the spectrogram channels
so that position along the input can be read by local filters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping

import numpy as np

from .attention import LEVELS, ActivationTensor
from .autograd import Graph, Node
from .geometry import AnchorConfig, Box, DetectionSet, decode, generate_anchors, nms
from .losses import LossConfig, focal_node, mta_node, smooth_l1_node, total_node
from .tensor import Tensor

PRIOR_PROB = 0.01
LEVEL_STAGE = {"P3": "s3b", "P4": "s4", "P5": "s5"}


@dataclass(frozen=True)
class StudentConfig:
    input_channels: int = 8
    input_hw: tuple[int, int] = (96, 96)
    widths: tuple[int, ...] = (16, 16, 24, 32, 48)
    coord_channels: bool = True
    anchors: AnchorConfig = AnchorConfig()
    pretext_classes: int = 5  # counts 0..K with K = pretext_classes - 1
    pretext_hidden: int = 32
    head_init_std: float = 0.0  # head conv weights; biases carry the prior

    def __post_init__(self):
        if not 1 <= self.input_channels <= 8:
            raise ValueError("input_channels must be 1..8")
        if self.input_hw[0] % 32 or self.input_hw[1] % 32:
            raise ValueError(f"input size {self.input_hw} must be divisible by 32")
        if len(self.widths) != 5 or min(self.widths) < 1:
            raise ValueError("need five positive stage widths")

    @property
    def level_channels(self) -> dict[str, int]:
        return {"P3": self.widths[2], "P4": self.widths[3], "P5": self.widths[4]}


@dataclass
class StudentOutputs:
    features: dict[str, ActivationTensor]
    class_logits: dict[str, np.ndarray]  # (A*H*W,) in anchor order
    box_deltas: dict[str, np.ndarray]  # (A*H*W, 4) in anchor order

    def probabilities(self) -> dict[str, np.ndarray]:
        return {k: 1.0 / (1.0 + np.exp(-v)) for k, v in self.class_logits.items()}


def _backbone_specs(cfg: StudentConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_ch, out_ch, stride) per conv layer."""
    c_in = cfg.input_channels + (2 if cfg.coord_channels else 0)
    w = cfg.widths
    return [
        ("stem", c_in, w[0], 2),
        ("s2", w[0], w[1], 2),
        ("s3", w[1], w[2], 2),
        ("s3b", w[2], w[2], 1),
        ("s4", w[2], w[3], 2),
        ("s5", w[3], w[4], 2),
    ]


def coord_planes(hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    xs = np.broadcast_to(np.linspace(-1.0, 1.0, w)[None, :], (h, w))
    ys = np.broadcast_to(np.linspace(-1.0, 1.0, h)[:, None], (h, w))
    return np.stack([xs, ys])


class Student:
    def __init__(self, cfg: StudentConfig = StudentConfig(), loss_cfg: LossConfig = LossConfig()):
        self.cfg = cfg
        self.loss_cfg = loss_cfg
        self.anchors = generate_anchors(cfg.anchors, cfg.input_hw)
        self.grid = {lv.name: (cfg.input_hw[0] // lv.stride, cfg.input_hw[1] // lv.stride) for lv in LEVELS}
        self.n_anchors = sum(len(a) for a in self.anchors.values())
        self.all_anchors = np.concatenate([self.anchors[lv.name] for lv in LEVELS])

    # -- parameters -----------------------------------------------------
    def backbone_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for name, cin, cout, _ in _backbone_specs(self.cfg):
            shapes[f"{name}.w"] = (cout, cin, 3, 3)
            shapes[f"{name}.b"] = (cout,)
        return shapes

    def head_shapes(self) -> dict[str, tuple[int, ...]]:
        a = self.cfg.anchors.anchors_per_cell
        shapes = {}
        for level, c in self.cfg.level_channels.items():
            shapes[f"head.{level}.cls.w"] = (a, c, 3, 3)
            shapes[f"head.{level}.cls.b"] = (a,)
            shapes[f"head.{level}.box.w"] = (4 * a, c, 3, 3)
            shapes[f"head.{level}.box.b"] = (4 * a,)
        return shapes

    def mlp_shapes(self) -> dict[str, tuple[int, ...]]:
        c5, hid, k = self.cfg.widths[4], self.cfg.pretext_hidden, self.cfg.pretext_classes
        return {"mlp.0.w": (c5, hid), "mlp.0.b": (hid,), "mlp.1.w": (hid, k), "mlp.1.b": (k,)}

    def _init_backbone(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for name, shape in self.backbone_shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                fan_in = shape[1] * shape[2] * shape[3]
                params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        return params

    def init_heads(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        bias = -math.log((1.0 - PRIOR_PROB) / PRIOR_PROB)
        for name, shape in self.head_shapes().items():
            if name.endswith(".b"):
                params[name] = np.full(shape, bias) if ".cls." in name else np.zeros(shape)
            else:
                params[name] = rng.normal(0.0, self.cfg.head_init_std, size=shape)
        return params

    def init_detect_params(self, seed: int = 0) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        return {**self._init_backbone(rng), **self.init_heads(rng)}

    def init_pretext_params(self, seed: int = 0) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params = self._init_backbone(rng)
        for name, shape in self.mlp_shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), size=shape)
        return params

    # -- graphs ---------------------------------------------------------
    def _backbone(self, g: Graph, x: Node) -> dict[str, Node]:
        h = x
        if self.cfg.coord_channels:
            h = g.concat([x, g.constant(coord_planes(self.cfg.input_hw), "coords")])
        feats = {}
        shapes = self.backbone_shapes()
        for name, _, _, stride in _backbone_specs(self.cfg):
            w = g.parameter(f"{name}.w", shapes[f"{name}.w"])
            b = g.parameter(f"{name}.b", shapes[f"{name}.b"])
            h = g.swish(g.conv2d(h, w, b, stride=stride), name=name)
            feats[name] = h
        return {level: feats[stage] for level, stage in LEVEL_STAGE.items()}

    def _heads(self, g: Graph, feats: Mapping[str, Node]) -> tuple[dict, dict]:
        shapes = self.head_shapes()
        logits, deltas = {}, {}
        for level in ("P3", "P4", "P5"):
            f = feats[level]
            pw = {k: g.parameter(k, shapes[k]) for k in shapes if k.startswith(f"head.{level}.")}
            cls = g.conv2d(f, pw[f"head.{level}.cls.w"], pw[f"head.{level}.cls.b"], stride=1)
            box = g.conv2d(f, pw[f"head.{level}.box.w"], pw[f"head.{level}.box.b"], stride=1)
            logits[level] = g.reshape(cls, (int(np.prod(cls.shape)),), name=f"logits.{level}")
            deltas[level] = g.reshape(box, (int(np.prod(box.shape)),), name=f"deltas.{level}")
        return logits, deltas

    def _detect_graph(self, with_loss: bool) -> Graph:
        g = Graph()
        x = g.input("x", (self.cfg.input_channels, *self.cfg.input_hw))
        feats = self._backbone(g, x)
        logits, deltas = self._heads(g, feats)
        for level in feats:
            g.output(f"feat.{level}", feats[level])
            g.output(f"logits.{level}", logits[level])
            g.output(f"deltas.{level}", deltas[level])
        if with_loss:
            lc = self.loss_cfg
            n = self.n_anchors
            all_logits = g.concat([logits[k] for k in ("P3", "P4", "P5")])
            prob = g.sigmoid(all_logits)
            is_pos = g.input("is_pos", (n,))
            keep = g.input("keep", (n,))
            norm = g.input("norm", ())
            focal = focal_node(g, prob, is_pos, keep, norm, lc)
            all_deltas = g.concat([deltas[k] for k in ("P3", "P4", "P5")])
            box = smooth_l1_node(
                g, all_deltas, g.input("box_target", (4 * n,)), g.input("box_weight", (4 * n,)), lc.smooth_l1_beta
            )
            box = g.scale(g.mul(box, norm), lc.box_weight, name="box")
            det = g.add(focal, box, name="detection")
            targets = {lv: g.input(f"mta_target.{lv}", (int(np.prod(self.grid[lv])),)) for lv in lc.levels}
            mta = mta_node(g, feats, targets, lc)
            g.output("focal", focal)
            g.output("box", box)
            g.output("detection", det)
            g.output("mta", mta)
            g.output("total", total_node(g, det, mta, lc))
        return g

    @cached_property
    def detect_graph(self) -> Graph:
        return self._detect_graph(with_loss=False)

    @cached_property
    def train_graph(self) -> Graph:
        return self._detect_graph(with_loss=True)

    def _pretext_graph(self, with_loss: bool) -> Graph:
        g = Graph()
        x = g.input("x", (self.cfg.input_channels, *self.cfg.input_hw))
        feats = self._backbone(g, x)
        ms = self.mlp_shapes()
        p = {k: g.parameter(k, s) for k, s in ms.items()}
        pooled = g.global_avg_pool(feats["P5"])
        hidden = g.swish(g.dense(pooled, p["mlp.0.w"], p["mlp.0.b"]))
        logits = g.output("logits", g.dense(hidden, p["mlp.1.w"], p["mlp.1.b"]))
        for level in feats:
            g.output(f"feat.{level}", feats[level])
        if with_loss:
            onehot = g.input("onehot", (self.cfg.pretext_classes,))
            logp = g.log(g.softmax(logits, 1.0))
            g.output("loss", g.scale(g.sum(g.mul(onehot, logp)), -1.0))
        return g

    @cached_property
    def pretext_graph(self) -> Graph:
        return self._pretext_graph(with_loss=False)

    @cached_property
    def pretext_train_graph(self) -> Graph:
        return self._pretext_graph(with_loss=True)

    # -- evaluation -----------------------------------------------------
    def _check_input(self, x) -> np.ndarray:
        arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        want = (self.cfg.input_channels, *self.cfg.input_hw)
        if arr.shape != want:
            raise ValueError(f"input shape {arr.shape} != {want}")
        return arr

    def forward_detect(self, params: Mapping[str, np.ndarray], x) -> StudentOutputs:
        out = self.detect_graph.forward({"x": self._check_input(x), **params})
        a = self.cfg.anchors.anchors_per_cell
        feats, logits, deltas = {}, {}, {}
        for lv in LEVELS:
            k = lv.name
            gh, gw = self.grid[k]
            feats[k] = ActivationTensor(lv, out[f"feat.{k}"])
            logits[k] = out[f"logits.{k}"].numpy()
            d = out[f"deltas.{k}"].data.reshape(a, 4, gh, gw)
            deltas[k] = d.transpose(0, 2, 3, 1).reshape(-1, 4)
        return StudentOutputs(feats, logits, deltas)

    def forward_pretext(self, params: Mapping[str, np.ndarray], x) -> np.ndarray:
        return self.pretext_graph.forward({"x": self._check_input(x), **params})["logits"].numpy()

    def box_target_layout(self, per_anchor: np.ndarray) -> np.ndarray:
        """Anchor-ordered (N, 4) values to the flattened head layout (A, 4, H, W)."""
        a = self.cfg.anchors.anchors_per_cell
        parts, start = [], 0
        for lv in LEVELS:
            gh, gw = self.grid[lv.name]
            n = a * gh * gw
            chunk = per_anchor[start : start + n].reshape(a, gh, gw, 4).transpose(0, 3, 1, 2)
            parts.append(chunk.reshape(-1))
            start += n
        return np.concatenate(parts)


def init_from_pretext(
    student: Student, pretext_params: Mapping[str, np.ndarray], seed: int = 0
) -> dict[str, np.ndarray]:
    """Copy backbone weights, draw fresh heads, drop the count classifier."""
    params = {}
    for name, shape in student.backbone_shapes().items():
        if name not in pretext_params:
            raise ValueError(f"pretext checkpoint lacks {name}")
        if tuple(pretext_params[name].shape) != shape:
            raise ValueError(f"{name}: shape {pretext_params[name].shape} != {shape}")
        params[name] = np.array(pretext_params[name], dtype=np.float64)
    params.update(student.init_heads(np.random.default_rng(seed)))
    return params


def decode_boxes(
    outputs: StudentOutputs,
    anchors: Mapping[str, np.ndarray],
    score_threshold: float = 0.05,
    image_hw: tuple[int, int] = (96, 96),
    frame_id: int = 0,
    iou_threshold: float = 0.5,
    max_detections: int = 100,
) -> DetectionSet:
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError("score_threshold must lie in [0, 1]")
    h, w = image_hw
    probs = outputs.probabilities()
    boxes = []
    for level in ("P3", "P4", "P5"):
        p = probs[level]
        sel = np.nonzero(p > score_threshold)[0]
        if sel.size == 0:
            continue
        coords = decode(anchors[level][sel], outputs.box_deltas[level][sel])
        coords = np.clip(coords, 0.0, [w, h, w, h])
        for (x0, y0, x1, y1), s in zip(coords, p[sel]):
            if x1 > x0 and y1 > y0:
                boxes.append(Box(float(x0), float(y0), float(x1), float(y1), float(s), 0))
    kept = nms(boxes, iou_threshold)[:max_detections]
    return DetectionSet(frame_id, "audio", kept)
