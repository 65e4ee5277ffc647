"""Focal, temperature-KL, multi-teacher alignment and total losses.

Each loss has a graph builder (``*_node``) used inside the student's training
graph and a plain function that evaluates the same builder on arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .attention import ActivationTensor, attention_node, l2_normalize_node, teacher_target
from .autograd import Graph, Node
from .geometry import IGNORE, POSITIVE
from .tensor import as_array

PROB_CLIP = 1e-12


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    r: float = 2.0
    temperature: float = 9.0
    beta: float = 0.5
    delta: float = 1.0
    omega: float = 0.05
    box_weight: float = 1.0
    smooth_l1_beta: float = 0.1
    power_first: bool = False
    levels: tuple[str, ...] = ("P3", "P4", "P5")

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.gamma < 0 or self.r <= 0 or self.temperature <= 0:
            raise ValueError("need gamma >= 0, r > 0, temperature > 0")
        if min(self.beta, self.delta, self.omega, self.box_weight) < 0:
            raise ValueError("loss weights must be nonnegative")


def focal_normalizer(labels: np.ndarray) -> float:
    return 1.0 / max(1, int(np.sum(labels == POSITIVE)))


def focal_node(g: Graph, prob: Node, is_pos: Node, keep: Node, norm: Node, cfg: LossConfig) -> Node:
    """Sum of -alpha (1 - pt)^gamma log(pt) over kept anchors, times ``norm``.

    ``is_pos`` and ``keep`` are 0/1 vectors; ``norm`` is a scalar node.
    """
    ones = g.constant(np.ones(prob.shape))
    neg = g.sub(ones, is_pos)
    pt = g.add(g.mul(is_pos, prob), g.mul(neg, g.sub(ones, prob)))
    focus = g.pow(g.sub(ones, pt), cfg.gamma) if cfg.gamma != 0 else ones
    term = g.scale(g.mul(focus, g.log(pt)), -cfg.alpha)
    return g.mul(g.sum(g.mul(term, keep)), norm, name="focal")


def focal_inputs(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    labels = np.asarray(labels)
    return (labels == POSITIVE).astype(float), (labels != IGNORE).astype(float), focal_normalizer(labels)


def focal_loss(pred_prob, labels, cfg: LossConfig = LossConfig()) -> float:
    """Focal loss over anchors labelled +1 / 0 / -1 (ignore)."""
    p = np.clip(as_array(pred_prob).reshape(-1), PROB_CLIP, 1.0 - PROB_CLIP)
    labels = np.asarray(labels).reshape(-1)
    if p.size == 0:
        raise ValueError("empty anchor set")
    if labels.shape != p.shape:
        raise ValueError(f"{labels.size} labels for {p.size} anchors")
    is_pos, keep, norm = focal_inputs(labels)
    g = Graph()
    prob = g.input("p", p.shape)
    out = focal_node(g, prob, g.constant(is_pos), g.constant(keep), g.constant(norm), cfg)
    g.output("loss", out)
    return g.forward({"p": p})["loss"].item()


def smooth_l1_node(g: Graph, pred: Node, target: Node, weight: Node, beta: float) -> Node:
    """Sum of weighted Huber terms; built from abs/relu so no new primitive is needed."""
    a = g.abs(g.sub(pred, target))
    over = g.relu(g.add(a, g.constant(np.full(a.shape, -beta))))
    inner = g.sub(a, over)  # min(|d|, beta)
    per = g.add(g.scale(g.pow(inner, 2.0), 0.5 / beta), over)
    return g.sum(g.mul(per, weight))


def kl_node(g: Graph, s: Node, log_target: Node, temperature: float) -> Node:
    """KL(softmax(s/T) || target) with the target given as constants."""
    p = g.softmax(s, temperature)
    return g.sum(g.mul(p, g.sub(g.log(p), log_target)))


def softmax_np(x: np.ndarray, temperature: float) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def kl_temperature(s, t_map, temperature: float) -> float:
    s = as_array(s).reshape(-1)
    t_map = as_array(t_map).reshape(-1)
    if s.shape != t_map.shape:
        raise ValueError(f"length mismatch {s.size} vs {t_map.size}")
    if s.size < 2:
        raise ValueError("need at least two entries")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    q = softmax_np(t_map, temperature)
    g = Graph()
    x = g.input("s", s.shape)
    g.output("kl", kl_node(g, x, g.constant(np.log(np.maximum(q, PROB_CLIP))), temperature))
    return g.forward({"s": s})["kl"].item()


def mta_target(teachers: Sequence[ActivationTensor | None], cfg: LossConfig) -> np.ndarray:
    """Flattened log-softmax target for one level (teachers are constants)."""
    target = teacher_target(teachers, cfg.r, cfg.power_first).values.data.reshape(-1)
    q = softmax_np(target, cfg.temperature)
    return np.log(np.maximum(q, PROB_CLIP))


def mta_node(g: Graph, student: Mapping[str, Node], log_targets: Mapping[str, Node], cfg: LossConfig) -> Node:
    terms = []
    for level in cfg.levels:
        feat = student[level]
        q = attention_node(g, feat, cfg.r, cfg.power_first)
        flat = g.reshape(l2_normalize_node(g, q), (int(np.prod(q.shape)),))
        if log_targets[level].shape != flat.shape:
            raise ValueError(f"{level}: teacher map {log_targets[level].shape} vs student {flat.shape}")
        terms.append(kl_node(g, flat, log_targets[level], cfg.temperature))
    acc = terms[0]
    for t in terms[1:]:
        acc = g.add(acc, t)
    return g.scale(acc, cfg.beta, name="mta")


def mta_loss(
    student: Mapping[str, ActivationTensor],
    teachers: Sequence[Mapping[str, ActivationTensor]],
    cfg: LossConfig = LossConfig(),
) -> float:
    g = Graph()
    feats, targets, bind = {}, {}, {}
    for level in cfg.levels:
        if level not in student or any(level not in t for t in teachers):
            raise ValueError(f"missing level {level}")
        s = student[level]
        for t in teachers:
            if t[level].values.shape[1:] != s.values.shape[1:]:
                raise ValueError(f"{level}: spatial shape mismatch {t[level].values.shape} vs {s.values.shape}")
        feats[level] = g.input(level, s.values.shape)
        bind[level] = s.values
        targets[level] = g.constant(mta_target([t[level] for t in teachers], cfg))
    g.output("mta", mta_node(g, feats, targets, cfg))
    return g.forward(bind)["mta"].item()


def total_loss(focal: float, mta: float, cfg: LossConfig = LossConfig()) -> float:
    if not (math.isfinite(focal) and math.isfinite(mta)):
        raise ValueError("loss terms must be finite")
    return cfg.delta * focal + cfg.omega * mta


def total_node(g: Graph, focal: Node, mta: Node, cfg: LossConfig) -> Node:
    return g.add(g.scale(focal, cfg.delta), g.scale(mta, cfg.omega), name="total")
