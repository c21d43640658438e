"""Box algebra for normalized center-format boxes.

Every box in this package is ``(cx, cy, w, h)`` expressed as fractions of the
image size. The array helpers accept either numpy arrays or torch tensors with
a trailing dimension of 4 and return the same kind they were given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

ANCHOR_EPS = 1e-4
BOX_TEMPERATURE = 20.0


class ConfigError(ValueError):
    """Raised for invalid static configuration (sizes, dims, probabilities)."""


@dataclass(frozen=True)
class NormBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center out of range: {self}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size out of range: {self}")

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_xyxy(cls, x0: float, y0: float, x1: float, y1: float) -> "NormBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class BoxDelta:
    dcx: float
    dcy: float
    dw: float
    dh: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.dcx, self.dcy, self.dw, self.dh)):
            raise ValueError(f"non-finite delta: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.dcx, self.dcy, self.dw, self.dh], dtype=np.float64)


def _xp(x):
    return torch if isinstance(x, torch.Tensor) else np


def as_box_array(boxes) -> np.ndarray | torch.Tensor:
    if isinstance(boxes, (torch.Tensor, np.ndarray)):
        return boxes
    if isinstance(boxes, NormBox):
        return boxes.as_array()
    rows = [b.as_array() if isinstance(b, NormBox) else np.asarray(b, dtype=np.float64)
            for b in boxes]
    if not rows:
        return np.zeros((0, 4))
    return np.stack(rows)


def cxcywh_to_xyxy(boxes):
    cx, cy, w, h = (boxes[..., i] for i in range(4))
    return _xp(boxes).stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], -1)


def xyxy_to_cxcywh(boxes):
    x0, y0, x1, y1 = (boxes[..., i] for i in range(4))
    return _xp(boxes).stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], -1)


def _inter_union(a, b):
    """Elementwise intersection and union of broadcast-compatible box arrays."""
    xp = _xp(a)
    a_xy, b_xy = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    lt = xp.maximum(a_xy[..., :2], b_xy[..., :2])
    rb = xp.minimum(a_xy[..., 2:], b_xy[..., 2:])
    wh = (rb - lt).clip(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a_xy[..., 2] - a_xy[..., 0]) * (a_xy[..., 3] - a_xy[..., 1])
    area_b = (b_xy[..., 2] - b_xy[..., 0]) * (b_xy[..., 3] - b_xy[..., 1])
    return inter, area_a + area_b - inter


def elementwise_iou(a, b):
    inter, union = _inter_union(a, b)
    return inter / union


def elementwise_giou(a, b):
    xp = _xp(a)
    inter, union = _inter_union(a, b)
    a_xy, b_xy = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    lt = xp.minimum(a_xy[..., :2], b_xy[..., :2])
    rb = xp.maximum(a_xy[..., 2:], b_xy[..., 2:])
    wh = rb - lt
    hull = wh[..., 0] * wh[..., 1]
    return inter / union - (hull - union) / hull


def box_iou(boxes1, boxes2):
    """Pairwise IoU, shape [N, M]."""
    return elementwise_iou(boxes1[:, None, :], boxes2[None, :, :])


def generalized_box_iou(boxes1, boxes2):
    """Pairwise GIoU, shape [N, M]."""
    return elementwise_giou(boxes1[:, None, :], boxes2[None, :, :])


def iou(a: NormBox, b: NormBox) -> float:
    return float(elementwise_iou(a.as_array(), b.as_array()))


def giou(a: NormBox, b: NormBox) -> float:
    return float(elementwise_giou(a.as_array(), b.as_array()))


def inverse_sigmoid(x, eps: float = ANCHOR_EPS):
    xp = _xp(x)
    x = x.clip(min=eps, max=1 - eps)
    return xp.log(x / (1 - x))


def _sigmoid(x):
    if isinstance(x, torch.Tensor):
        return torch.sigmoid(x)
    return 1.0 / (1.0 + np.exp(-x))


def refine_boxes(anchors, deltas):
    """Shift anchors by deltas in logit space; broadcasting over leading dims."""
    return _sigmoid(inverse_sigmoid(anchors) + deltas)


def refine_anchor(anchor: NormBox, delta: BoxDelta) -> NormBox:
    out = refine_boxes(anchor.as_array(), delta.as_array())
    return NormBox(*(float(v) for v in out))


def box_embedding(boxes, dim: int, temperature: float = BOX_TEMPERATURE):
    """Sinusoidal encoding of (cx, cy, w, h) into ``dim`` features.

    Each coordinate gets ``dim // 4`` features: interleaved sin/cos pairs at
    geometric frequencies ``temperature ** (2k / (dim // 4))``.
    """
    if dim <= 0 or dim % 8:
        raise ConfigError(f"embedding dim must be a positive multiple of 8, got {dim}")
    xp = _xp(boxes)
    per_coord = dim // 4
    k = np.arange(per_coord // 2, dtype=np.float64)
    freqs = temperature ** (2 * k / per_coord)
    if xp is torch:
        freqs = torch.as_tensor(freqs, dtype=boxes.dtype, device=boxes.device)
    scaled = boxes[..., :, None] * (2 * math.pi) / freqs  # [..., 4, per_coord/2]
    emb = xp.stack([xp.sin(scaled), xp.cos(scaled)], -1)
    return emb.reshape(*boxes.shape[:-1], dim)


def box_to_embedding(box: NormBox, dim: int) -> np.ndarray:
    return box_embedding(box.as_array(), dim)


def pairwise_distance(predicted: Sequence[NormBox] | np.ndarray,
                      targets: Sequence[NormBox] | np.ndarray) -> np.ndarray:
    """Matrix of 1 - IoU between every predicted and target box."""
    p, t = as_box_array(predicted), as_box_array(targets)
    if len(p) == 0 or len(t) == 0:
        return np.zeros((len(p), len(t)))
    return 1.0 - box_iou(np.asarray(p, dtype=np.float64), np.asarray(t, dtype=np.float64))


def clamp_boxes(boxes, eps: float = ANCHOR_EPS):
    """Clamp centers to [0, 1] and sizes to [eps, 1]."""
    xp = _xp(boxes)
    centers = boxes[..., :2].clip(min=0.0, max=1.0)
    sizes = boxes[..., 2:].clip(min=eps, max=1.0)
    return xp.concatenate([centers, sizes], -1) if xp is np else torch.cat([centers, sizes], -1)


def to_boxes(items: Iterable[NormBox]) -> np.ndarray:
    return as_box_array(list(items))
