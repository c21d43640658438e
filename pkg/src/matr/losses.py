"""Trajectory loss, detection losses with deep supervision, and their combination."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch.nn import functional as F

from .assignment import AssignmentResult
from .geometry import elementwise_giou

TRAJ_WEIGHT = 5.0
counters: Counter = Counter()


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossConfig:
    traj_weight: float = TRAJ_WEIGHT
    w_class: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def validate(self):
        for name in ("traj_weight", "w_class", "w_l1", "w_giou", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.focal_alpha <= 1.0:
            raise ValueError("focal_alpha must be in [0, 1]")


@dataclass
class LossReport:
    total: float
    traj: float
    cls: float
    box_l1: float
    box_giou: float
    per_frame: list[dict] = field(default_factory=list)
    traj_weight: float = TRAJ_WEIGHT
    tensor: torch.Tensor | None = field(default=None, repr=False)

    CSV_HEADER = "step,total,traj,cls,box_l1,box_giou"

    def csv_row(self, step: int) -> str:
        return (f"{step},{self.total:.10g},{self.traj:.10g},{self.cls:.10g},"
                f"{self.box_l1:.10g},{self.box_giou:.10g}")


def trajectory_loss(predictions: Sequence[torch.Tensor], truth: Sequence[dict],
                    tracker_ids: Sequence[Sequence[int]]):
    """Mean L1 (summed over the 4 coordinates) between motion predictions and truth.

    ``predictions[t]`` is ``[n_t, 4]`` for the trackers ``tracker_ids[t]``;
    ``truth[t]`` maps identity -> box tensor. Trackers absent from a frame's
    truth are skipped and not counted. Returns ``(loss, empty_flag)``.
    """
    counters["trajectory_loss"] += 1
    terms = []
    for pred, gt, ids in zip(predictions, truth, tracker_ids):
        if pred is None:
            continue
        for row, ident in zip(pred, ids):
            target = gt.get(int(ident))
            if target is not None:
                terms.append((row - torch.as_tensor(target, dtype=row.dtype)).abs().sum())
    if not terms:
        return torch.zeros(()), True
    return torch.stack(terms).sum() / len(terms), False


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, gamma: float = 2.0,
               alpha: float = 0.25) -> torch.Tensor:
    """Softmax focal loss summed over queries; the last class is no-object."""
    logp = F.log_softmax(logits, -1).gather(1, targets[:, None])[:, 0]
    p = logp.exp()
    no_object = logits.shape[-1] - 1
    weight = torch.where(targets == no_object, 1.0 - alpha, alpha).to(logits.dtype)
    return -(weight * (1.0 - p) ** gamma * logp).sum()


def detection_loss(layer_logits: Sequence[torch.Tensor], layer_boxes: Sequence[torch.Tensor],
                   assignment: AssignmentResult, truth_boxes, truth_classes,
                   config: LossConfig | None = None):
    """(cls, box_l1, box_giou) for one frame, summed over decoder layers.

    Every unmatched query (including track queries whose object is absent)
    gets the no-object target. Terms are normalized by the matched-pair count
    with a floor of one and already carry their weights.
    """
    config = config or LossConfig()
    n_queries, n_cls = layer_logits[-1].shape
    dtype = layer_logits[-1].dtype
    truth_boxes = torch.as_tensor(truth_boxes, dtype=dtype).reshape(-1, 4)
    truth_classes = torch.as_tensor(truth_classes, dtype=torch.long).reshape(-1)
    targets = torch.full((n_queries,), n_cls - 1, dtype=torch.long)
    q_idx = torch.as_tensor([q for q, _ in assignment.matched_pairs], dtype=torch.long)
    t_idx = torch.as_tensor([t for _, t in assignment.matched_pairs], dtype=torch.long)
    if len(q_idx):
        targets[q_idx] = truth_classes[t_idx]
    norm = max(1, len(q_idx))

    cls = l1 = gi = torch.zeros((), dtype=dtype)
    for logits, boxes in zip(layer_logits, layer_boxes):
        cls = cls + focal_loss(logits, targets, config.focal_gamma, config.focal_alpha)
        if len(q_idx):
            pred, tgt = boxes[q_idx], truth_boxes[t_idx]
            l1 = l1 + (pred - tgt).abs().sum()
            gi = gi + (1.0 - elementwise_giou(pred, tgt)).sum()
    return (config.w_class * cls / norm, config.w_l1 * l1 / norm, config.w_giou * gi / norm)


def matr_loss(traj, detection_terms, traj_weight: float = TRAJ_WEIGHT) -> LossReport:
    """total = traj_weight * traj + (cls + box_l1 + box_giou)."""
    cls, l1, gi = detection_terms
    parts = [torch.as_tensor(v, dtype=torch.float64) if not isinstance(v, torch.Tensor) else v
             for v in (traj, cls, l1, gi)]
    values = [float(p.detach()) for p in parts]
    if not all(math.isfinite(v) for v in values) or not math.isfinite(traj_weight):
        raise NonFiniteLossError(
            f"non-finite loss: traj={values[0]} cls={values[1]} l1={values[2]} giou={values[3]}")
    total = traj_weight * parts[0] + parts[1] + parts[2] + parts[3]
    return LossReport(float(total.detach()), values[0], values[1], values[2], values[3],
                      traj_weight=traj_weight, tensor=total)
