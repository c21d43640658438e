"""Bipartite assignment, tracking-aware label assignment and collision diagnostics."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .geometry import ConfigError, as_box_array, elementwise_iou, generalized_box_iou

COST_CLASS = 2.0
COST_L1 = 5.0
COST_GIOU = 2.0
TRACK_DROP_PROB = 0.1
HIST_BINS = 20


@dataclass
class AssignmentResult:
    matched_pairs: list[tuple[int, int]]
    unmatched_queries: list[int]
    unmatched_truth: list[int]

    def query_to_truth(self) -> dict[int, int]:
        return dict(self.matched_pairs)

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[i, j] for i, j in self.matched_pairs))


def hungarian(cost) -> AssignmentResult:
    """Minimum-cost assignment of min(n, m) rows to columns."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    n, m = cost.shape
    if n == 0 or m == 0:
        return AssignmentResult([], list(range(n)), list(range(m)))
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched_rows = {r for r, _ in pairs}
    matched_cols = {c for _, c in pairs}
    return AssignmentResult(
        pairs,
        [i for i in range(n) if i not in matched_rows],
        [j for j in range(m) if j not in matched_cols],
    )


def detection_cost(probs, boxes, truth_boxes, truth_classes,
                   w_class: float = COST_CLASS, w_l1: float = COST_L1,
                   w_giou: float = COST_GIOU) -> np.ndarray:
    """Matching cost between detection predictions [N] and truth objects [M]."""
    probs = torch.as_tensor(probs).detach().double()
    boxes = torch.as_tensor(boxes).detach().double()
    truth_boxes = torch.as_tensor(truth_boxes).double()
    truth_classes = torch.as_tensor(truth_classes, dtype=torch.long)
    if len(boxes) == 0 or len(truth_boxes) == 0:
        return np.zeros((len(boxes), len(truth_boxes)))
    c_cls = 1.0 - probs[:, truth_classes]
    c_l1 = torch.cdist(boxes, truth_boxes, p=1)
    c_giou = 1.0 - generalized_box_iou(boxes, truth_boxes)
    return (w_class * c_cls + w_l1 * c_l1 + w_giou * c_giou).numpy()


def assign_labels(track_ids: Sequence[int], det_probs, det_boxes,
                  truth_ids: Sequence[int], truth_boxes, truth_classes,
                  **cost_weights) -> AssignmentResult:
    """Bind track queries by identity, then Hungarian-match detection queries.

    Query indices run over ``[tracks..., detections...]``. Truth objects
    claimed by a track query are removed from the detection matching.
    """
    track_ids = [int(t) for t in track_ids]
    truth_ids = [int(t) for t in truth_ids]
    if len(set(track_ids)) != len(track_ids):
        raise ValueError(f"duplicate track identities: {track_ids}")
    if len(set(truth_ids)) != len(truth_ids):
        raise ValueError(f"duplicate truth identities: {truth_ids}")

    truth_index = {tid: j for j, tid in enumerate(truth_ids)}
    pairs: list[tuple[int, int]] = []
    unmatched_q: list[int] = []
    claimed = set()
    for qi, tid in enumerate(track_ids):
        j = truth_index.get(tid)
        if j is None:
            unmatched_q.append(qi)
        else:
            pairs.append((qi, j))
            claimed.add(j)

    n_trk = len(track_ids)
    free = [j for j in range(len(truth_ids)) if j not in claimed]
    n_det = len(det_boxes)
    if free and n_det:
        free_t = torch.as_tensor(free, dtype=torch.long)
        cost = detection_cost(det_probs, det_boxes,
                              torch.as_tensor(truth_boxes).double()[free_t],
                              torch.as_tensor(truth_classes, dtype=torch.long)[free_t],
                              **cost_weights)
        det_result = hungarian(cost)
        pairs += [(n_trk + r, free[c]) for r, c in det_result.matched_pairs]
        unmatched_q += [n_trk + r for r in det_result.unmatched_queries]
    else:
        unmatched_q += [n_trk + r for r in range(n_det)]

    matched_truth = {j for _, j in pairs}
    return AssignmentResult(
        sorted(pairs),
        sorted(unmatched_q),
        [j for j in range(len(truth_ids)) if j not in matched_truth],
    )


def drop_mask(count: int, p: float, generator: np.random.Generator) -> np.ndarray:
    """Boolean keep-mask: each entry independently dropped with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"drop probability must be in [0, 1], got {p}")
    if count == 0:
        return np.zeros(0, dtype=bool)
    return generator.random(count) >= p


def drop_track_queries(queries, p: float, seed: int | np.random.Generator):
    """Randomly remove track-kind queries from a ``QuerySet``; order is kept."""
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    is_track = np.asarray(queries.track_mask(), dtype=bool)
    keep = np.ones(len(is_track), dtype=bool)
    keep[is_track] = drop_mask(int(is_track.sum()), p, gen)
    return queries.select(np.flatnonzero(keep))


@dataclass
class CollisionStats:
    mean_distance: float | None
    histogram: np.ndarray = field(repr=False)
    fraction_at_one: float | None
    sample_count: int
    bin_width: float = 1.0 / HIST_BINS

    def bin_edges(self) -> np.ndarray:
        return np.arange(len(self.histogram)) * self.bin_width

    def to_csv(self) -> str:
        buf = io.StringIO()
        mean = "nan" if self.mean_distance is None else f"{self.mean_distance:.6f}"
        frac = "nan" if self.fraction_at_one is None else f"{self.fraction_at_one:.6f}"
        buf.write(f"# mean_distance={mean} fraction_at_one={frac} samples={self.sample_count}\n")
        buf.write("bin_left,count\n")
        for left, count in zip(self.bin_edges(), self.histogram):
            buf.write(f"{left:.2f},{int(count)}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CollisionStats":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = dict(kv.split("=") for kv in lines[0].lstrip("# ").split())
        counts = np.array([int(ln.split(",")[1]) for ln in lines[2:]], dtype=np.int64)
        as_opt = lambda s: None if s == "nan" else float(s)  # noqa: E731
        return cls(as_opt(header["mean_distance"]), counts,
                   as_opt(header["fraction_at_one"]), int(header["samples"]),
                   1.0 / len(counts))


def distance_stats(distances: Sequence[float], bins: int = HIST_BINS) -> CollisionStats:
    d = np.asarray(distances, dtype=np.float64).reshape(-1)
    if d.size == 0:
        return CollisionStats(None, np.zeros(bins, dtype=np.int64), None, 0, 1.0 / bins)
    idx = np.minimum((np.clip(d, 0.0, 1.0) * bins).astype(int), bins - 1)
    hist = np.bincount(idx, minlength=bins).astype(np.int64)
    return CollisionStats(float(d.mean()), hist, float(np.mean(d >= 1 - 1e-9)), int(d.size),
                          1.0 / bins)


def collision_stats(predicted_track_boxes, bound_truth_boxes,
                    bins: int = HIST_BINS) -> CollisionStats:
    """Statistics of 1 - IoU between each track query box and its bound truth box."""
    p = np.asarray(as_box_array(predicted_track_boxes), dtype=np.float64).reshape(-1, 4)
    t = np.asarray(as_box_array(bound_truth_boxes), dtype=np.float64).reshape(-1, 4)
    if len(p) != len(t):
        raise ValueError("predicted and truth boxes must be aligned")
    if len(p) == 0:
        return distance_stats([], bins)
    return distance_stats(1.0 - elementwise_iou(p, t), bins)
