"""Training-time recurrence over a clip: track-query propagation with label assignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .assignment import AssignmentResult, assign_labels, drop_track_queries
from .baselines import KalmanState, klf_observe, klf_update
from .geometry import elementwise_iou
from .losses import LossConfig, LossReport, detection_loss, matr_loss, trajectory_loss
from .model import FrameOutput, MATRModel, QuerySet
from .synthdata import SequenceClip

MODES = ("matr", "bl_imp_only", "qim_like", "klf")
PROMOTE_IOU = 0.5


@dataclass
class FrameRecord:
    output: FrameOutput
    assignment: AssignmentResult
    track_ids: list[int]
    track_anchors: torch.Tensor  # anchors of track queries as they enter the decoder
    mat_boxes: Optional[torch.Tensor]
    truth_ids: np.ndarray
    truth_boxes: np.ndarray
    truth_classes: np.ndarray

    def truth_by_id(self) -> dict[int, np.ndarray]:
        return {int(i): b for i, b in zip(self.truth_ids, self.truth_boxes)}


@dataclass
class ClipRollout:
    mode: str
    frames: list[FrameRecord] = field(default_factory=list)

    def collision_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """(track anchors entering the decoder, truth of the same identity), frames >= 1."""
        preds, truths = [], []
        for rec in self.frames:
            gt = rec.truth_by_id()
            anchors = rec.track_anchors.detach().cpu().numpy()
            for ident, anchor in zip(rec.track_ids, anchors):
                if ident in gt:
                    preds.append(anchor)
                    truths.append(gt[ident])
        return np.array(preds).reshape(-1, 4), np.array(truths).reshape(-1, 4)


def _check_mode(mode: str):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def forward_clip(model: MATRModel, clip: SequenceClip, mode: str = "matr",
                 train_mode: bool = True, rng: np.random.Generator | int | None = 0,
                 drop_prob: float = 0.1, promote_iou: float = PROMOTE_IOU) -> ClipRollout:
    """Run the clip frame by frame, carrying identity-labelled track queries.

    Matched queries whose output box reaches ``promote_iou`` with their truth
    become (or stay) track queries for the next frame. Track-query dropout is
    applied between frames in train mode only.
    """
    _check_mode(mode)
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    rollout = ClipRollout(mode)
    tracks = QuerySet.empty(model.config.dim, model.dtype)
    klf_states: dict[int, KalmanState] = {}

    for t in range(clip.length):
        memory = model.encode(clip.frames[t])
        ids, boxes, classes = clip.truth_arrays(t)
        mat_boxes = None
        if len(tracks):
            if mode == "matr":
                tracks, mat_boxes = model.mat_update(tracks, memory)
            elif mode == "qim_like":
                tracks = model.qim_update(tracks)
            elif mode == "klf":
                tracks, klf_states = klf_update(model, tracks, klf_states)
        n_trk = len(tracks)
        queries = QuerySet.concat(tracks, model.init_queries())
        out = model.decode(queries, memory)
        out.mat_boxes = mat_boxes
        assignment = assign_labels(tracks.identities, out.probs[n_trk:].detach(),
                                   out.boxes[n_trk:].detach(), ids, boxes, classes)
        rollout.frames.append(FrameRecord(out, assignment, list(tracks.identities),
                                          tracks.anchors, mat_boxes, ids, boxes, classes))

        keep_q, keep_ids = [], []
        if assignment.matched_pairs:
            q_idx = [q for q, _ in assignment.matched_pairs]
            t_idx = [j for _, j in assignment.matched_pairs]
            ious = elementwise_iou(out.boxes.detach()[q_idx].double().numpy(), boxes[t_idx])
            for q, j, v in zip(q_idx, t_idx, ious):
                if v >= promote_iou:
                    keep_q.append(q)
                    keep_ids.append(int(ids[j]))
        index = torch.as_tensor(keep_q, dtype=torch.long)
        tracks = QuerySet.from_tracks(out.embeddings[index], out.boxes[index], keep_ids)
        if mode == "klf":
            observed = klf_observe(klf_states, keep_ids, out.boxes.detach()[index].double().numpy())
            klf_states = {i: observed[i] for i in keep_ids}
        if train_mode and drop_prob > 0 and len(tracks):
            tracks = drop_track_queries(tracks, drop_prob, gen)
    return rollout


def rollout_loss(rollout: ClipRollout, config: LossConfig | None = None,
                 traj_weight: float | None = None) -> LossReport:
    """Combined loss over a rollout; detection terms are averaged over frames.

    Trajectory supervision exists only when the motion-aware update ran, so
    other modes use a zero trajectory term without evaluating it.
    """
    config = config or LossConfig()
    if traj_weight is None:
        traj_weight = config.traj_weight if rollout.mode == "matr" else 0.0
    per_frame = []
    cls = l1 = gi = 0.0
    for t, rec in enumerate(rollout.frames):
        c, b, g = detection_loss(rec.output.layer_logits, rec.output.layer_boxes,
                                 rec.assignment, rec.truth_boxes, rec.truth_classes, config)
        cls, l1, gi = cls + c, l1 + b, gi + g
        per_frame.append({"frame": t, "cls": float(c.detach()), "box_l1": float(b.detach()),
                          "box_giou": float(g.detach())})
    n = max(1, len(rollout.frames))
    det_terms = (cls / n, l1 / n, gi / n)
    if rollout.mode == "matr":
        traj, _ = trajectory_loss(
            [rec.mat_boxes for rec in rollout.frames],
            [{i: torch.as_tensor(b) for i, b in rec.truth_by_id().items()}
             for rec in rollout.frames],
            [rec.track_ids for rec in rollout.frames])
    else:
        traj = torch.zeros(())
    report = matr_loss(traj, det_terms, traj_weight)
    report.per_frame = per_frame
    return report
