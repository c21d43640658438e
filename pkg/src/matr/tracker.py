"""Online inference: track birth, inactive retention and removal."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .baselines import KalmanState, kalman_init, kalman_predict, kalman_update
from .geometry import ConfigError, NormBox
from .model import QuerySet

DET_THRESH = 0.7
TRACK_THRESH = 0.5
MISS_TOLERANCE = 25
ACTIVE, INACTIVE = "active", "inactive"


@dataclass
class TrackerConfig:
    det_thresh: float = DET_THRESH
    track_thresh: float = TRACK_THRESH
    miss_tolerance: int = MISS_TOLERANCE
    num_classes: int = 1
    mode: str = "matr"

    def validate(self):
        if self.miss_tolerance < 1:
            raise ConfigError("miss_tolerance must be >= 1")
        if not 0.0 < self.track_thresh <= self.det_thresh < 1.0:
            warnings.warn("expected 0 < track_thresh <= det_thresh < 1", stacklevel=2)


@dataclass
class TrackRecord:
    identity: int
    embedding: torch.Tensor
    anchor: torch.Tensor
    confidence: float
    miss_count: int = 0
    kalman: Optional[KalmanState] = None

    @property
    def status(self) -> str:
        return INACTIVE if self.miss_count >= 1 else ACTIVE


@dataclass
class TrackerState:
    tracks: list[TrackRecord] = field(default_factory=list)
    next_identity: int = 1
    frame_index: int = 0


Emission = tuple[int, NormBox, float]


def _box(values) -> NormBox:
    cx, cy, w, h = (float(v) for v in values)
    return NormBox(min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0),
                   min(max(w, 1e-6), 1.0), min(max(h, 1e-6), 1.0))


def _move_tracks(model, tracks: QuerySet, records: list[TrackRecord], memory, mode: str):
    if len(tracks) == 0:
        return tracks, records
    if mode == "matr":
        tracks, _ = model.mat_update(tracks, memory)
    elif mode == "qim_like":
        tracks = model.qim_update(tracks)
    elif mode == "klf":
        anchors, records = [], list(records)
        for i, rec in enumerate(records):
            state = rec.kalman or kalman_init(rec.anchor.numpy())
            state, predicted = kalman_predict(state)
            records[i] = replace(rec, kalman=state)
            anchors.append(predicted.as_array())
        tracks = QuerySet(tracks.features, torch.as_tensor(np.stack(anchors), dtype=tracks.anchors.dtype),
                          list(tracks.identities), list(tracks.kinds))
        tracks = model.qim_update(tracks)
    return tracks, records


@torch.no_grad()
def step(state: TrackerState, frame, model, config: TrackerConfig):
    """Advance one frame; returns ``(new_state, emissions)``.

    Track queries (active and inactive) are moved, decoded together with the
    detection queries, then re-scored: at or above ``track_thresh`` they are
    active and emitted, below it they accumulate misses and are dropped once
    the miss count exceeds ``miss_tolerance``. Detection queries at or above
    ``det_thresh`` start new tracks.
    """
    memory = model.encode(frame)
    records = list(state.tracks)
    dim = model.config.dim
    if records:
        tracks = QuerySet.from_tracks(torch.stack([r.embedding for r in records]),
                                      torch.stack([r.anchor for r in records]),
                                      [r.identity for r in records])
    else:
        tracks = QuerySet.empty(dim, model.dtype)
    tracks, records = _move_tracks(model, tracks, records, memory, config.mode)
    queries = QuerySet.concat(tracks, model.init_queries())
    out = model.decode(queries, memory)
    conf = out.confidence().double().numpy()
    boxes = out.boxes.detach()
    emissions: list[Emission] = []
    kept: list[TrackRecord] = []
    n_trk = len(records)
    for i, rec in enumerate(records):
        c = float(conf[i])
        new = replace(rec, embedding=out.embeddings[i], anchor=boxes[i], confidence=c)
        if c >= config.track_thresh:
            new.miss_count = 0
            if config.mode == "klf" and rec.kalman is not None:
                new.kalman = kalman_update(rec.kalman, boxes[i].double().numpy())
            emissions.append((rec.identity, _box(boxes[i]), c))
        else:
            new.miss_count = rec.miss_count + 1
            if new.miss_count > config.miss_tolerance:
                continue
        kept.append(new)
    next_id = state.next_identity
    for j in range(n_trk, len(queries)):
        c = float(conf[j])
        if c < config.det_thresh:
            continue
        rec = TrackRecord(next_id, out.embeddings[j], boxes[j], c)
        if config.mode == "klf":
            rec.kalman = kalman_init(boxes[j].double().numpy())
        kept.append(rec)
        emissions.append((next_id, _box(boxes[j]), c))
        next_id += 1
    return TrackerState(kept, next_id, state.frame_index + 1), emissions


def run(sequence: Sequence, model, config: TrackerConfig | None = None) -> list[list[Emission]]:
    """Track a whole sequence of frames from an empty state."""
    config = config or TrackerConfig()
    config.validate()
    if len(sequence) == 0:
        raise ValueError("sequence must contain at least one frame")
    if hasattr(model, "eval"):
        model.eval()
    state = TrackerState()
    out = []
    for frame in sequence:
        state, emissions = step(state, frame, model, config)
        out.append(emissions)
    return out
