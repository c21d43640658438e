"""Finite-difference check of every loss term through the whole network.

Shared by the loss unit tests and the acceptance suite.
"""

import numpy as np
import torch

from matr.assignment import AssignmentResult, assign_labels
from matr.losses import LossConfig, detection_loss, matr_loss, trajectory_loss
from matr.model import MATRModel, ModelConfig, QuerySet

TERMS = ("traj", "cls", "l1", "giou", "total")


def tiny_model():
    """D=16, 2 detection queries, a 16x32 image (8 memory tokens), 64-bit."""
    cfg = ModelConfig(dim=16, heads=2, ffn_dim=16, num_queries=2, enc_layers=1, dec_layers=2,
                      image_height=16, image_width=32, backbone_channels=(4, 8), seed=0)
    m = MATRModel(cfg, dtype=torch.float64)
    # move off the zero initialization so every path carries gradient
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.05)
    return m


def full_network_gradient_check(per_tensor: int = 3, eps: float = 1e-6, rtol: float = 1e-3):
    """Return a list of (term, parameter, index, analytic, numeric) mismatches."""
    torch.manual_seed(0)
    m = tiny_model()
    rng = np.random.default_rng(0)
    frames = [torch.tensor(rng.random((16, 32, 3))) for _ in range(2)]
    truth = np.array([[0.3, 0.4, 0.2, 0.3], [0.7, 0.6, 0.25, 0.3]])
    moved = truth + [0.03, -0.02, 0.0, 0.01]
    memory = m.encode(frames[0])
    assert len(memory) == 8
    out0 = m.decode(m.init_queries(), memory)
    a0 = assign_labels([], out0.probs.detach(), out0.boxes.detach(), [1, 2], truth, [0, 0])
    # track query 1 continues; the second detection query is free for truth 2
    track_q = [q for q, j in a0.matched_pairs if j == 0][0]
    a1 = AssignmentResult([(0, 0), (2, 1)], [1], [])
    config = LossConfig()

    def terms():
        mem0 = m.encode(frames[0])
        o0 = m.decode(m.init_queries(), mem0)
        tracks = QuerySet.from_tracks(o0.embeddings[[track_q]], o0.boxes[[track_q]], [1])
        mem1 = m.encode(frames[1])
        tracks, mat_boxes = m.mat_update(tracks, mem1)
        o1 = m.decode(QuerySet.concat(tracks, m.init_queries()), mem1)
        traj, _ = trajectory_loss([mat_boxes], [{1: torch.tensor(moved[0])}], [[1]])
        d0 = detection_loss(o0.layer_logits, o0.layer_boxes, a0, truth, [0, 0], config)
        d1 = detection_loss(o1.layer_logits, o1.layer_boxes, a1, moved, [0, 0], config)
        det = tuple((x + y) / 2 for x, y in zip(d0, d1))
        return traj, det

    def scalar(k):
        traj, det = terms()
        if k == 0:
            return traj
        if k < 4:
            return det[k - 1]
        return matr_loss(traj, det, 5.0).tensor

    named = [(n, p) for n, p in m.named_parameters() if p.requires_grad]
    picks = []
    for name, p in named:
        idx = np.random.default_rng(p.numel()).choice(p.numel(), size=min(per_tensor, p.numel()),
                                                      replace=False)
        picks.append((name, p, idx))
    failures = []
    for k, term in enumerate(TERMS):
        m.zero_grad()
        scalar(k).backward()
        for name, p, idx in picks:
            flat = p.data.view(-1)
            for i in idx:
                orig = flat[i].item()
                with torch.no_grad():
                    flat[i] = orig + eps
                    up = float(scalar(k))
                    flat[i] = orig - eps
                    down = float(scalar(k))
                    flat[i] = orig
                numeric = (up - down) / (2 * eps)
                analytic = float(p.grad.view(-1)[i]) if p.grad is not None else 0.0
                if abs(analytic - numeric) > rtol * max(abs(numeric), 1e-4):
                    failures.append((term, name, int(i), analytic, numeric))
    return failures
