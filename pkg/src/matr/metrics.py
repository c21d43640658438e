"""HOTA, CLEAR-MOT MOTA and IDF1 for box tracks.

Inputs are per-frame lists of rows whose first two entries are
``(identity, box)``; extra entries (confidence, class) are ignored. Frame
lists of unequal length are padded with empty frames.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import as_box_array, box_iou

ALPHAS = np.arange(1, 20) * 0.05
EPS = np.finfo(float).eps


@dataclass
class MetricsReport:
    hota: float
    deta: float
    assa: float
    mota: float
    idf1: float
    hota_curve: np.ndarray = field(repr=False)
    deta_curve: np.ndarray = field(repr=False)
    assa_curve: np.ndarray = field(repr=False)
    tp: int = 0
    fp: int = 0
    fn: int = 0
    id_switches: int = 0
    idtp: int = 0
    idfp: int = 0
    idfn: int = 0
    num_truth: int = 0
    alpha_counts: np.ndarray | None = field(default=None, repr=False)  # [19, 3] tp, fn, fp

    def to_text(self) -> str:
        keys = ("hota", "deta", "assa", "mota", "idf1", "tp", "fp", "fn", "id_switches",
                "idtp", "idfp", "idfn")
        return "".join(f"{k}={getattr(self, k)}\n" for k in keys)

    def curve_csv(self) -> str:
        buf = io.StringIO()
        buf.write("alpha,hota,deta,assa\n")
        for a, h, d, s in zip(ALPHAS, self.hota_curve, self.deta_curve, self.assa_curve):
            buf.write(f"{a:.2f},{h:.10g},{d:.10g},{s:.10g}\n")
        return buf.getvalue()


class _Frames:
    """Per-frame id/box arrays with identities remapped to dense indices."""

    def __init__(self, frames: Sequence[Sequence], total: int, label: str):
        self.ids: list[np.ndarray] = []
        self.boxes: list[np.ndarray] = []
        mapping: dict[int, int] = {}
        for t in range(total):
            rows = frames[t] if t < len(frames) else []
            raw = [int(r[0]) for r in rows]
            if len(set(raw)) != len(raw):
                raise ValueError(f"duplicate identity in {label} frame {t}: {raw}")
            self.ids.append(np.array([mapping.setdefault(i, len(mapping)) for i in raw],
                                     dtype=np.int64))
            boxes = as_box_array([r[1] for r in rows]) if rows else np.zeros((0, 4))
            self.boxes.append(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
        self.num_ids = len(mapping)
        self.num_dets = sum(len(i) for i in self.ids)


def _prepare(truth, result):
    total = max(len(truth), len(result))
    gt, tr = _Frames(truth, total, "truth"), _Frames(result, total, "result")
    sims = [box_iou(g, r) if len(g) and len(r) else np.zeros((len(g), len(r)))
            for g, r in zip(gt.boxes, tr.boxes)]
    return gt, tr, sims


def _hota(gt: _Frames, tr: _Frames, sims):
    n_a = len(ALPHAS)
    tp, fn, fp = np.zeros(n_a), np.zeros(n_a), np.zeros(n_a)
    matches = np.zeros((n_a, gt.num_ids, tr.num_ids))

    # global alignment score between every truth/result identity pair
    potential = np.zeros((gt.num_ids, tr.num_ids))
    gt_count = np.zeros((gt.num_ids, 1))
    tr_count = np.zeros((1, tr.num_ids))
    for g_ids, t_ids, sim in zip(gt.ids, tr.ids, sims):
        if len(g_ids) and len(t_ids):
            denom = sim.sum(0)[None, :] + sim.sum(1)[:, None] - sim
            sim_iou = np.zeros_like(sim)
            mask = denom > EPS
            sim_iou[mask] = sim[mask] / denom[mask]
            potential[g_ids[:, None], t_ids[None, :]] += sim_iou
        gt_count[g_ids] += 1
        tr_count[0, t_ids] += 1
    alignment = potential / np.maximum(gt_count + tr_count - potential, EPS)

    for g_ids, t_ids, sim in zip(gt.ids, tr.ids, sims):
        if len(g_ids) == 0:
            fp += len(t_ids)
            continue
        if len(t_ids) == 0:
            fn += len(g_ids)
            continue
        score = alignment[g_ids[:, None], t_ids[None, :]] * sim
        rows, cols = linear_sum_assignment(-score)
        for a, alpha in enumerate(ALPHAS):
            ok = sim[rows, cols] >= alpha - EPS
            n_ok = int(ok.sum())
            tp[a] += n_ok
            fn[a] += len(g_ids) - n_ok
            fp[a] += len(t_ids) - n_ok
            matches[a, g_ids[rows[ok]], t_ids[cols[ok]]] += 1

    assa = np.zeros(n_a)
    for a in range(n_a):
        m = matches[a]
        ass_iou = m / np.maximum(gt_count + tr_count - m, EPS)
        assa[a] = (m * ass_iou).sum() / max(1.0, tp[a])
    deta = tp / np.maximum(1.0, tp + fn + fp)
    hota = np.sqrt(deta * assa)
    return hota, deta, assa, tp, fn, fp


def _clear(gt: _Frames, tr: _Frames, sims, threshold: float = 0.5):
    tp = fp = fn = idsw = 0
    prev_tracker = np.full(gt.num_ids, -1)  # last ever matched result id
    prev_step = np.full(gt.num_ids, -1)  # result id matched at the previous frame
    for g_ids, t_ids, sim in zip(gt.ids, tr.ids, sims):
        if len(g_ids) == 0:
            fp += len(t_ids)
            continue
        if len(t_ids) == 0:
            fn += len(g_ids)
            continue
        continuing = (prev_step[g_ids][:, None] == t_ids[None, :]) & (prev_step[g_ids][:, None] >= 0)
        score = 1000.0 * continuing + sim
        score[sim < threshold - EPS] = 0
        rows, cols = linear_sum_assignment(-score)
        ok = score[rows, cols] > EPS
        rows, cols = rows[ok], cols[ok]
        g_matched, t_matched = g_ids[rows], t_ids[cols]
        before = prev_tracker[g_matched]
        idsw += int(np.sum((before >= 0) & (before != t_matched)))
        prev_tracker[g_matched] = t_matched
        prev_step[:] = -1
        prev_step[g_matched] = t_matched
        tp += len(rows)
        fn += len(g_ids) - len(rows)
        fp += len(t_ids) - len(rows)
    return tp, fp, fn, idsw


def _identity(gt: _Frames, tr: _Frames, sims, threshold: float = 0.5):
    counts = np.zeros((gt.num_ids, tr.num_ids))
    for g_ids, t_ids, sim in zip(gt.ids, tr.ids, sims):
        if len(g_ids) and len(t_ids):
            hit = sim >= threshold - EPS
            np.add.at(counts, (np.repeat(g_ids, len(t_ids))[hit.ravel()],
                               np.tile(t_ids, len(g_ids))[hit.ravel()]), 1)
    idtp = 0
    if counts.size:
        rows, cols = linear_sum_assignment(-counts)
        idtp = int(counts[rows, cols].sum())
    return idtp, tr.num_dets - idtp, gt.num_dets - idtp


def hota(truth, result):
    """(hota, deta, assa, per-alpha hota curve)."""
    h, d, a, *_ = _hota(*_prepare(truth, result))
    return float(h.mean()), float(d.mean()), float(a.mean()), h


def mota(truth, result, threshold: float = 0.5) -> float:
    gt, tr, sims = _prepare(truth, result)
    if gt.num_dets == 0:
        return math.nan
    tp, fp, fn, idsw = _clear(gt, tr, sims, threshold)
    return 1.0 - (fn + fp + idsw) / gt.num_dets


def idf1(truth, result, threshold: float = 0.5) -> float:
    gt, tr, sims = _prepare(truth, result)
    if gt.num_dets == 0:
        return math.nan
    idtp, idfp, idfn = _identity(gt, tr, sims, threshold)
    return 2 * idtp / max(1, 2 * idtp + idfp + idfn)


def evaluate(truth, result, threshold: float = 0.5) -> MetricsReport:
    gt, tr, sims = _prepare(truth, result)
    h, d, a, a_tp, a_fn, a_fp = _hota(gt, tr, sims)
    tp, fp, fn, idsw = _clear(gt, tr, sims, threshold)
    idtp, idfp, idfn = _identity(gt, tr, sims, threshold)
    if gt.num_dets:
        mota_v = 1.0 - (fn + fp + idsw) / gt.num_dets
        idf1_v = 2 * idtp / max(1, 2 * idtp + idfp + idfn)
    else:
        mota_v = idf1_v = math.nan
    return MetricsReport(float(h.mean()), float(d.mean()), float(a.mean()), mota_v, idf1_v,
                         h, d, a, tp, fp, fn, idsw, idtp, idfp, idfn, gt.num_dets,
                         np.stack([a_tp, a_fn, a_fp], -1))


def combine(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Pool several sequences by summing counts (AssA is TP-weighted)."""
    counts = sum(r.alpha_counts for r in reports)
    tp, fn, fp = counts[:, 0], counts[:, 1], counts[:, 2]
    assa = sum(r.assa_curve * r.alpha_counts[:, 0] for r in reports) / np.maximum(1.0, tp)
    deta = tp / np.maximum(1.0, tp + fn + fp)
    h = np.sqrt(deta * assa)
    tot = {k: sum(getattr(r, k) for r in reports)
           for k in ("tp", "fp", "fn", "id_switches", "idtp", "idfp", "idfn", "num_truth")}
    n = tot["num_truth"]
    mota_v = 1.0 - (tot["fn"] + tot["fp"] + tot["id_switches"]) / n if n else math.nan
    idf1_v = 2 * tot["idtp"] / max(1, 2 * tot["idtp"] + tot["idfp"] + tot["idfn"]) if n else math.nan
    return MetricsReport(float(h.mean()), float(deta.mean()), float(assa.mean()), mota_v, idf1_v,
                         h, deta, assa, tot["tp"], tot["fp"], tot["fn"], tot["id_switches"],
                         tot["idtp"], tot["idfp"], tot["idfn"], n, counts)
