import math

import numpy as np
import pytest

from matr.geometry import NormBox
from matr.metrics import ALPHAS, combine, evaluate, hota, idf1, mota

A = NormBox(0.2, 0.2, 0.1, 0.1)
B = NormBox(0.7, 0.7, 0.1, 0.1)
C = NormBox(0.2, 0.8, 0.1, 0.1)


def _truth(frames):
    return [[(1, A), (2, B)] for _ in range(frames)]


def test_perfect():
    gt = _truth(5)
    r = evaluate(gt, gt)
    assert (r.hota, r.deta, r.assa, r.mota, r.idf1) == (1.0, 1.0, 1.0, 1.0, 1.0)
    assert (r.tp, r.fp, r.fn, r.id_switches) == (10, 0, 0, 0)
    np.testing.assert_array_equal(r.hota_curve, np.ones(19))


def test_empty_result():
    gt = _truth(4)
    r = evaluate(gt, [[] for _ in range(4)])
    assert r.hota == 0.0 and r.deta == 0.0
    assert r.mota == 0.0 and r.idf1 == 0.0
    assert (r.tp, r.fp, r.fn, r.id_switches) == (0, 0, 8, 0)


def test_empty_truth_is_flagged():
    assert math.isnan(mota([[]], [[(1, A)]]))
    assert math.isnan(idf1([], []))


def test_one_swap():
    # ids swap from the third frame on; boxes stay perfect
    gt = _truth(4)
    res = [[(1, A), (2, B)], [(1, A), (2, B)], [(2, A), (1, B)], [(2, A), (1, B)]]
    r = evaluate(gt, res)
    # every truth/result id pair co-occurs on 2 of 4 frames: TPA 2, FNA 2, FPA 2
    assert r.deta == pytest.approx(1.0, abs=1e-12)
    assert r.assa == pytest.approx(1 / 3, abs=1e-9)
    assert r.hota == pytest.approx(math.sqrt(1 / 3), abs=1e-9)
    assert (r.tp, r.fp, r.fn, r.id_switches) == (8, 0, 0, 2)
    assert r.mota == pytest.approx(0.75, abs=1e-12)
    # best global pairing keeps 2 of 4 detections per identity
    assert (r.idtp, r.idfp, r.idfn) == (4, 4, 4)
    assert r.idf1 == pytest.approx(0.5, abs=1e-12)


def test_one_false_positive_per_frame():
    gt = _truth(10)
    res = [[(1, A), (2, B), (3, C)] for _ in range(10)]
    r = evaluate(gt, res)
    assert (r.tp, r.fp, r.fn, r.id_switches) == (20, 10, 0, 0)
    assert r.mota == pytest.approx(0.5, abs=1e-12)
    assert r.deta == pytest.approx(2 / 3, abs=1e-9)
    assert r.assa == pytest.approx(1.0, abs=1e-9)
    assert r.hota == pytest.approx(math.sqrt(2 / 3), abs=1e-9)
    assert r.idf1 == pytest.approx(40 / 50, abs=1e-12)


def test_partial_overlap_alpha_curve():
    # IoU 0.63: a true positive for the 12 thresholds 0.05..0.60 only
    gt = [[(1, NormBox(0.5, 0.5, 0.2, 0.2))]]
    res = [[(5, NormBox(0.5, 0.5, 0.2, 0.126))]]
    h, d, a, curve = hota(gt, res)
    expected = (ALPHAS <= 0.6 + 1e-9).astype(float)
    np.testing.assert_allclose(curve, expected, atol=1e-12)
    assert d == pytest.approx(12 / 19, abs=1e-9)
    assert a == pytest.approx(12 / 19, abs=1e-9)
    assert h == pytest.approx(12 / 19, abs=1e-9)


def test_clear_keeps_previous_correspondence():
    gt = [[(1, NormBox(0.5, 0.5, 0.2, 0.2))]] * 2
    near = NormBox(0.5, 0.5, 0.2, 0.2)
    ok = NormBox(0.5, 0.5, 0.2, 0.13)  # IoU 0.65
    res = [[(1, near)], [(1, ok), (2, near)]]
    r = evaluate(gt, res)
    assert (r.tp, r.fp, r.fn, r.id_switches) == (2, 1, 0, 0)
    assert r.mota == pytest.approx(0.5, abs=1e-12)


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        evaluate([[(1, A), (1, B)]], [[]])


def _random_fixture(rng, frames=6, objects=4):
    boxes = {i: np.array([rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), 0.15, 0.15])
             for i in range(1, objects + 1)}
    gt, res = [], []
    for _ in range(frames):
        g, r = [], []
        for i, b in boxes.items():
            b = np.clip(b + rng.normal(0, 0.02, 4) * [1, 1, 0, 0], 0.1, 0.9)
            boxes[i] = b
            g.append((i, NormBox(*b)))
            if rng.random() < 0.8:
                jitter = np.clip(b + rng.normal(0, 0.02, 4), 0.05, 0.95)
                r.append((int(rng.choice([i, i + 10])), NormBox(*jitter)))
        gt.append(g)
        seen = set()
        res.append([x for x in r if not (x[0] in seen or seen.add(x[0]))])
    return gt, res


@pytest.mark.parametrize("seed", range(10))
def test_relabel_invariance_and_bounds(seed):
    rng = np.random.default_rng(seed)
    gt, res = _random_fixture(rng)
    base = evaluate(gt, res)
    perm = {i: int(p) for i, p in zip(range(1, 20), rng.permutation(np.arange(100, 119)))}
    relabeled = evaluate(gt, [[(perm[i], b) for i, b in rows] for rows in res])
    for key in ("hota", "deta", "assa", "mota", "idf1", "id_switches"):
        assert getattr(relabeled, key) == pytest.approx(getattr(base, key), abs=1e-12)
    assert 0 <= base.hota <= 1 and 0 <= base.idf1 <= 1 and base.mota <= 1
    assert base.hota == pytest.approx(np.mean(np.sqrt(base.deta_curve * base.assa_curve)), abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_deleting_correct_detection_never_raises_deta(seed):
    # separated objects, results copy the truth boxes under arbitrary ids
    rng = np.random.default_rng(100 + seed)
    centers = [(0.2, 0.2), (0.8, 0.2), (0.2, 0.8), (0.8, 0.8)]
    gt, res = [], []
    for _ in range(6):
        rows = [(i + 1, NormBox(cx + rng.uniform(-0.05, 0.05), cy + rng.uniform(-0.05, 0.05), 0.15, 0.15))
                for i, (cx, cy) in enumerate(centers)]
        gt.append(rows)
        ids = rng.permutation(np.arange(1, 9))[:4]
        res.append([(int(k), b) for k, (_, b) in zip(ids, rows) if rng.random() < 0.8])
    base = evaluate(gt, res)
    t = next(i for i, rows in enumerate(res) if rows)
    cut = [list(rows) for rows in res]
    cut[t].pop(int(rng.integers(len(cut[t]))))
    after = evaluate(gt, cut)
    assert np.all(after.deta_curve <= base.deta_curve + 1e-12)
    assert after.tp == base.tp - 1


def test_combine_pools_counts():
    gt = _truth(4)
    swap = [[(1, A), (2, B)], [(1, A), (2, B)], [(2, A), (1, B)], [(2, A), (1, B)]]
    pooled = combine([evaluate(gt, gt), evaluate(gt, swap)])
    assert (pooled.tp, pooled.id_switches, pooled.num_truth) == (16, 2, 16)
    assert pooled.mota == pytest.approx(1 - 2 / 16)
    assert pooled.assa == pytest.approx((1 + 1 / 3) / 2, abs=1e-9)
