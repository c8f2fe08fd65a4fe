import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lifsim.metrics import (
    DIST_THRESHOLDS,
    aligned_iou,
    average_precision,
    evaluate,
    match,
    mean_ap,
    nds,
    nds_from_normalized,
    pr_curve,
    tp_errors,
    wrapped_yaw_diff,
)


def random_frame(rng, n_gt=8, n_fp=4, noise=0.8):
    gt = np.zeros((n_gt, 7))
    gt[:, :2] = rng.uniform(-40, 40, (n_gt, 2))
    gt[:, 3:6] = (2.0, 1.5, 4.5)
    gt[:, 6] = rng.uniform(-math.pi, math.pi, n_gt)
    keep = rng.random(n_gt) < 0.8
    preds = np.zeros((int(keep.sum()) + n_fp, 8))
    preds[: keep.sum(), :7] = gt[keep]
    preds[: keep.sum(), :2] += rng.normal(0, noise, (int(keep.sum()), 2))
    preds[keep.sum():, :2] = rng.uniform(-40, 40, (n_fp, 2))
    preds[:, 3:6] = (2.0, 1.5, 4.5)
    preds[:, 7] = rng.random(len(preds))
    return preds, gt


def match_oracle(preds, gts, d):
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][7], i))
    free = list(range(len(gts)))
    pairs = []
    for i in order:
        best, best_d = None, math.inf
        for j in free:
            dist = math.hypot(gts[j][0] - preds[i][0], gts[j][1] - preds[i][1])
            if dist < best_d:
                best, best_d = j, dist
        if best is not None and best_d < d:
            pairs.append((i, best))
            free.remove(best)
    return pairs


def test_match_examples():
    rng = np.random.default_rng(0)
    preds, gt = random_frame(rng, n_fp=0, noise=0.0)
    gt = gt[: len(preds)]
    preds = np.column_stack([gt, np.ones(len(gt))])
    res = match(preds, gt, 0.5)
    assert len(res.pairs) == len(gt) and not res.unmatched_preds and not res.unmatched_gts
    res = match(np.zeros((0, 8)), gt, 2.0)
    assert res.unmatched_gts == list(range(len(gt)))


def test_match_agrees_with_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        preds, gt = random_frame(rng, noise=1.5)
        for d in DIST_THRESHOLDS:
            assert match(preds, gt, d).pairs == match_oracle(preds, gt, d)


def test_map_extremes():
    rng = np.random.default_rng(2)
    frames = []
    for _ in range(5):
        _, gt = random_frame(rng)
        frames.append((np.column_stack([gt, np.ones(len(gt))]), gt))
    assert mean_ap(frames)[0] == pytest.approx(1.0)
    far = [(np.column_stack([gt + [500, 0, 0, 0, 0, 0, 0], np.ones(len(gt))]), gt) for _, gt in frames]
    assert mean_ap(far)[0] == 0.0


def pr_oracle(frames, d):
    scored = []
    n_gt = 0
    for preds, gt in frames:
        n_gt += len(gt)
        tp = {i for i, _ in match_oracle(preds, gt, d)}
        scored.extend((preds[i][7], i in tp) for i in range(len(preds)))
    ranked = sorted(enumerate(scored), key=lambda t: (-t[1][0], t[0]))
    prec, rec = [], []
    for k in range(1, len(ranked) + 1):
        hits = sum(1 for _, (_, ok) in ranked[:k] if ok)
        prec.append(hits / k)
        rec.append(hits / n_gt)
    return prec, rec


def ap_oracle(prec, rec):
    vals = []
    for i in range(101):
        r = i / 100
        # precision at recall r: linear between the last point at or below r and the next one
        below = [k for k in range(len(rec)) if rec[k] <= r]
        if r > rec[-1]:
            p = 0.0
        elif not below:
            p = prec[0]
        else:
            j = below[-1]
            if j == len(rec) - 1:
                p = prec[j]
            else:
                p = prec[j] + (prec[j + 1] - prec[j]) * (r - rec[j]) / (rec[j + 1] - rec[j])
        vals.append(p)
    kept = [max(0.0, p - 0.1) for p in vals[11:]]
    return sum(kept) / len(kept) / 0.9


def test_ap_agrees_with_quadratic_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        frames = [random_frame(rng, n_gt=5, n_fp=3) for _ in range(3)]
        for d in (0.5, 2.0):
            prec, rec = pr_oracle(frames, d)
            got_p, got_r = pr_curve(*_flags(frames, d))
            assert np.allclose(got_p, prec) and np.allclose(got_r, rec)
            assert average_precision(frames, d) == pytest.approx(ap_oracle(prec, rec), abs=1e-12)


def _flags(frames, d):
    from lifsim.metrics import _accumulate
    return _accumulate(frames, d)


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(4)
    frames = [random_frame(rng, noise=1.0) for _ in range(5)]
    _, aps = mean_ap(frames)
    assert aps[4.0] >= aps[0.5]


def test_permutation_invariance():
    rng = np.random.default_rng(5)
    frames = [random_frame(rng) for _ in range(4)]
    base = evaluate(frames).as_dict()
    shuffled = [(p[rng.permutation(len(p))], g) for p, g in frames]
    assert evaluate(shuffled).as_dict() == base


def test_low_confidence_false_positive_never_raises_ap():
    rng = np.random.default_rng(6)
    for _ in range(30):
        frames = [random_frame(rng) for _ in range(3)]
        before = average_precision(frames, 2.0)
        preds, gt = frames[0]
        fp = np.array([[900, 900, 0, 2, 1.5, 4.5, 0, -1.0]])
        frames[0] = (np.vstack([preds, fp]), gt)
        assert average_precision(frames, 2.0) <= before + 1e-12


def test_tp_errors():
    gt = np.array([[0, 0, 1.5, 2, 1.5, 4.5, 0.3]])
    assert tp_errors([(gt[0], gt[0])]) == (0.0, 0.0, 0.0)
    flipped = gt[0].copy()
    flipped[6] += math.pi
    assert tp_errors([(flipped, gt[0])])[2] == pytest.approx(math.pi)
    assert tp_errors([]) == (4.0, 1.0, math.pi)


def test_tp_errors_match_pair_loop():
    rng = np.random.default_rng(7)
    pairs = []
    for _ in range(30):
        g = np.r_[rng.uniform(-5, 5, 3), rng.uniform(1, 5, 3), rng.uniform(-3, 3)]
        p = g + np.r_[rng.normal(0, 0.5, 3), rng.normal(0, 0.3, 3), rng.normal(0, 1)]
        p[3:6] = np.abs(p[3:6]) + 0.1
        pairs.append((p, g))
    ate = np.mean([math.hypot(p[0] - g[0], p[1] - g[1]) for p, g in pairs])
    ase = np.mean([1 - (min(p[3], g[3]) * min(p[4], g[4]) * min(p[5], g[5]))
                   / (p[3] * p[4] * p[5] + g[3] * g[4] * g[5] - min(p[3], g[3]) * min(p[4], g[4]) * min(p[5], g[5]))
                   for p, g in pairs])
    aoe = np.mean([abs(math.atan2(math.sin(p[6] - g[6]), math.cos(p[6] - g[6]))) for p, g in pairs])
    assert np.allclose(tp_errors(pairs), (ate, ase, aoe), atol=1e-12)


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_wrapped_yaw_range(a, b):
    d = float(wrapped_yaw_diff(a, b))
    assert 0 <= d <= math.pi + 1e-12
    assert math.cos(d) == pytest.approx(math.cos(a - b), abs=1e-9)


@given(st.tuples(*[st.floats(0.1, 10)] * 3), st.tuples(*[st.floats(0.1, 10)] * 3))
def test_aligned_iou_bounds(a, b):
    iou = aligned_iou(a, b)
    assert 0 < iou <= 1 + 1e-12
    assert aligned_iou(a, a) == pytest.approx(1.0)


def test_nds_examples():
    assert nds(1.0, (0, 0, 0)) == 1.0
    assert nds(0.0, (4.0, 1.0, math.pi)) == 0.0
    assert nds(0.0, (40.0, 2.0, 10.0)) == 0.0
    # composite regression fixture: (5 * 0.72 + 0.9112 + 0.863 + 0.9714) / 8 = 0.7932
    assert nds_from_normalized(0.72, (0.0888, 0.137, 0.0286)) == pytest.approx(0.7931, abs=2e-4)
    assert nds_from_normalized(0.72, (0.0888, 0.137, 0.0286)) == pytest.approx(6.3456 / 8, abs=1e-12)


def test_self_evaluation_is_perfect():
    rng = np.random.default_rng(8)
    frames = []
    for _ in range(3):
        _, gt = random_frame(rng)
        frames.append((np.column_stack([gt, np.linspace(1, 0.5, len(gt))]), gt))
    r = evaluate(frames)
    assert r.mAP == pytest.approx(1.0) and r.NDS == pytest.approx(1.0)
    assert (r.mATE, r.mASE, r.mAOE) == (0.0, 0.0, 0.0)
    text = r.to_text()
    assert "mAP=1.000000" in text and text.endswith("\n")
