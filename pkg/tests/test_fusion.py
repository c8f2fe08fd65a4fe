import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lifsim.fusion import (
    BOBEV_CHANNELS,
    build_bobev,
    build_vpe,
    dedupe_received,
    fuse,
    lif_inputs,
    refine_features,
    suppress_background,
)
from lifsim.geometry import GridSpec
from lifsim.head import fused_grid

SPEC = GridSpec((-4.0, -3.2), (4.0, 3.2), 0.8)


def vpe_oracle(cells, conf, Q, spec):
    out = np.zeros(spec.shape + (len(Q),))
    for m in range(spec.H):
        for n in range(spec.W):
            best = None
            for (cm, cn), s in zip(cells, conf):
                if cm == m and cn == n:
                    best = s if best is None else max(best, s)
            if best is not None:
                out[m, n] = best * np.asarray(Q)
    return out


def bobev_oracle(boxes, spec):
    out = np.zeros(spec.shape + (BOBEV_CHANNELS,))
    for m in range(spec.H):
        for n in range(spec.W):
            winner = None
            for k, b in enumerate(boxes):
                bn = math.floor((b[0] - spec.extent_min[0]) / spec.resolution)
                bm = math.floor((b[1] - spec.extent_min[1]) / spec.resolution)
                if (bm, bn) == (m, n) and (winner is None or b[7] > boxes[winner][7]):
                    winner = k
            if winner is not None:
                out[m, n] = boxes[winner][3:8]
    return out


def test_vpe_examples():
    Q = np.ones(4)
    assert not build_vpe(np.zeros((0, 2)), [], Q, SPEC)[0].any()
    assert not build_vpe([[1, 1]], [0.0], Q, SPEC)[0].any()
    grid, _ = build_vpe([[1, 2], [3, 4]], [0.5, 1.0], Q, SPEC)
    assert np.all(grid[1, 2] == 0.5) and np.all(grid[3, 4] == 1.0)
    assert np.count_nonzero(grid.any(axis=-1)) == 2


def test_vpe_matches_dense_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(0, 15))
        cells = np.column_stack([rng.integers(-1, SPEC.H + 1, k), rng.integers(-1, SPEC.W + 1, k)])
        conf = rng.random(k)
        Q = rng.standard_normal(3)
        grid, skipped = build_vpe(cells, conf, Q, SPEC)
        ok = (cells[:, 0] >= 0) & (cells[:, 0] < SPEC.H) & (cells[:, 1] >= 0) & (cells[:, 1] < SPEC.W)
        assert skipped == int((~ok).sum())
        assert np.array_equal(grid, vpe_oracle(cells[ok], conf[ok], Q, SPEC))
        assert np.count_nonzero(grid.any(-1)) <= len({tuple(c) for c in cells[ok]})


@given(st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_vpe_scales_linearly_with_confidence(lam, seed):
    rng = np.random.default_rng(seed)
    cells = np.column_stack([rng.integers(0, SPEC.H, 6), rng.integers(0, SPEC.W, 6)])
    conf = rng.random(6)
    Q = rng.standard_normal(4)
    a, _ = build_vpe(cells, conf, Q, SPEC)
    b, _ = build_vpe(cells, lam * conf, Q, SPEC)
    assert np.allclose(b, lam * a, rtol=1e-12, atol=1e-15)


def test_refine_examples():
    rng = np.random.default_rng(1)
    F, v = rng.random((3, 4, 2)), rng.random((3, 4, 2))
    assert np.array_equal(refine_features(F, np.zeros_like(F)), F)
    assert np.array_equal(refine_features(np.zeros_like(v), v), v)
    assert np.array_equal(refine_features(F, v), F + v)
    with pytest.raises(ValueError):
        refine_features(F, v[..., :1])


@given(arrays(np.float64, (3, 3, 2), elements=st.integers(-1000, 1000).map(float)),
       arrays(np.float64, (3, 3, 2), elements=st.integers(-1000, 1000).map(float)),
       arrays(np.float64, (3, 3, 2), elements=st.integers(-1000, 1000).map(float)))
def test_refine_additivity(F, a, b):
    assert np.array_equal(refine_features(F, a + b), refine_features(refine_features(F, a), b))


def test_bobev_examples():
    assert not build_bobev(np.zeros((0, 8)), SPEC)[0].any()
    box = np.array([[0.1, 0.1, 1.5, 2.0, 1.5, 4.5, 0.0, 0.9]])
    grid, _ = build_bobev(box, SPEC)
    assert grid[4, 5].tolist() == [2.0, 1.5, 4.5, 0.0, 0.9]
    assert np.count_nonzero(grid.any(-1)) == 1


def test_bobev_matches_dense_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        k = int(rng.integers(0, 12))
        boxes = np.zeros((k, 8))
        boxes[:, :2] = rng.uniform(-3.0, 3.0, (k, 2))
        boxes[:, 3:7] = rng.uniform(0.5, 5, (k, 4))
        boxes[:, 7] = rng.choice([0.3, 0.6, 0.9], k)
        grid, skipped = build_bobev(boxes, SPEC)
        assert skipped == 0
        assert np.array_equal(grid, bobev_oracle(boxes, SPEC))


def test_bobev_tie_keeps_earliest():
    boxes = np.array([[0.1, 0.1, 1.5, 1, 1, 1, 0, 0.5], [0.2, 0.2, 1.5, 2, 2, 2, 0, 0.5]])
    grid, _ = build_bobev(boxes, SPEC)
    assert grid[4, 5, 0] == 1.0


def test_fuse_shapes_and_slices():
    rng = np.random.default_rng(3)
    F = rng.random((SPEC.H, SPEC.W, 16))
    B = rng.random((SPEC.H, SPEC.W, 5))
    out = fuse(F, B)
    assert out.shape[-1] == 21
    assert np.array_equal(out[..., :16], F) and np.array_equal(out[..., 16:], B)
    with pytest.raises(ValueError):
        fuse(F, B[:-1])


def test_zero_messages_reduce_to_single_agent_grid():
    rng = np.random.default_rng(4)
    F = rng.random((SPEC.H, SPEC.W, 6))
    Q = rng.standard_normal(6)
    Fo, v, b = lif_inputs(F, np.zeros((0, 3)), np.zeros((0, 8)), SPEC)
    assert np.array_equal(fused_grid(Fo, v, b, Q), np.concatenate([F, np.zeros(SPEC.shape + (5,))], -1))


def test_lif_inputs_agree_with_building_blocks():
    rng = np.random.default_rng(5)
    F = rng.random((SPEC.H, SPEC.W, 4))
    Q = rng.standard_normal(4)
    pts = np.column_stack([rng.uniform(-5, 5, 9), rng.uniform(-4, 4, 9), rng.random(9)])
    boxes = np.zeros((4, 8))
    boxes[:, :2] = rng.uniform(-3, 3, (4, 2))
    boxes[:, 7] = rng.random(4)
    Fo, v, b = lif_inputs(F, pts, boxes, SPEC)
    cells = np.floor((pts[:, [1, 0]] - np.array(SPEC.extent_min)[[1, 0]]) / SPEC.resolution).astype(int)
    vpe, _ = build_vpe(cells, pts[:, 2], Q, SPEC)
    assert np.allclose(fused_grid(Fo, v, b, Q), fuse(refine_features(F, vpe), build_bobev(boxes, SPEC)[0]))
    _, v0, b0 = lif_inputs(F, pts, boxes, SPEC, use_vpe=False, use_bobev=False)
    assert not v0.any() and not b0.any()


def greedy_oracle(boxes, radius):
    idx = sorted(range(len(boxes)), key=lambda i: (-boxes[i][7], i))
    kept = []
    for i in idx:
        if all(math.hypot(boxes[i][0] - boxes[j][0], boxes[i][1] - boxes[j][1]) >= radius for j in kept):
            kept.append(i)
    return kept


def test_dedupe_examples():
    a = np.array([[0, 0, 1.5, 2, 1.5, 4.5, 0, 0.8]])
    b = a.copy()
    b[0, 7] = 0.9
    out = dedupe_received([a, b])
    assert len(out) == 1 and out[0, 7] == 0.9
    far = a.copy()
    far[0, 0] = 5
    assert len(dedupe_received([a, far])) == 2
    assert dedupe_received([]).shape == (0, 8)


def test_dedupe_matches_greedy_oracle():
    rng = np.random.default_rng(6)
    for _ in range(200):
        k = int(rng.integers(0, 20))
        boxes = np.zeros((k, 8))
        centres = rng.uniform(-3, 3, (3, 2))
        boxes[:, :2] = centres[rng.integers(0, 3, k)] + rng.normal(0, 0.6, (k, 2))
        boxes[:, 7] = rng.choice([0.2, 0.5, 0.7, 0.9], k)
        split = int(rng.integers(0, k + 1))
        out = dedupe_received([boxes[:split], boxes[split:]], 1.0)
        assert np.array_equal(out, boxes[greedy_oracle(boxes, 1.0)])


def test_background_suppression():
    preds = np.array([[0.1, 0.1, 1.5, 2, 1.5, 4.5, 0, 0.6], [-3.0, -2.0, 1.5, 2, 1.5, 4.5, 0, 0.6]])
    bg = np.array([[0.1, 0.1, 0.15], [-3.0, -2.0, 0.075]])
    support = np.zeros(SPEC.shape, dtype=bool)
    out = suppress_background(preds, bg, support, SPEC, 0.15)
    assert out[0, 7] == pytest.approx(0.0) and out[1, 7] == pytest.approx(0.3)
    support[4, 5] = True
    out = suppress_background(preds, bg, support, SPEC, 0.15)
    assert out[0, 7] == 0.6
    assert np.array_equal(suppress_background(preds, np.zeros((0, 3)), support, SPEC, 0.15), preds)
