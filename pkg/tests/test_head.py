import math

import numpy as np
import pytest
from scipy.special import expit

from lifsim.geometry import GridSpec
from lifsim.head import (
    HeadParams,
    HeadSample,
    TrainConfig,
    TrainingDiverged,
    decode,
    forward,
    fused_grid,
    gaussian_focal_loss,
    gaussian_radius,
    l1_reg_loss,
    load_params,
    local_maxima,
    loss_and_grad,
    render_targets,
    save_params,
    train,
)

from conftest import finite_difference_check, random_head_instance

SPEC = GridSpec((-4.0, -4.0), (4.0, 4.0), 0.8)


def test_forward_examples():
    p = HeadParams.zeros(3)
    heat, reg = forward(np.zeros((4, 4, 8)), p)
    assert np.all(heat == 0.5) and not reg.any()
    rng = np.random.default_rng(0)
    H = rng.standard_normal((4, 5, 8))
    p.w_cls[2] = 1.0
    heat, _ = forward(H, p)
    assert np.allclose(heat, expit(H[..., 2]), atol=1e-15)
    with pytest.raises(ValueError):
        forward(np.zeros((2, 2, 7)), p)


def test_forward_matches_dot_product_oracle():
    rng = np.random.default_rng(1)
    p = HeadParams.init(3, seed=4)
    H = rng.standard_normal((3, 4, 8))
    heat, reg = forward(H, p)
    for m in range(3):
        for n in range(4):
            z = sum(H[m, n, k] * p.w_cls[k] for k in range(8)) + p.b_cls
            assert heat[m, n] == pytest.approx(1 / (1 + math.exp(-z)), abs=1e-14)
            for r in range(7):
                y = sum(H[m, n, k] * p.W_reg[k, r] for k in range(8)) + p.b_reg[r]
                assert reg[m, n, r] == pytest.approx(y, abs=1e-12)


def focal_oracle(pred, target, a=2.0, b=4.0, eps=1e-7):
    total, n_pos = 0.0, 0
    for p, t in zip(np.ravel(pred), np.ravel(target)):
        p = min(max(p, eps), 1 - eps)
        if t == 1.0:
            n_pos += 1
            total -= (1 - p) ** a * math.log(p)
        else:
            total -= (1 - t) ** b * p ** a * math.log(1 - p)
    return total / max(1, n_pos)


def test_focal_examples():
    assert gaussian_focal_loss(np.array([0.5]), np.array([1.0])) == pytest.approx(0.25 * math.log(2), abs=1e-4)
    assert gaussian_focal_loss(np.array([0.5]), np.array([1.0])) == pytest.approx(0.1733, abs=1e-4)
    t = np.array([[1.0, 0.3], [0.0, 1.0]])
    assert gaussian_focal_loss(np.where(t == 1, 1.0, 0.0), t) < 1e-6


def test_focal_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        t = rng.random((5, 6))
        t[rng.random((5, 6)) < 0.1] = 1.0
        p = rng.random((5, 6))
        assert gaussian_focal_loss(p, t) == pytest.approx(focal_oracle(p, t), rel=1e-12)
        assert gaussian_focal_loss(p, t) >= 0


def test_l1_examples_and_oracle():
    rng = np.random.default_rng(3)
    reg, tgt = rng.random((4, 4, 7)), rng.random((4, 4, 7))
    mask = rng.random((4, 4)) < 0.4
    assert l1_reg_loss(tgt, tgt, mask) == 0.0
    assert l1_reg_loss(reg, tgt, np.zeros((4, 4), bool)) == 0.0
    expected = np.mean([abs(reg[m, n, r] - tgt[m, n, r]) for m in range(4) for n in range(4) if mask[m, n]
                        for r in range(7)])
    assert l1_reg_loss(reg, tgt, mask) == pytest.approx(expected, rel=1e-12)


def test_gaussian_radius_reference_values():
    # 10x10 box, overlap 0.7: the third quadratic (-28 + sqrt(1120)) / 2 is the smallest root
    assert gaussian_radius(10, 10) == pytest.approx((-28 + math.sqrt(1120)) / 2, abs=1e-12)
    assert gaussian_radius(10, 10) == pytest.approx(2.7332, abs=1e-4)
    assert gaussian_radius(5.625, 2.5, 0.7) > 0


def test_render_then_decode_recovers_centre_cells():
    rng = np.random.default_rng(4)
    gt = np.array([[-2.1, 1.3, 1.5, 2.0, 1.5, 4.5, 0.4], [2.5, -2.2, 1.5, 1.8, 1.4, 4.0, -2.0]])
    heat, reg, mask = render_targets(gt, SPEC)
    assert heat[mask].tolist() == [1.0, 1.0]
    boxes = decode(heat, reg, SPEC, peak_threshold=0.5)
    assert len(boxes) == 2
    got = sorted(map(tuple, np.round(boxes[:, [0, 1, 6]], 9)))
    want = sorted(map(tuple, np.round(gt[:, [0, 1, 6]], 9)))
    assert np.allclose(got, want)


def test_yaw_targets_are_periodic():
    gt = np.array([[0.3, 0.3, 1.5, 2.0, 1.5, 4.5, 0.4]])
    a = render_targets(gt, SPEC)[1]
    gt[0, 6] += 2 * math.pi
    b = render_targets(gt, SPEC)[1]
    assert np.allclose(a, b, atol=1e-12)


def test_decode_examples():
    assert decode(np.zeros(SPEC.shape), np.zeros(SPEC.shape + (7,)), SPEC).shape == (0, 8)
    heat = np.zeros(SPEC.shape)
    heat[3, 6] = 0.9
    reg = np.zeros(SPEC.shape + (7,))
    reg[..., 6] = 1.0
    out = decode(heat, reg, SPEC)
    x, y = SPEC.cell_center(3, 6)
    assert out.shape == (1, 8)
    assert out[0, :2].tolist() == [x, y] and out[0, 7] == 0.9


def test_local_maxima_match_scan_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        heat = np.round(rng.random((7, 9)), 1)
        got = {tuple(c) for c in local_maxima(heat, 0.3)}
        want = set()
        for m in range(7):
            for n in range(9):
                nb = [heat[i, j] for i in range(max(0, m - 1), min(7, m + 2))
                      for j in range(max(0, n - 1), min(9, n + 2))]
                if heat[m, n] > 0.3 and heat[m, n] >= max(nb):
                    want.add((m, n))
        assert got == want


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    cfg = TrainConfig()
    for _ in range(5):
        sample, params = random_head_instance(rng)
        assert finite_difference_check(sample, params, cfg) < 1e-4


def test_loss_is_sum_of_weighted_terms():
    rng = np.random.default_rng(7)
    sample, params = random_head_instance(rng)
    heat, reg = forward(fused_grid(sample.features, sample.vpe_weight, sample.bobev, params.Q), params)
    cfg = TrainConfig(lambda_cls=1.0, lambda_reg=0.25)
    want = gaussian_focal_loss(heat, sample.heat) + 0.25 * l1_reg_loss(reg, sample.reg, sample.mask)
    assert loss_and_grad(params, sample, cfg)[0] == pytest.approx(want, rel=1e-10)


def _separable_sample():
    spec = GridSpec((-3.2, -3.2), (3.2, 3.2), 0.8)
    gt = np.array([[0.4, 0.4, 1.5, 2.0, 1.5, 4.5, 0.0]])
    heat, reg, mask = render_targets(gt, spec)
    F = np.zeros(spec.shape + (2,))
    F[..., 0] = heat
    F[..., 1] = 1.0
    return HeadSample(F, np.zeros(spec.shape), np.zeros(spec.shape + (5,)), heat, reg, mask)


def test_training_converges_on_separable_example():
    res = train([_separable_sample()], TrainConfig(optimizer="adam", learning_rate=0.1, epochs=300))
    assert res.losses[-1] < 0.1 * res.losses[0]


def test_zero_learning_rate_keeps_params():
    init = HeadParams.init(2, seed=3)
    res = train([_separable_sample()], TrainConfig(learning_rate=0.0, epochs=5), init=init)
    assert np.array_equal(res.params.flatten(), init.flatten())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    sample = _separable_sample()
    sample.features[0, 0, 0] = np.inf
    with pytest.raises(TrainingDiverged):
        train([sample], TrainConfig(epochs=5))


def test_params_file_round_trip(tmp_path):
    p = HeadParams.init(16, seed=9)
    path = tmp_path / "head.bin"
    save_params(p, path)
    data = path.read_bytes()
    assert data[:4] == b"LIFH" and len(data) == 16 + 8 * len(p.flatten())
    assert np.array_equal(load_params(path).flatten(), p.flatten())
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        load_params(path)
