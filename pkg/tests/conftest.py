import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lifsim.geometry import CameraRig, GridSpec, rotation_from_euler

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_rig(rng: np.random.Generator) -> CameraRig:
    """Downward-looking camera with random intrinsics and pose."""
    w, h = int(rng.integers(320, 1280)), int(rng.integers(200, 720))
    R = rotation_from_euler(rng.uniform(-np.pi, np.pi), rng.uniform(0.6, np.pi / 2), rng.uniform(-0.3, 0.3))
    T = np.array([rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(20, 120)])
    return CameraRig(rng.uniform(200, 1500), rng.uniform(200, 1500), rng.uniform(0.3, 0.7) * w,
                     rng.uniform(0.3, 0.7) * h, R, T, w, h)


def ground_point_oracle(rig: CameraRig, u: float, v: float, h: float = 1.5) -> np.ndarray:
    """World point on z = h seen at pixel (u, v), via an explicit inverse intrinsic matrix."""
    d = rig.R @ np.linalg.inv(rig.K) @ np.array([u, v, 1.0])
    r = (h - rig.T[2]) / d[2]
    return rig.T + r * d


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_spec():
    return GridSpec((-6.4, -4.8), (6.4, 4.8), 0.8)


def random_head_instance(rng: np.random.Generator, channels: int = 4):
    """Random 8x8 head sample plus random parameters."""
    from lifsim.head import HeadParams, HeadSample, render_targets

    spec = GridSpec((-3.2, -3.2), (3.2, 3.2), 0.8)
    k = int(rng.integers(1, 4))
    gt = np.zeros((k, 7))
    gt[:, :2] = rng.uniform(-3.0, 3.0, (k, 2))
    gt[:, 2] = 1.5
    gt[:, 3:6] = rng.uniform(0.8, 3.0, (k, 3))
    gt[:, 6] = rng.uniform(-np.pi, np.pi, k)
    heat, reg, mask = render_targets(gt, spec)
    F = rng.standard_normal(spec.shape + (channels,))
    v = np.where(rng.random(spec.shape) < 0.3, rng.random(spec.shape), 0.0)
    bobev = np.where(rng.random(spec.shape + (1,)) < 0.2, rng.random(spec.shape + (5,)), 0.0)
    D = channels + 5
    params = HeadParams(0.5 * rng.standard_normal(D), float(rng.normal()), 0.5 * rng.standard_normal((D, 7)),
                        rng.standard_normal(7), 0.5 * rng.standard_normal(channels))
    return HeadSample(F, v, bobev, heat, reg, mask), params


def finite_difference_check(sample, params, config, step=1e-5, floor=1e-6):
    """Worst relative error between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    gradients that are zero up to rounding from dividing by ~0.
    """
    from lifsim.head import HeadParams, loss_and_grad

    C = params.channels
    theta = params.flatten()
    _, grad = loss_and_grad(params, sample, config)
    worst = 0.0
    for i in range(len(theta)):
        up, dn = theta.copy(), theta.copy()
        up[i] += step
        dn[i] -= step
        lu, _ = loss_and_grad(HeadParams.unflatten(up, C), sample, config)
        ld, _ = loss_and_grad(HeadParams.unflatten(dn, C), sample, config)
        num = (lu - ld) / (2 * step)
        worst = max(worst, abs(grad[i] - num) / max(abs(grad[i]), abs(num), floor))
    return worst


ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion(request):
    """Record one PASS/FAIL line per acceptance criterion and show it immediately."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(number: int, ok: bool, detail: str):
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
