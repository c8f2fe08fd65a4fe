"""Frame pipeline: observe, communicate, fuse, decode, evaluate.

Frames are independent work units with seeds derived from the scenario
seed and the frame index, so results do not depend on the worker count.
The ego agent rotates with the frame index.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from . import comms
from .comms import CommPolicy, DetectionMessage
from .fusion import BOBEV_CHANNELS, dedupe_received, lif_inputs, suppress_background
from .geometry import ego_to_bev_many
from .head import (
    HeadParams,
    HeadSample,
    TrainResult,
    decode,
    forward,
    fused_grid,
    render_targets,
    train,
)
from .metrics import EvalReport, evaluate
from .scenario import Scenario
from .scene import AgentObservation, Scene, generate_scene, observe

log = logging.getLogger(__name__)

STRATEGIES = ("no-fusion", "late-fusion", "lif-base", "lif-full")
HEAD_STRATEGIES = ("no-fusion", "lif-base", "lif-full")


@dataclass(frozen=True)
class Strategy:
    kind: str
    policy: CommPolicy = field(default_factory=CommPolicy)
    params: Optional[HeadParams] = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {STRATEGIES}")

    @property
    def uses_vpe(self) -> bool:
        return self.kind == "lif-full"

    @property
    def uses_bobev(self) -> bool:
        return self.kind in ("lif-base", "lif-full")


def frame_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass
class Frame:
    index: int
    seed: int
    scene: Scene
    observations: List[AgentObservation]
    candidates: List[comms.Candidates]

    @property
    def ego_id(self) -> int:
        return self.index % len(self.observations)


def simulate_frame(scenario: Scenario, index: int, base_seed: Optional[int] = None) -> Frame:
    seed = frame_seed(scenario.seed if base_seed is None else base_seed, index)
    scene = generate_scene(scenario.scene, seed)
    obs = [observe(scene, a, scenario.profile(a), scenario.grid, scenario.channels, seed=seed)
           for a in range(len(scene.agents))]
    return Frame(index, seed, scene, obs, [comms.candidates(o) for o in obs])


def ego_ground_truth(scene: Scene, ego: AgentObservation) -> np.ndarray:
    """GT boxes (x, y, z, w, h, l, yaw) in the ego frame, restricted to the ego grid."""
    if len(scene.boxes) == 0:
        return np.zeros((0, 7))
    boxes = scene.boxes.copy()
    boxes[:, :3] -= ego.T_ego2w
    _, ok = ego_to_bev_many(boxes[:, :2], ego.spec)
    return boxes[ok]


# --------------------------------------------------------------------------
# communication


@dataclass
class Exchange:
    messages: List[DetectionMessage]
    preround_bytes: int
    ambiguous: int = 0

    @property
    def payload_bytes(self) -> int:
        return sum(comms.payload_bytes(m) for m in self.messages)


def exchange(frame: Frame, ego_id: int, policy: CommPolicy, with_2d: bool = True) -> Exchange:
    """Every collaborator selects what to send to the ego under ``policy``."""
    obs = frame.observations
    ego = obs[ego_id]
    msgs, ambiguous, preround = [], 0, 0
    U_i = comms.uncertainty_map(ego.score_map, policy.phi_i)
    for j, sender in enumerate(obs):
        if j == ego_id:
            continue
        cand = frame.candidates[j]
        if not with_2d:
            cand = replace(cand, points_2d=cand.points_2d[:0], cells_2d=cand.cells_2d[:0])
        if policy.kind == "uncertainty":
            preround += comms.score_map_bytes(ego.spec)
            U_i_at_j = comms.align_map(U_i, ego.T_ego2w, sender.T_ego2w, ego.spec, fill=0.0)
            U_j = comms.uncertainty_map(sender.score_map, policy.phi_i)
            R = comms.demand_map(U_i_at_j, U_j)
            msg = comms.select_shared(sender, R, policy, U_i=U_i_at_j, receiver_id=ego_id,
                                      timestamp=float(frame.index), cand=cand)
        else:
            msg = comms.objectness_select(sender, sender.score_map, policy.phi_dem, policy.budget_bytes,
                                          receiver_id=ego_id, timestamp=float(frame.index), cand=cand)
        ambiguous += comms.ambiguous_items(msg, sender, policy.phi_i)
        msgs.append(msg)
    return Exchange(msgs, preround, ambiguous)


def unpack(messages: Sequence[DetectionMessage], ego: AgentObservation):
    """Received records in the ego frame: 2D points (x, y, s), 3D boxes, background (x, y, c)."""
    T = ego.T_ego2w
    pts, boxes, bg = [], [], []
    for msg in messages:
        p = msg.points_2d.astype(np.float64)
        p[:, :2] -= T[:2]
        pts.append(p)
        b = msg.boxes_3d.astype(np.float64)
        b[:, :3] += msg.pose - T
        boxes.append(b)
        g = msg.background.astype(np.float64)
        g[:, :2] -= T[:2]
        bg.append(g)
    cat = lambda xs, c: np.concatenate(xs, axis=0) if xs else np.zeros((0, c))
    return cat(pts, 3), boxes, cat(bg, 3)


# --------------------------------------------------------------------------
# frames


@dataclass
class FrameResult:
    predictions: np.ndarray
    ground_truth: np.ndarray
    payload_bytes: int = 0
    preround_bytes: int = 0
    items_2d: int = 0
    items_3d: int = 0
    items_background: int = 0
    ambiguous: int = 0


def head_inputs(frame: Frame, strategy: Strategy, ego_id: int, policy: Optional[CommPolicy] = None,
                dedupe_radius: float = 1.0):
    """Head inputs for the ego plus the exchange that produced them."""
    ego = frame.observations[ego_id]
    if strategy.kind == "no-fusion":
        zeros = np.zeros(ego.spec.shape)
        return (ego.features, zeros, np.zeros(ego.spec.shape + (BOBEV_CHANNELS,))), None, np.zeros((0, 3))
    ex = exchange(frame, ego_id, policy or strategy.policy, with_2d=strategy.uses_vpe)
    pts, box_sets, bg = unpack(ex.messages, ego)
    boxes = dedupe_received(box_sets, dedupe_radius)
    inputs = lif_inputs(ego.features, pts, boxes, ego.spec, strategy.uses_vpe, strategy.uses_bobev)
    return inputs, ex, bg


def run_frame(frame: Frame, strategy: Strategy, ego_id: Optional[int] = None,
              peak_threshold: float = 0.05, dedupe_radius: float = 1.0) -> FrameResult:
    ego_id = frame.ego_id if ego_id is None else ego_id
    ego = frame.observations[ego_id]
    gt = ego_ground_truth(frame.scene, ego)

    if strategy.kind == "late-fusion":
        msgs = [DetectionMessage(j, ego_id, float(frame.index), o.T_ego2w, boxes_3d=frame.candidates[j].boxes_3d)
                for j, o in enumerate(frame.observations) if j != ego_id]
        _, box_sets, _ = unpack(msgs, ego)
        preds = dedupe_received([ego.dets_3d] + box_sets, dedupe_radius)
        _, ok = ego_to_bev_many(preds[:, :2], ego.spec)
        preds = preds[ok]
        nbytes = sum(comms.payload_bytes(m) for m in msgs)
        return FrameResult(preds, gt, nbytes, 0, 0, sum(len(m.boxes_3d) for m in msgs), 0, 0)

    if strategy.params is None:
        raise ValueError(f"strategy {strategy.kind} needs trained head parameters")
    (F, v, bobev), ex, bg = head_inputs(frame, strategy, ego_id, dedupe_radius=dedupe_radius)
    heat, reg = forward(fused_grid(F, v, bobev, strategy.params.Q), strategy.params)
    preds = decode(heat, reg, ego.spec, peak_threshold)
    if len(bg):
        support = (bobev[..., 4] > 0) | (v > 0)
        preds = suppress_background(preds, bg, support, ego.spec, strategy.policy.phi_i)
    if ex is None:
        return FrameResult(preds, gt)
    return FrameResult(preds, gt, ex.payload_bytes, ex.preround_bytes,
                       sum(len(m.points_2d) for m in ex.messages),
                       sum(len(m.boxes_3d) for m in ex.messages),
                       sum(len(m.background) for m in ex.messages), ex.ambiguous)


# --------------------------------------------------------------------------
# suites and sweeps


def _map_frames(fn, indices, threads: int):
    if threads <= 1:
        return [fn(i) for i in indices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, indices))


@dataclass
class SweepPoint:
    strategy: str
    policy: CommPolicy
    report: EvalReport
    frames: int
    mean_payload_bytes: float
    mean_preround_bytes: float
    items_2d: int
    items_3d: int
    items_background: int
    ambiguous: int
    total_payload_bytes: int


def _reduce(strategy: str, policy: CommPolicy, results: Sequence[FrameResult]) -> SweepPoint:
    report = evaluate([(r.predictions, r.ground_truth) for r in results])
    n = len(results)
    total = sum(r.payload_bytes for r in results)
    return SweepPoint(strategy, policy, report, n, total / n, sum(r.preround_bytes for r in results) / n,
                      sum(r.items_2d for r in results), sum(r.items_3d for r in results),
                      sum(r.items_background for r in results), sum(r.ambiguous for r in results), total)


def run_settings(scenario: Scenario, settings: Sequence[Strategy], threads: int = 1,
                 frames: Optional[int] = None) -> List[SweepPoint]:
    """Evaluate every strategy/policy pair in ``settings`` on one pass over the frame suite."""
    if not settings:
        raise ValueError("sweep needs at least one setting")
    n = scenario.frames if frames is None else frames

    def work(i):
        t0 = time.perf_counter()
        frame = simulate_frame(scenario, i)
        t1 = time.perf_counter()
        out = [run_frame(frame, s, peak_threshold=scenario.peak_threshold,
                         dedupe_radius=scenario.dedupe_radius) for s in settings]
        log.debug("frame %d: simulate %.3fs, %d settings %.3fs", i, t1 - t0, len(settings),
                  time.perf_counter() - t1)
        return out

    per_frame = _map_frames(work, range(n), threads)
    return [_reduce(s.kind, s.policy, [fr[k] for fr in per_frame]) for k, s in enumerate(settings)]


def run_suite(scenario: Scenario, strategy: Strategy, policies: Sequence[CommPolicy],
              threads: int = 1, frames: Optional[int] = None) -> List[SweepPoint]:
    """Evaluate ``strategy`` under each policy on the scenario's frame suite."""
    if not policies:
        raise ValueError("sweep needs at least one setting")
    return run_settings(scenario, [replace(strategy, policy=p) for p in policies], threads, frames)


def build_sample(frame: Frame, strategy: Strategy, policy: CommPolicy, dedupe_radius: float = 1.0) -> HeadSample:
    ego_id = frame.ego_id
    (F, v, bobev), _, _ = head_inputs(frame, strategy, ego_id, policy, dedupe_radius)
    heat, reg, mask = render_targets(ego_ground_truth(frame.scene, frame.observations[ego_id]),
                                     frame.observations[ego_id].spec)
    return HeadSample(F, v, bobev, heat, reg, mask)


def train_pipeline(scenario: Scenario, kind: str, threads: int = 1,
                   frames: Optional[int] = None) -> TrainResult:
    """Train a head for ``kind`` on freshly simulated training frames."""
    if kind not in HEAD_STRATEGIES:
        raise ValueError(f"strategy {kind!r} has no trainable head")
    strategy = Strategy(kind, scenario.comm)
    policy = replace(scenario.comm, phi_dem=scenario.train_phi_dem, budget_bytes=None,
                     background_priority=False)
    n = scenario.train_frames if frames is None else frames

    def work(i):
        frame = simulate_frame(scenario, i, base_seed=scenario.train_seed)
        return build_sample(frame, strategy, policy, scenario.dedupe_radius)

    samples = _map_frames(work, range(n), threads)
    return train(samples, scenario.train)
