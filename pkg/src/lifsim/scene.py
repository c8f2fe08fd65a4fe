"""Synthetic single-frame scenes and a seeded per-agent detector emulator.

The emulator stands in for the 2D image detector and the BEV 3D detector
of each agent. Detections are plain float arrays:

* 2D: ``(K, 5)`` rows of ``(x, y, w, h, s)`` in pixels, one array per camera
* 3D: ``(K, 8)`` rows of ``(x, y, z, w, h, l, yaw, s)``, ego frame, metres

Box sizes: ``w`` is the footprint width (across the heading), ``l`` the
length along the heading, ``h`` the height.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
from scipy import ndimage
from shapely.geometry import Polygon

from .geometry import (
    DEFAULT_OBJECT_HEIGHT,
    CameraRig,
    GridSpec,
    ego_to_bev_many,
    project_to_pixels,
    rotation_from_euler,
)

DEFAULT_CHANNELS = 16


class PlacementError(ValueError):
    """Raised when the requested boxes cannot be placed under the overlap cap."""


class Box2D(NamedTuple):
    x: float
    y: float
    w: float
    h: float
    s: float


class Box3D(NamedTuple):
    x: float
    y: float
    z: float
    w: float
    h: float
    l: float
    yaw: float
    s: float


class GroundTruthBox(NamedTuple):
    x: float
    y: float
    z: float
    w: float
    h: float
    l: float
    yaw: float
    object_id: int


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


def footprint_polygon(x, y, w, l, yaw) -> Polygon:
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = l / 2.0, w / 2.0
    corners = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
    return Polygon([(x + c * a - s * b, y + s * a + c * b) for a, b in corners])


def box_corners(boxes) -> np.ndarray:
    """(N, 8, 3) corners of boxes given as rows starting ``x, y, z, w, h, l, yaw``."""
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    x, y, z, w, h, l, yaw = (boxes[:, k] for k in range(7))
    sx = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * 0.5
    sy = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * 0.5
    sz = np.array([-1, -1, -1, -1, 1, 1, 1, 1]) * 0.5
    lx = l[:, None] * sx
    wy = w[:, None] * sy
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    cx = x[:, None] + c * lx - s * wy
    cy = y[:, None] + s * lx + c * wy
    cz = z[:, None] + h[:, None] * sz
    return np.stack([cx, cy, cz], axis=-1)


# --------------------------------------------------------------------------
# scene generation


@dataclass(frozen=True)
class CameraSpec:
    """Camera mounted on an agent; yaw is relative to the agent heading."""

    yaw: float = 0.0
    pitch: float = math.pi / 2
    focal: float = 300.0
    image_w: int = 704
    image_h: int = 256


@dataclass(frozen=True)
class SceneConfig:
    num_agents: int = 5
    num_boxes: int = 40
    box_half_extent: float = 60.0
    agent_half_extent: float = 40.0
    altitude_range: Tuple[float, float] = (50.0, 70.0)
    size_mean: Tuple[float, float, float] = (2.0, 1.5, 4.5)  # w, h, l
    size_jitter: float = 0.15
    object_height: float = DEFAULT_OBJECT_HEIGHT
    max_iou: float = 0.0
    max_attempts: int = 200
    pose_snap: float = 0.8
    cameras: Tuple[CameraSpec, ...] = (CameraSpec(),)

    def __post_init__(self):
        if self.num_agents < 1:
            raise ValueError("need at least one agent")
        if self.num_boxes < 0:
            raise ValueError("box count must be non-negative")
        lo, hi = self.altitude_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad altitude range {self.altitude_range}")


@dataclass(frozen=True)
class AgentPose:
    agent_id: int
    T_ego2w: np.ndarray  # (x, y, 0)
    altitude: float
    heading: float
    rigs: Tuple[CameraRig, ...]


@dataclass(frozen=True)
class Scene:
    boxes: np.ndarray  # (N, 7) world frame: x, y, z, w, h, l, yaw
    object_ids: np.ndarray  # (N,)
    agents: Tuple[AgentPose, ...]
    seed: int

    def ground_truth(self) -> List[GroundTruthBox]:
        return [GroundTruthBox(*map(float, b), int(i)) for b, i in zip(self.boxes, self.object_ids)]

    def to_bytes(self) -> bytes:
        parts = [self.boxes.tobytes(), self.object_ids.tobytes()]
        for a in self.agents:
            parts.append(a.T_ego2w.tobytes())
            parts.append(np.array([a.altitude, a.heading]).tobytes())
            for rig in a.rigs:
                parts.append(rig.R.tobytes() + rig.T.tobytes())
        return b"".join(parts)


def build_rigs(config: SceneConfig, position: np.ndarray, altitude: float, heading: float):
    rigs = []
    for cam in config.cameras:
        R = rotation_from_euler(heading + cam.yaw, cam.pitch)
        T = np.array([position[0], position[1], altitude])
        rigs.append(CameraRig(cam.focal, cam.focal, cam.image_w / 2.0, cam.image_h / 2.0,
                              R, T, cam.image_w, cam.image_h))
    return tuple(rigs)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Place non-overlapping boxes and agents; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    placed: List[Polygon] = []
    reach: List[Tuple[float, float, float]] = []
    boxes = []
    a = config.box_half_extent
    wm, hm, lm = config.size_mean
    for _ in range(config.num_boxes):
        for _attempt in range(config.max_attempts):
            x, y = rng.uniform(-a, a, size=2)
            yaw = wrap_angle(rng.uniform(-np.pi, np.pi))
            jitter = 1.0 + config.size_jitter * rng.uniform(-1.0, 1.0, size=3)
            w, h, l = wm * jitter[0], hm * jitter[1], lm * jitter[2]
            radius = 0.5 * math.hypot(w, l)
            poly = footprint_polygon(x, y, w, l, yaw)
            if all(math.hypot(x - ox, y - oy) >= radius + orad or _iou(poly, other) <= config.max_iou
                   for other, (ox, oy, orad) in zip(placed, reach)):
                placed.append(poly)
                reach.append((x, y, radius))
                boxes.append((x, y, config.object_height, w, h, l, yaw))
                break
        else:
            raise PlacementError(
                f"could not place box {len(boxes) + 1} of {config.num_boxes} "
                f"within IoU cap {config.max_iou} after {config.max_attempts} attempts")

    agents = []
    for agent_id in range(config.num_agents):
        xy = rng.uniform(-config.agent_half_extent, config.agent_half_extent, size=2)
        if config.pose_snap > 0:
            xy = np.round(xy / config.pose_snap) * config.pose_snap
        altitude = float(rng.uniform(*config.altitude_range))
        heading = float(rng.uniform(-np.pi, np.pi))
        T = np.array([xy[0], xy[1], 0.0])
        agents.append(AgentPose(agent_id, T, altitude, heading, build_rigs(config, T, altitude, heading)))

    box_arr = np.array(boxes, dtype=np.float64).reshape(-1, 7)
    return Scene(box_arr, np.arange(len(box_arr), dtype=np.int64), tuple(agents), int(seed))


def _iou(p: Polygon, q: Polygon) -> float:
    inter = p.intersection(q).area
    if inter <= 0.0:
        return 0.0
    return inter / (p.area + q.area - inter)


# --------------------------------------------------------------------------
# detector emulation


@dataclass(frozen=True)
class ScoreCalibration:
    """Monotone map from the true-detection indicator to a score distribution.

    True detections score ``N(tp_mean, tp_spread)``, false ones
    ``N(fp_mean, fp_spread)``; both clipped to ``[floor, 1]``.
    """

    tp_mean: float = 0.75
    tp_spread: float = 0.12
    fp_mean: float = 0.25
    fp_spread: float = 0.1
    floor: float = 0.02

    def __post_init__(self):
        if self.tp_mean < self.fp_mean:
            raise ValueError("calibration must score true detections at least as high as false ones")

    def __call__(self, is_true, rng: Optional[np.random.Generator] = None):
        is_true = np.asarray(is_true, dtype=bool)
        mean = np.where(is_true, self.tp_mean, self.fp_mean)
        spread = np.where(is_true, self.tp_spread, self.fp_spread)
        noise = rng.standard_normal(is_true.shape) if rng is not None else 0.0
        return np.clip(mean + spread * noise, self.floor, 1.0)


@dataclass(frozen=True)
class DetectorProfile:
    miss_rate: float = 0.0
    false_positive_rate_per_cell: float = 0.0
    center_noise_sigma: float = 0.0
    size_noise_sigma: float = 0.0
    yaw_noise_sigma: float = 0.0
    confidence_calibration: ScoreCalibration = field(default_factory=ScoreCalibration)
    # 2D path; None means "same as the 3D value"
    miss_rate_2d: Optional[float] = None
    # occlusion: explicit (start, width) sectors in radians, world bearing from
    # the agent's ground point; or ``occlusion_count`` random sectors per frame
    occluded_sectors: Tuple[Tuple[float, float], ...] = ()
    occlusion_count: int = 0
    occlusion_width: float = math.pi / 3
    max_range: Optional[float] = None
    feature_noise: float = 0.0
    splat_scale: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("miss_rate", "false_positive_rate_per_cell"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.miss_rate_2d is not None and not 0.0 <= self.miss_rate_2d <= 1.0:
            raise ValueError("miss_rate_2d must lie in [0, 1]")
        for name in ("center_noise_sigma", "size_noise_sigma", "yaw_noise_sigma", "feature_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def noiseless(cls, **overrides) -> "DetectorProfile":
        calib = ScoreCalibration(tp_mean=0.9, tp_spread=0.0, fp_mean=0.3, fp_spread=0.0)
        return cls(confidence_calibration=calib, **overrides)


@dataclass
class AgentObservation:
    agent_id: int
    T_ego2w: np.ndarray
    rigs: Tuple[CameraRig, ...]
    dets_2d: List[np.ndarray]  # per camera, (K, 5)
    dets_3d: np.ndarray  # (K, 8) ego frame
    score_map: np.ndarray  # (H, W) in [0, 1]
    features: np.ndarray  # (H, W, C)
    visible: np.ndarray  # (H, W) bool
    spec: GridSpec
    object_height: float = DEFAULT_OBJECT_HEIGHT
    # provenance for tests and diagnostics: object id or -1 for false positives
    ids_3d: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ids_2d: List[np.ndarray] = field(default_factory=list)


def agent_rng(seed: int, agent_id: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) ^ int(agent_id))


def _sectors(profile: DetectorProfile, rng: np.random.Generator):
    sectors = list(profile.occluded_sectors)
    for _ in range(profile.occlusion_count):
        sectors.append((float(rng.uniform(-np.pi, np.pi)), profile.occlusion_width))
    return sectors


def _occluded(bearings: np.ndarray, sectors) -> np.ndarray:
    blocked = np.zeros(bearings.shape, dtype=bool)
    for start, width in sectors:
        blocked |= np.mod(bearings - start, 2 * np.pi) < width
    return blocked


def visibility_of_points(agent: AgentPose, points_w: np.ndarray, sectors, max_range=None) -> np.ndarray:
    points_w = np.atleast_2d(points_w)
    seen = np.zeros(len(points_w), dtype=bool)
    for rig in agent.rigs:
        uv, depth = project_to_pixels(rig, points_w)
        seen |= ((depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < rig.image_w)
                 & (uv[:, 1] >= 0) & (uv[:, 1] < rig.image_h))
    dx = points_w[:, 0] - agent.T_ego2w[0]
    dy = points_w[:, 1] - agent.T_ego2w[1]
    seen &= ~_occluded(np.arctan2(dy, dx), sectors)
    if max_range is not None:
        seen &= np.hypot(dx, dy) <= max_range
    return seen


def observe(scene: Scene, agent_id: int, profile: DetectorProfile, spec: GridSpec,
            channels: int = DEFAULT_CHANNELS, seed: Optional[int] = None) -> AgentObservation:
    """Emulate agent ``agent_id``'s 2D and 3D detectors on ``scene``.

    The RNG stream is ``seed ^ agent_id`` (``seed`` defaults to the profile's),
    so observations do not depend on the order agents are processed in.
    """
    agent = scene.agents[agent_id]
    rng = agent_rng(profile.seed if seed is None else seed, agent_id)
    calib = profile.confidence_calibration
    T = agent.T_ego2w
    h_obj = scene.boxes[0, 2] if len(scene.boxes) else DEFAULT_OBJECT_HEIGHT
    sectors = _sectors(profile, rng)

    # visibility of every BEV cell centre at object height
    mm, nn = np.meshgrid(np.arange(spec.H), np.arange(spec.W), indexing="ij")
    cx, cy = spec.cell_center(mm.ravel(), nn.ravel())
    cells_w = np.stack([cx + T[0], cy + T[1], np.full(cx.shape, h_obj)], axis=-1)
    visible = visibility_of_points(agent, cells_w, sectors, profile.max_range).reshape(spec.H, spec.W)

    # ground-truth visibility: in range of the ego grid and seen by a camera
    boxes = scene.boxes
    if len(boxes):
        ego_xyz = boxes[:, :3] - T
        _, in_grid = ego_to_bev_many(ego_xyz, spec)
        vis = in_grid & visibility_of_points(agent, boxes[:, :3], sectors, profile.max_range)
    else:
        vis = np.zeros(0, dtype=bool)
    vis_idx = np.flatnonzero(vis)

    # one perturbation per visible object, shared by the 2D and 3D paths
    n_vis = len(vis_idx)
    noisy = boxes[vis_idx].copy()
    noisy[:, 0:3] += profile.center_noise_sigma * rng.standard_normal((n_vis, 3))
    noisy[:, 3:6] = np.maximum(noisy[:, 3:6] + profile.size_noise_sigma * rng.standard_normal((n_vis, 3)), 0.1)
    noisy[:, 6] = wrap_angle(noisy[:, 6] + profile.yaw_noise_sigma * rng.standard_normal(n_vis))
    keep_3d = rng.random(n_vis) >= profile.miss_rate
    miss_2d = profile.miss_rate if profile.miss_rate_2d is None else profile.miss_rate_2d
    keep_2d = rng.random(n_vis) >= miss_2d
    tp_scores_3d = calib(np.ones(n_vis, dtype=bool), rng)
    tp_scores_2d = calib(np.ones(n_vis, dtype=bool), rng)

    # false positives: Bernoulli per visible cell, uniform inside the cell
    fp_cells = np.flatnonzero(visible.ravel() & (rng.random(spec.H * spec.W) < profile.false_positive_rate_per_cell))
    n_fp = len(fp_cells)
    fp = np.zeros((n_fp, 7))
    if n_fp:
        fx, fy = spec.cell_center(fp_cells // spec.W, fp_cells % spec.W)
        fp[:, 0] = fx + T[0] + spec.resolution * rng.uniform(-0.5, 0.5, n_fp)
        fp[:, 1] = fy + T[1] + spec.resolution * rng.uniform(-0.5, 0.5, n_fp)
        fp[:, 2] = h_obj
        wm, hm, lm = np.median(boxes[:, 3:6], axis=0) if len(boxes) else (2.0, 1.5, 4.5)
        fp[:, 3:6] = np.array([wm, hm, lm]) * (1.0 + 0.1 * rng.standard_normal((n_fp, 3)))
        fp[:, 3:6] = np.maximum(fp[:, 3:6], 0.1)
        fp[:, 6] = wrap_angle(rng.uniform(-np.pi, np.pi, n_fp))
    fp_scores_3d = calib(np.zeros(n_fp, dtype=bool), rng)
    fp_scores_2d = calib(np.zeros(n_fp, dtype=bool), rng)

    # 3D detections in ego frame
    world_3d = np.concatenate([noisy[keep_3d], fp], axis=0)
    scores_3d = np.concatenate([tp_scores_3d[keep_3d], fp_scores_3d])
    dets_3d = np.zeros((len(world_3d), 8))
    dets_3d[:, :7] = world_3d
    dets_3d[:, :3] -= T
    dets_3d[:, 7] = scores_3d
    ids_3d = np.concatenate([scene.object_ids[vis_idx][keep_3d], -np.ones(n_fp, dtype=np.int64)])

    # 2D detections: perturbed boxes projected into each camera
    world_2d = np.concatenate([noisy[keep_2d], fp], axis=0)
    scores_2d = np.concatenate([tp_scores_2d[keep_2d], fp_scores_2d])
    src_ids = np.concatenate([scene.object_ids[vis_idx][keep_2d], -np.ones(n_fp, dtype=np.int64)])
    dets_2d, ids_2d = [], []
    for rig in agent.rigs:
        d2, i2 = _project_boxes(rig, world_2d, scores_2d, src_ids)
        dets_2d.append(d2)
        ids_2d.append(i2)

    score_map = render_score_map(dets_3d, spec, profile.splat_scale)
    features = encode_features(score_map, visible, channels)
    if profile.feature_noise > 0:
        features = features + profile.feature_noise * rng.standard_normal(features.shape)

    return AgentObservation(
        agent_id=agent_id, T_ego2w=T.copy(), rigs=agent.rigs, dets_2d=dets_2d, dets_3d=dets_3d,
        score_map=score_map, features=features, visible=visible, spec=spec,
        object_height=float(h_obj), ids_3d=ids_3d, ids_2d=ids_2d)


def _project_boxes(rig: CameraRig, boxes_w: np.ndarray, scores: np.ndarray, ids: np.ndarray):
    if len(boxes_w) == 0:
        return np.zeros((0, 5)), np.zeros(0, dtype=np.int64)
    uv, depth = project_to_pixels(rig, boxes_w[:, :3])
    inside = ((depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < rig.image_w)
              & (uv[:, 1] >= 0) & (uv[:, 1] < rig.image_h))
    corners = box_corners(boxes_w[inside])
    out = np.zeros((int(inside.sum()), 5))
    if len(out):
        cuv, cdepth = project_to_pixels(rig, corners.reshape(-1, 3))
        cuv = cuv.reshape(-1, 8, 2)
        out[:, 0:2] = uv[inside]
        out[:, 2] = np.maximum(cuv[:, :, 0].max(1) - cuv[:, :, 0].min(1), 1.0)
        out[:, 3] = np.maximum(cuv[:, :, 1].max(1) - cuv[:, :, 1].min(1), 1.0)
        out[:, 4] = scores[inside]
    return out, ids[inside]


def splat_sigma_cells(w, l, resolution: float, splat_scale: float):
    return np.maximum(1.0, splat_scale * np.sqrt(np.asarray(w) * np.asarray(l)) / resolution)


def splat_peak_factor(sigma_cells) -> float:
    """Lower bound on S / score at a detection's own cell (centre at most half a cell off per axis)."""
    return float(np.exp(-0.25 / np.asarray(sigma_cells) ** 2))


def render_score_map(dets_3d: np.ndarray, spec: GridSpec, splat_scale: float = 0.25) -> np.ndarray:
    """Isotropic Gaussian splats centred on each detection, peak = score.

    Splats are evaluated at cell centres and combine by maximum; the cell
    holding a detection's centre gets at least ``score * splat_peak_factor``.
    """
    S = np.zeros(spec.shape)
    if len(dets_3d) == 0:
        return S
    cells, ok = ego_to_bev_many(dets_3d[:, :3], spec)
    sig = splat_sigma_cells(dets_3d[:, 3], dets_3d[:, 5], spec.resolution, splat_scale)
    # continuous centre in cell units
    fm = (dets_3d[:, 1] - spec.extent_min[1]) / spec.resolution - 0.5
    fn = (dets_3d[:, 0] - spec.extent_min[0]) / spec.resolution - 0.5
    for k in np.flatnonzero(ok):
        m, n = cells[k]
        sg = sig[k]
        r = int(math.ceil(3 * sg))
        m0, m1 = max(0, m - r), min(spec.H, m + r + 1)
        n0, n1 = max(0, n - r), min(spec.W, n + r + 1)
        dm = np.arange(m0, m1) - fm[k]
        dn = np.arange(n0, n1) - fn[k]
        g = dets_3d[k, 7] * np.exp(-(dm[:, None] ** 2 + dn[None, :] ** 2) / (2 * sg * sg))
        np.maximum(S[m0:m1, n0:n1], g, out=S[m0:m1, n0:n1])
    return S


def encode_features(score_map: np.ndarray, visible: np.ndarray, channels: int = DEFAULT_CHANNELS) -> np.ndarray:
    """Fixed local encoding of the score map standing in for a BEV backbone."""
    S = score_map
    mean3 = ndimage.uniform_filter(S, 3, mode="constant")
    max3 = ndimage.maximum_filter(S, 3, mode="constant")
    bank = [
        S,
        S * S,
        np.sqrt(S),
        max3,
        mean3,
        ndimage.uniform_filter(S, 5, mode="constant"),
        ndimage.gaussian_filter(S, 2.0, mode="constant"),
        S - mean3,
        np.where(S >= max3, S, 0.0),
        np.pad(S, ((1, 0), (0, 0)))[:-1],
        np.pad(S, ((0, 1), (0, 0)))[1:],
        np.pad(S, ((0, 0), (1, 0)))[:, :-1],
        np.pad(S, ((0, 0), (0, 1)))[:, 1:],
        visible.astype(np.float64),
        S * visible,
        np.zeros_like(S),
    ]
    sigma = 3.0
    while len(bank) < channels:
        bank.append(ndimage.gaussian_filter(S, sigma, mode="constant"))
        sigma += 1.0
    return np.stack(bank[:channels], axis=-1)

