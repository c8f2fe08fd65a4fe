"""Uncertainty-gated message selection, the objectness baseline, and the wire format.

Wire layout (little-endian)::

    header (47 bytes)
      u8    version
      u32   sender_id
      u32   receiver_id
      f64   timestamp
      f64x3 sender pose T_ego2w
      u16   K   2D points
      u16   K3  3D boxes
      u16   KB  background assertions
    payload
      K  x (f32 x, f32 y, f32 s)                       world frame
      K3 x (f32 x, y, z, w, h, l, yaw, s)              sender ego frame
      KB x (f32 x, f32 y, f32 certainty)               world frame

Detection payload bytes are ``12 K + 32 K3`` (+ ``12 KB`` for background
assertions); the header is fixed-size and not counted.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from .geometry import GridSpec, ego_to_bev_many, pixel_ray, rays_ground_intersect
from .scene import AgentObservation

WIRE_VERSION = 1
HEADER = struct.Struct("<BIId3dHHH")
HEADER_BYTES = HEADER.size
POINT_BYTES = 3 * 4
BOX_BYTES = 8 * 4
MAX_COUNT = 0xFFFF

DEFAULT_PHI = 0.15

# item kinds, also the tie-break order inside one cell
KIND_3D = 0
KIND_2D = 1


class WireError(ValueError):
    pass


@dataclass(frozen=True)
class CommPolicy:
    kind: Literal["uncertainty", "objectness"] = "uncertainty"
    phi_i: float = DEFAULT_PHI
    phi_dem: float = 0.0
    budget_bytes: Optional[int] = None
    background_priority: bool = False
    # sender is "certain" where |S_j - phi_i| exceeds this margin
    background_margin: float = 0.1
    # ego is "uncertain" where U_i reaches this level
    ego_uncertain: float = 0.8

    def __post_init__(self):
        for name in ("phi_i", "phi_dem", "background_margin", "ego_uncertain"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.budget_bytes is not None and self.budget_bytes < 0:
            raise ValueError("budget_bytes must be non-negative")


def _f32(a, cols):
    arr = np.asarray(a, dtype=np.float32).reshape(-1, cols)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DetectionMessage:
    sender_id: int
    receiver_id: int
    timestamp: float
    pose: np.ndarray
    points_2d: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.float32))
    boxes_3d: np.ndarray = field(default_factory=lambda: np.zeros((0, 8), np.float32))
    background: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.float32))

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64).reshape(3)
        pose.setflags(write=False)
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "points_2d", _f32(self.points_2d, 3))
        object.__setattr__(self, "boxes_3d", _f32(self.boxes_3d, 8))
        object.__setattr__(self, "background", _f32(self.background, 3))
        for name, arr, col in (("points_2d", self.points_2d, 2), ("boxes_3d", self.boxes_3d, 7),
                               ("background", self.background, 2)):
            if len(arr) > MAX_COUNT:
                raise WireError(f"{name} has {len(arr)} records; the wire limit is {MAX_COUNT}")
            if len(arr) and (arr[:, col].min() < 0 or arr[:, col].max() > 1):
                raise ValueError(f"{name} confidences must lie in [0, 1]")

    def __eq__(self, other):
        if not isinstance(other, DetectionMessage):
            return NotImplemented
        return (self.sender_id == other.sender_id and self.receiver_id == other.receiver_id
                and self.timestamp == other.timestamp
                and np.array_equal(self.pose, other.pose)
                and np.array_equal(self.points_2d, other.points_2d)
                and np.array_equal(self.boxes_3d, other.boxes_3d)
                and np.array_equal(self.background, other.background))

    __hash__ = None

    @property
    def is_empty(self) -> bool:
        return not (len(self.points_2d) or len(self.boxes_3d) or len(self.background))


def payload_bytes(msg: DetectionMessage) -> int:
    return POINT_BYTES * len(msg.points_2d) + BOX_BYTES * len(msg.boxes_3d) + POINT_BYTES * len(msg.background)


def comm_volume_log2(msg_or_bytes) -> Optional[float]:
    """log2 of the payload size; None for an empty channel (instead of -inf)."""
    b = msg_or_bytes if isinstance(msg_or_bytes, (int, np.integer)) else payload_bytes(msg_or_bytes)
    if b <= 0:
        return None
    return math.log2(b)


def encode(msg: DetectionMessage) -> bytes:
    head = HEADER.pack(WIRE_VERSION, msg.sender_id, msg.receiver_id, float(msg.timestamp),
                       *msg.pose.tolist(), len(msg.points_2d), len(msg.boxes_3d), len(msg.background))
    le = np.dtype("<f4")
    return b"".join([head, msg.points_2d.astype(le).tobytes(), msg.boxes_3d.astype(le).tobytes(),
                     msg.background.astype(le).tobytes()])


def decode(data: bytes) -> DetectionMessage:
    if len(data) < HEADER_BYTES:
        raise WireError(f"message shorter than the {HEADER_BYTES}-byte header")
    version, sender, receiver, ts, px, py, pz, k2, k3, kb = HEADER.unpack_from(data, 0)
    if version != WIRE_VERSION:
        raise WireError(f"unsupported wire version {version}")
    expected = HEADER_BYTES + POINT_BYTES * k2 + BOX_BYTES * k3 + POINT_BYTES * kb
    if len(data) != expected:
        raise WireError(f"length {len(data)} does not match header counts (expected {expected})")
    flat = np.frombuffer(data, dtype="<f4", offset=HEADER_BYTES).astype(np.float32)
    a, b = 3 * k2, 3 * k2 + 8 * k3
    return DetectionMessage(sender, receiver, ts, (px, py, pz),
                            flat[:a].reshape(-1, 3), flat[a:b].reshape(-1, 8), flat[b:].reshape(-1, 3))


# --------------------------------------------------------------------------
# maps


def uncertainty_map(S: np.ndarray, phi_i: float = DEFAULT_PHI) -> np.ndarray:
    return 1.0 - np.abs(np.asarray(S, dtype=np.float64) - phi_i)


def demand_map(U_i: np.ndarray, U_j: np.ndarray) -> np.ndarray:
    if np.shape(U_i) != np.shape(U_j):
        raise ValueError(f"map shapes differ: {np.shape(U_i)} vs {np.shape(U_j)}")
    return np.asarray(U_i) * (1.0 - np.asarray(U_j))


def align_map(values: np.ndarray, src_pose, dst_pose, spec: GridSpec, fill: float = 0.0) -> np.ndarray:
    """Resample an ego-frame map from agent ``src`` into agent ``dst``'s grid.

    Frames differ by a translation only; the offset is rounded to whole cells
    (exact when poses are snapped to the grid resolution).
    """
    shift = (np.asarray(dst_pose, dtype=np.float64) - np.asarray(src_pose, dtype=np.float64))[:2] / spec.resolution
    dn, dm = (int(v) for v in np.round(shift))
    out = np.full(values.shape, fill, dtype=np.float64)
    H, W = values.shape[:2]
    # dst cell (m, n) sits at src cell (m + dm, n + dn)
    m0, m1 = max(0, -dm), min(H, H - dm)
    n0, n1 = max(0, -dn), min(W, W - dn)
    if m0 < m1 and n0 < n1:
        out[m0:m1, n0:n1] = values[m0 + dm:m1 + dm, n0 + dn:n1 + dn]
    return out


# --------------------------------------------------------------------------
# candidate items


@dataclass
class Candidates:
    """Everything agent j could send, each item tagged with its BEV cell in j's grid."""

    points_2d: np.ndarray  # (K, 3) world x, y, s
    cells_2d: np.ndarray  # (K, 2)
    boxes_3d: np.ndarray  # (K3, 8) ego frame
    cells_3d: np.ndarray  # (K3, 2)


def project_2d_detections(obs: AgentObservation) -> np.ndarray:
    """Lift every 2D detection centre onto the object plane: (K, 3) world x, y, s."""
    out = []
    for rig, dets in zip(obs.rigs, obs.dets_2d):
        if len(dets) == 0:
            continue
        origin, dirs = pixel_ray(rig, dets[:, 0], dets[:, 1])
        pts, ok = rays_ground_intersect(origin, dirs, obs.object_height)
        out.append(np.column_stack([pts[ok, 0], pts[ok, 1], dets[ok, 4]]))
    if not out:
        return np.zeros((0, 3))
    return np.concatenate(out, axis=0)


def candidates(obs: AgentObservation, points_2d: Optional[np.ndarray] = None) -> Candidates:
    spec = obs.spec
    pts = project_2d_detections(obs) if points_2d is None else points_2d
    ego = np.column_stack([pts[:, 0] - obs.T_ego2w[0], pts[:, 1] - obs.T_ego2w[1]]) if len(pts) else np.zeros((0, 2))
    c2, ok2 = ego_to_bev_many(ego, spec)
    c3, ok3 = ego_to_bev_many(obs.dets_3d[:, :2], spec) if len(obs.dets_3d) else (np.zeros((0, 2), np.int64), np.zeros(0, bool))
    return Candidates(pts[ok2], c2[ok2], obs.dets_3d[ok3], c3[ok3])


def _ranked_prefix(values, cells, kinds, order_idx, budget, item_bytes, W):
    """Order items by value desc, then row-major cell, kind, index; admit a budgeted prefix."""
    flat = cells[:, 0] * W + cells[:, 1]
    order = np.lexsort((order_idx, kinds, flat, -values))
    if budget is None:
        return order, 0
    cum = np.cumsum(item_bytes[order])
    n = int(np.searchsorted(cum, budget, side="right"))
    used = int(cum[n - 1]) if n else 0
    return order[:n], used


def _assemble(obs, receiver_id, timestamp, cand: Candidates, chosen, kinds, index, background=None):
    sel = chosen
    pick2 = np.sort(index[sel][kinds[sel] == KIND_2D])
    pick3 = np.sort(index[sel][kinds[sel] == KIND_3D])
    return DetectionMessage(obs.agent_id, receiver_id, timestamp, obs.T_ego2w,
                            cand.points_2d[pick2], cand.boxes_3d[pick3],
                            np.zeros((0, 3)) if background is None else background)


def _item_table(cand: Candidates):
    n2, n3 = len(cand.points_2d), len(cand.boxes_3d)
    cells = np.concatenate([cand.cells_3d, cand.cells_2d], axis=0).reshape(-1, 2)
    kinds = np.concatenate([np.full(n3, KIND_3D), np.full(n2, KIND_2D)])
    index = np.concatenate([np.arange(n3), np.arange(n2)])
    item_bytes = np.where(kinds == KIND_3D, BOX_BYTES, POINT_BYTES)
    return cells, kinds, index, item_bytes


def select_shared(obs_j: AgentObservation, R_ij: np.ndarray, policy: CommPolicy,
                  U_i: Optional[np.ndarray] = None, receiver_id: int = -1, timestamp: float = 0.0,
                  cand: Optional[Candidates] = None) -> DetectionMessage:
    """Uncertainty-driven selection of agent j's detections for receiver i.

    An item is eligible when the demand at its cell exceeds ``phi_dem``.
    With a budget, eligible items are admitted in order of decreasing demand
    (ties: row-major cell, 3D before 2D, index) until the next one no longer
    fits. With ``background_priority`` and a budget, the leftover bytes carry
    certain-background assertions for cells the receiver is unsure about.
    ``U_i`` (aligned to j's grid) is required for the background tier.
    """
    cand = candidates(obs_j) if cand is None else cand
    cells, kinds, index, item_bytes = _item_table(cand)
    R = np.asarray(R_ij)
    values = R[cells[:, 0], cells[:, 1]] if len(cells) else np.zeros(0)
    eligible = values > policy.phi_dem
    order, used = _ranked_prefix(values[eligible], cells[eligible], kinds[eligible],
                                 index[eligible], policy.budget_bytes, item_bytes[eligible], R.shape[1])
    chosen = np.flatnonzero(eligible)[order]

    background = None
    if policy.background_priority and policy.budget_bytes is not None:
        if U_i is None:
            raise ValueError("background priority needs the receiver's uncertainty map")
        remaining = policy.budget_bytes - used
        background = background_assertions(obs_j, R, U_i, policy, remaining // POINT_BYTES)
    return _assemble(obs_j, receiver_id, timestamp, cand, chosen, kinds, index, background)


def background_candidates(obs_j: AgentObservation, U_i: np.ndarray, policy: CommPolicy) -> np.ndarray:
    """Mask of cells j may assert as certain background for receiver i."""
    S_j = obs_j.score_map
    certainty = np.abs(S_j - policy.phi_i)
    return (obs_j.visible & (S_j < policy.phi_i) & (certainty > policy.background_margin)
            & (np.asarray(U_i) >= policy.ego_uncertain))


def background_assertions(obs_j: AgentObservation, R_ij: np.ndarray, U_i: np.ndarray,
                          policy: CommPolicy, max_items: int) -> np.ndarray:
    """(KB, 3) world-frame (x, y, certainty) records ranked by demand, row-major ties."""
    if max_items <= 0:
        return np.zeros((0, 3))
    mask = background_candidates(obs_j, U_i, policy)
    flat = np.flatnonzero(mask.ravel())
    if len(flat) == 0:
        return np.zeros((0, 3))
    vals = R_ij.ravel()[flat]
    order = np.lexsort((flat, -vals))[:max_items]
    picked = flat[order]
    spec = obs_j.spec
    m, n = picked // spec.W, picked % spec.W
    x, y = spec.cell_center(m, n)
    certainty = 1.0 - uncertainty_map(obs_j.score_map.ravel()[picked], policy.phi_i)
    return np.column_stack([x + obs_j.T_ego2w[0], y + obs_j.T_ego2w[1], certainty])


def objectness_select(obs_j: AgentObservation, S_j: np.ndarray, threshold: float,
                      budget_bytes: Optional[int] = None, receiver_id: int = -1,
                      timestamp: float = 0.0, cand: Optional[Candidates] = None) -> DetectionMessage:
    """Baseline: keep items whose cell score reaches ``threshold``, ranked by score."""
    cand = candidates(obs_j) if cand is None else cand
    cells, kinds, index, item_bytes = _item_table(cand)
    S = np.asarray(S_j)
    values = S[cells[:, 0], cells[:, 1]] if len(cells) else np.zeros(0)
    eligible = values >= threshold
    order, _ = _ranked_prefix(values[eligible], cells[eligible], kinds[eligible],
                              index[eligible], budget_bytes, item_bytes[eligible], S.shape[1])
    chosen = np.flatnonzero(eligible)[order]
    return _assemble(obs_j, receiver_id, timestamp, cand, chosen, kinds, index)


def score_map_bytes(spec: GridSpec) -> int:
    """Pre-round cost of sending one float32 score map."""
    return 4 * spec.H * spec.W


def ambiguous_items(msg: DetectionMessage, obs_j: AgentObservation, phi_i: float = DEFAULT_PHI,
                    band: float = 0.1) -> int:
    """Count transmitted records sitting on cells where S_j is within ``band`` of ``phi_i``."""
    spec = obs_j.spec
    T = obs_j.T_ego2w
    pts = [msg.points_2d[:, :2].astype(np.float64) - T[:2],
           msg.boxes_3d[:, :2].astype(np.float64),
           msg.background[:, :2].astype(np.float64) - T[:2]]
    xy = np.concatenate(pts, axis=0)
    cells, ok = ego_to_bev_many(xy, spec)
    s = obs_j.score_map[cells[ok, 0], cells[ok, 1]]
    return int(np.count_nonzero(np.abs(s - phi_i) <= band))
