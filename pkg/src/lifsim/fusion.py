"""Late-intermediate fusion of received detections into the ego BEV grid."""
from __future__ import annotations

from typing import Iterable, Tuple

import numpy as np

from .geometry import GridSpec, ego_to_bev_many

BOBEV_CHANNELS = 5


def _cells_in_range(cells, spec: GridSpec):
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    ok = (cells[:, 0] >= 0) & (cells[:, 0] < spec.H) & (cells[:, 1] >= 0) & (cells[:, 1] < spec.W)
    return cells, ok


def vpe_weight_map(cells, confidences, spec: GridSpec) -> Tuple[np.ndarray, int]:
    """Per-cell confidence of received 2D points (max per cell).

    Returns the ``(H, W)`` map and the number of out-of-range points skipped.
    """
    cells, ok = _cells_in_range(cells, spec)
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    weight = np.zeros(spec.shape)
    np.maximum.at(weight, (cells[ok, 0], cells[ok, 1]), conf[ok])
    return weight, int(np.count_nonzero(~ok))


def build_vpe(cells, confidences, Q, spec: GridSpec) -> Tuple[np.ndarray, int]:
    """Confidence-weighted positional embedding: ``s * Q`` at occupied cells, 0 elsewhere."""
    weight, skipped = vpe_weight_map(cells, confidences, spec)
    Q = np.asarray(Q, dtype=np.float64).reshape(-1)
    return weight[:, :, None] * Q, skipped


def refine_features(F: np.ndarray, vpe: np.ndarray) -> np.ndarray:
    if F.shape != vpe.shape:
        raise ValueError(f"feature grid {F.shape} and embedding {vpe.shape} differ")
    return F + vpe


def build_bobev(boxes, spec: GridSpec) -> Tuple[np.ndarray, int]:
    """Rasterise (w, h, l, yaw, s) of each box at its centre cell.

    Boxes are ``(N, 8)`` ego-frame rows. When several boxes share a cell the
    highest-confidence one wins (earliest on ties).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 8)
    grid = np.zeros(spec.shape + (BOBEV_CHANNELS,))
    if len(boxes) == 0:
        return grid, 0
    cells, ok = ego_to_bev_many(boxes[:, :2], spec)
    idx = np.flatnonzero(ok)
    order = idx[np.lexsort((idx, -boxes[idx, 7]))]
    flat = cells[order, 0] * spec.W + cells[order, 1]
    _, first = np.unique(flat, return_index=True)
    win = order[first]
    grid[cells[win, 0], cells[win, 1]] = boxes[win][:, 3:8]
    return grid, int(np.count_nonzero(~ok))


def fuse(F_prime: np.ndarray, bobev: np.ndarray) -> np.ndarray:
    if F_prime.shape[:2] != bobev.shape[:2]:
        raise ValueError(f"grid sizes differ: {F_prime.shape[:2]} vs {bobev.shape[:2]}")
    return np.concatenate([F_prime, bobev], axis=-1)


def dedupe_received(box_sets: Iterable[np.ndarray], radius: float = 1.0) -> np.ndarray:
    """Greedy confidence-ordered suppression of near-duplicate boxes.

    A box is dropped when its BEV centre lies closer than ``radius`` to an
    already kept box. Input sets are concatenated in order; ties keep the
    earlier box.
    """
    sets = [np.asarray(b, dtype=np.float64).reshape(-1, 8) for b in box_sets]
    boxes = np.concatenate(sets, axis=0) if sets else np.zeros((0, 8))
    if len(boxes) == 0:
        return boxes
    order = np.lexsort((np.arange(len(boxes)), -boxes[:, 7]))
    kept = []
    xy = boxes[:, :2]
    for i in order:
        if kept:
            d = np.hypot(*(xy[kept] - xy[i]).T)
            if np.any(d < radius):
                continue
        kept.append(i)
    return boxes[kept]


def lif_inputs(F: np.ndarray, points_ego, boxes_ego, spec: GridSpec, use_vpe: bool = True,
               use_bobev: bool = True):
    """Ego-side inputs to the head: features, VPE weight map, BoBEV grid."""
    points_ego = np.asarray(points_ego, dtype=np.float64).reshape(-1, 3)
    if use_vpe and len(points_ego):
        cells, ok = ego_to_bev_many(points_ego[:, :2], spec)
        weight, _ = vpe_weight_map(cells[ok], points_ego[ok, 2], spec)
    else:
        weight = np.zeros(spec.shape)
    if use_bobev:
        bobev, _ = build_bobev(boxes_ego, spec)
    else:
        bobev = np.zeros(spec.shape + (BOBEV_CHANNELS,))
    return F, weight, bobev


def suppress_background(preds: np.ndarray, background_ego, support: np.ndarray, spec: GridSpec,
                        phi_i: float) -> np.ndarray:
    """Down-weight ego-only predictions on cells a collaborator asserted as background.

    Each assertion carries certainty ``phi_i - S_j``; the prediction score is
    scaled by ``1 - certainty / phi_i``. Predictions with received evidence
    (``support``, an (H, W) bool map) within one cell are left alone.
    """
    preds = np.array(preds, dtype=np.float64).reshape(-1, 8)
    bg = np.asarray(background_ego, dtype=np.float64).reshape(-1, 3)
    if len(preds) == 0 or len(bg) == 0 or phi_i <= 0:
        return preds
    cert = np.zeros(spec.shape)
    cells, ok = ego_to_bev_many(bg[:, :2], spec)
    np.maximum.at(cert, (cells[ok, 0], cells[ok, 1]), np.clip(bg[ok, 2] / phi_i, 0.0, 1.0))
    pc, pok = ego_to_bev_many(preds[:, :2], spec)
    for k in np.flatnonzero(pok):
        m, n = pc[k]
        if support[max(0, m - 1):m + 2, max(0, n - 1):n + 2].any():
            continue
        preds[k, 7] *= 1.0 - cert[m, n]
    return preds
