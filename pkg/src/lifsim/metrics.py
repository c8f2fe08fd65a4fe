"""nuScenes-style single-class detection metrics.

Matching uses 2D centre distance; AP integrates a 101-point interpolated
precision/recall curve with the low-recall and low-precision regions
clipped. The composite score here (``NDS'``) only has three TP errors so it
is normalised by 8 instead of 10 and is not comparable with full NDS.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
ATE_NORM = 4.0
AOE_NORM = math.pi


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int]]  # (prediction index, gt index)
    unmatched_preds: List[int]
    unmatched_gts: List[int]


def _as_preds(p) -> np.ndarray:
    return np.asarray(p, dtype=np.float64).reshape(-1, 8)


def _as_gts(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    return g.reshape(-1, g.shape[-1] if g.size else 7)


def match(preds: np.ndarray, gts: np.ndarray, d: float) -> MatchResult:
    """Greedy matching: highest-confidence prediction claims the nearest free GT within ``d``.

    ``preds`` are ``(N, 8)`` boxes with score last; ``gts`` rows start
    ``x, y, z, w, h, l, yaw``. Confidence ties go to the lower index and so do
    distance ties.
    """
    preds, gts = _as_preds(preds), _as_gts(gts)
    order = np.lexsort((np.arange(len(preds)), -preds[:, 7]))
    taken = np.zeros(len(gts), dtype=bool)
    pairs, unmatched = [], []
    for i in order:
        if len(gts):
            dist = np.hypot(gts[:, 0] - preds[i, 0], gts[:, 1] - preds[i, 1])
            dist[taken] = np.inf
            j = int(np.argmin(dist))
            if dist[j] < d:
                taken[j] = True
                pairs.append((int(i), j))
                continue
        unmatched.append(int(i))
    return MatchResult(pairs, unmatched, [int(j) for j in np.flatnonzero(~taken)])


def _accumulate(frames, d: float):
    """Per-prediction TP flags and scores across frames, plus the GT count."""
    scores, flags = [], []
    n_gt = 0
    for preds, gts in frames:
        preds, gts = _as_preds(preds), _as_gts(gts)
        res = match(preds, gts, d)
        n_gt += len(gts)
        tp = np.zeros(len(preds), dtype=bool)
        for i, _ in res.pairs:
            tp[i] = True
        scores.append(preds[:, 7])
        flags.append(tp)
    scores = np.concatenate(scores) if scores else np.zeros(0)
    flags = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
    return scores, flags, n_gt


def pr_curve(scores: np.ndarray, tp: np.ndarray, n_gt: int):
    order = np.lexsort((np.arange(len(scores)), -scores))
    tp_cum = np.cumsum(tp[order])
    fp_cum = np.cumsum(~tp[order])
    prec = tp_cum / np.maximum(tp_cum + fp_cum, 1)
    rec = tp_cum / max(n_gt, 1)
    return prec, rec


def ap_from_pr(prec: np.ndarray, rec: np.ndarray, min_recall: float = MIN_RECALL,
               min_precision: float = MIN_PRECISION) -> float:
    if len(prec) == 0:
        return 0.0
    grid = np.linspace(0.0, 1.0, 101)
    p = np.interp(grid, rec, prec, right=0.0)
    p = p[int(round(100 * min_recall)) + 1:]
    p = np.clip(p - min_precision, 0.0, None)
    return float(np.mean(p) / (1.0 - min_precision))


def average_precision(frames, d: float) -> float:
    """AP at distance threshold ``d`` over ``(preds, gts)`` frame pairs."""
    scores, tp, n_gt = _accumulate(frames, d)
    if n_gt == 0:
        return 0.0
    prec, rec = pr_curve(scores, tp, n_gt)
    return ap_from_pr(prec, rec)


def mean_ap(frames, thresholds=DIST_THRESHOLDS) -> Tuple[float, Dict[float, float]]:
    aps = {d: average_precision(frames, d) for d in thresholds}
    return float(np.mean(list(aps.values()))), aps


def wrapped_yaw_diff(a, b):
    d = np.abs(np.mod(np.asarray(a) - np.asarray(b) + np.pi, 2 * np.pi) - np.pi)
    return np.minimum(d, np.pi)


def aligned_iou(size_a, size_b) -> float:
    """IoU of two boxes (w, h, l) sharing centre and yaw."""
    wa, ha, la = size_a
    wb, hb, lb = size_b
    inter = min(wa, wb) * min(ha, hb) * min(la, lb)
    union = wa * ha * la + wb * hb * lb - inter
    return float(inter / union) if union > 0 else 0.0


def tp_errors(pairs_boxes) -> Tuple[float, float, float]:
    """(mATE, mASE, mAOE) over matched ``(pred, gt)`` box pairs.

    With no pairs each error takes its normalising cap (4 m, 1, pi).
    """
    pairs_boxes = list(pairs_boxes)
    if not pairs_boxes:
        return ATE_NORM, 1.0, AOE_NORM
    ate, ase, aoe = [], [], []
    for p, g in pairs_boxes:
        ate.append(math.hypot(p[0] - g[0], p[1] - g[1]))
        ase.append(1.0 - aligned_iou(p[3:6], g[3:6]))
        aoe.append(float(wrapped_yaw_diff(p[6], g[6])))
    return float(np.mean(ate)), float(np.mean(ase)), float(np.mean(aoe))


def nds(mAP: float, errors: Tuple[float, float, float]) -> float:
    """Composite ``(5 mAP + sum(1 - min(1, err_norm))) / 8``; errors are raw (m, -, rad)."""
    ate, ase, aoe = errors
    normed = (ate / ATE_NORM, ase, aoe / AOE_NORM)
    return nds_from_normalized(mAP, normed)


def nds_from_normalized(mAP: float, normed) -> float:
    return float((5.0 * mAP + sum(1.0 - min(1.0, e) for e in normed)) / 8.0)


@dataclass
class EvalReport:
    mAP: float
    NDS: float
    mATE: float
    mASE: float
    mAOE: float
    ap_per_threshold: Dict[float, float] = field(default_factory=dict)
    num_frames: int = 0
    num_predictions: int = 0
    num_gt: int = 0
    num_tp: int = 0

    def as_dict(self) -> Dict[str, float]:
        out = {"mAP": self.mAP, "NDS": self.NDS, "mATE": self.mATE, "mASE": self.mASE, "mAOE": self.mAOE}
        for d, ap in sorted(self.ap_per_threshold.items()):
            out[f"AP@{d:g}"] = ap
        out.update(frames=self.num_frames, predictions=self.num_predictions, gt=self.num_gt, tp=self.num_tp)
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            lines.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
        return "\n".join(lines) + "\n"


def evaluate(frames) -> EvalReport:
    """Full report over ``(preds, gts)`` pairs."""
    frames = [(_as_preds(p), _as_gts(g)) for p, g in frames]
    mAP, aps = mean_ap(frames)
    pairs = []
    for preds, gts in frames:
        res = match(preds, gts, TP_THRESHOLD)
        pairs.extend((preds[i], gts[j]) for i, j in res.pairs)
    errs = tp_errors(pairs)
    return EvalReport(mAP, nds(mAP, errs), *errs, ap_per_threshold=aps, num_frames=len(frames),
                      num_predictions=sum(len(p) for p, _ in frames),
                      num_gt=sum(len(g) for _, g in frames), num_tp=len(pairs))
