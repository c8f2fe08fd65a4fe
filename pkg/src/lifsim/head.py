"""Per-cell center-heatmap detection head with analytic gradients.

The head maps each fused BEV cell (``C + 5`` channels) to a heatmap logit
and ``R = 7`` regression outputs ``(dx, dy, w, h, l, sin yaw, cos yaw)``.
The VPE vector ``Q`` is trained here too: the head consumes
``concat(F + v * Q, BoBEV)`` where ``v`` is the per-cell 2D-point confidence.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .fusion import BOBEV_CHANNELS
from .geometry import DEFAULT_OBJECT_HEIGHT, GridSpec, ego_to_bev_many

log = logging.getLogger(__name__)

R_TARGETS = 7
EPS = 1e-7
PARAMS_MAGIC = b"LIFH"
PARAMS_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class HeadParams:
    w_cls: np.ndarray  # (D,)
    b_cls: float
    W_reg: np.ndarray  # (D, R)
    b_reg: np.ndarray  # (R,)
    Q: np.ndarray  # (C,)

    @property
    def channels(self) -> int:
        return len(self.Q)

    @classmethod
    def zeros(cls, channels: int, R: int = R_TARGETS) -> "HeadParams":
        D = channels + BOBEV_CHANNELS
        return cls(np.zeros(D), 0.0, np.zeros((D, R)), np.zeros(R), np.zeros(channels))

    @classmethod
    def init(cls, channels: int, seed: int = 0, prior: float = 0.01) -> "HeadParams":
        rng = np.random.default_rng(seed)
        D = channels + BOBEV_CHANNELS
        b_reg = np.array([0.0, 0.0, 2.0, 1.5, 4.5, 0.0, 0.0])
        return cls(0.01 * rng.standard_normal(D), -math.log((1 - prior) / prior),
                   0.01 * rng.standard_normal((D, R_TARGETS)), b_reg,
                   0.1 * rng.standard_normal(channels))

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.w_cls, [self.b_cls], self.W_reg.ravel(), self.b_reg, self.Q])

    @classmethod
    def unflatten(cls, vec: np.ndarray, channels: int, R: int = R_TARGETS) -> "HeadParams":
        D = channels + BOBEV_CHANNELS
        vec = np.asarray(vec, dtype=np.float64)
        i = 0
        w = vec[i:i + D]; i += D
        b = float(vec[i]); i += 1
        Wr = vec[i:i + D * R].reshape(D, R); i += D * R
        br = vec[i:i + R]; i += R
        Q = vec[i:i + channels]; i += channels
        if i != len(vec):
            raise ValueError(f"parameter vector has {len(vec)} entries, expected {i}")
        return cls(w.copy(), b, Wr.copy(), br.copy(), Q.copy())

    def copy(self) -> "HeadParams":
        return HeadParams.unflatten(self.flatten(), self.channels, self.W_reg.shape[1])


def save_params(params: HeadParams, path) -> None:
    """Layout: magic ``LIFH``, u32 version, u32 C, u32 R, then little-endian f64
    parameters in the order w_cls, b_cls, W_reg (row-major), b_reg, Q."""
    R = params.W_reg.shape[1]
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC + struct.pack("<III", PARAMS_VERSION, params.channels, R))
        fh.write(params.flatten().astype("<f8").tobytes())


def load_params(path) -> HeadParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != PARAMS_MAGIC:
        raise ValueError(f"{path}: not a head parameter file")
    version, C, R = struct.unpack_from("<III", data, 4)
    if version != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported parameter file version {version}")
    vec = np.frombuffer(data, dtype="<f8", offset=16)
    return HeadParams.unflatten(vec, C, R)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def fused_grid(F: np.ndarray, vpe_weight: np.ndarray, bobev: np.ndarray, Q: np.ndarray) -> np.ndarray:
    return np.concatenate([F + vpe_weight[..., None] * Q, bobev], axis=-1)


def forward(H_grid: np.ndarray, params: HeadParams):
    """Heatmap ``sigmoid(H . w + b)`` and per-cell linear regression."""
    if H_grid.shape[-1] != len(params.w_cls):
        raise ValueError(f"grid has {H_grid.shape[-1]} channels, head expects {len(params.w_cls)}")
    heat = sigmoid(H_grid @ params.w_cls + params.b_cls)
    reg = H_grid @ params.W_reg + params.b_reg
    return heat, reg


# --------------------------------------------------------------------------
# losses


def gaussian_focal_loss(pred, target, alpha: float = 2.0, beta: float = 4.0) -> float:
    p = np.clip(np.asarray(pred, dtype=np.float64), EPS, 1.0 - EPS)
    t = np.asarray(target, dtype=np.float64)
    pos = t == 1.0
    n_pos = max(1, int(np.count_nonzero(pos)))
    pos_term = np.where(pos, (1.0 - p) ** alpha * np.log(p), 0.0)
    neg_term = np.where(pos, 0.0, (1.0 - t) ** beta * p ** alpha * np.log(1.0 - p))
    return float(-(pos_term.sum() + neg_term.sum()) / n_pos)


def l1_reg_loss(reg, targets, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    n = int(np.count_nonzero(mask))
    if n == 0:
        return 0.0
    return float(np.abs(reg[mask] - targets[mask]).mean())


# --------------------------------------------------------------------------
# targets


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """CenterNet radius such that a shifted box keeps ``min_overlap`` IoU."""
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2
    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def render_targets(gt_boxes: np.ndarray, spec: GridSpec):
    """Heatmap, regression targets and positive mask for ego-frame GT boxes.

    ``gt_boxes`` rows start ``x, y, z, w, h, l, yaw``. Out-of-range boxes are
    ignored. The centre cell of each box is exactly 1.
    """
    gt = np.asarray(gt_boxes, dtype=np.float64)
    gt = gt.reshape(-1, gt.shape[-1] if gt.size else 7)
    heat = np.zeros(spec.shape)
    reg = np.zeros(spec.shape + (R_TARGETS,))
    mask = np.zeros(spec.shape, dtype=bool)
    if len(gt) == 0:
        return heat, reg, mask
    cells, ok = ego_to_bev_many(gt[:, :2], spec)
    for k in np.flatnonzero(ok):
        m, n = cells[k]
        x, y, _, w, h, l, yaw = gt[k, :7]
        r = max(1, int(gaussian_radius(l / spec.resolution, w / spec.resolution)))
        sigma = (2 * r + 1) / 6.0
        m0, m1 = max(0, m - r), min(spec.H, m + r + 1)
        n0, n1 = max(0, n - r), min(spec.W, n + r + 1)
        dm = np.arange(m0, m1) - m
        dn = np.arange(n0, n1) - n
        g = np.exp(-(dm[:, None] ** 2 + dn[None, :] ** 2) / (2 * sigma * sigma))
        np.maximum(heat[m0:m1, n0:n1], g, out=heat[m0:m1, n0:n1])
        cx, cy = spec.cell_center(m, n)
        reg[m, n] = ((x - cx) / spec.resolution, (y - cy) / spec.resolution, w, h, l,
                     math.sin(yaw), math.cos(yaw))
        mask[m, n] = True
    return heat, reg, mask


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 300
    alpha: float = 2.0
    beta: float = 4.0
    lambda_cls: float = 1.0
    lambda_reg: float = 0.25
    seed: int = 0
    # "gd": preconditioned gradient descent; "adam": full-batch Adam steps
    optimizer: str = "gd"
    precondition: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("focal exponents must be non-negative")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class HeadSample:
    """One ego view: head inputs plus rendered targets."""

    features: np.ndarray  # (H, W, C)
    vpe_weight: np.ndarray  # (H, W)
    bobev: np.ndarray  # (H, W, 5)
    heat: np.ndarray  # (H, W)
    reg: np.ndarray  # (H, W, R)
    mask: np.ndarray  # (H, W) bool


class _Batch:
    """Samples flattened to cell rows, with per-cell loss normalisers.

    ``X0`` holds the fused channels with a zero embedding; the VPE term
    ``v * Q`` is added analytically so the big matrix is built once.
    """

    def __init__(self, samples: Sequence[HeadSample]):
        if not samples:
            raise ValueError("training needs at least one sample")
        n = len(samples)
        C = samples[0].features.shape[-1]
        self.C = C
        self.X0 = np.concatenate([
            np.concatenate([s.features.reshape(-1, C), s.bobev.reshape(-1, BOBEV_CHANNELS)], axis=1)
            for s in samples])
        self.v = np.concatenate([s.vpe_weight.ravel() for s in samples])
        self.t = np.concatenate([s.heat.ravel() for s in samples])
        mask = np.concatenate([s.mask.ravel() for s in samples])
        y = np.concatenate([s.reg.reshape(-1, s.reg.shape[-1]) for s in samples])
        self.pos = self.t == 1.0
        cls_w, reg_w = [], []
        R = samples[0].reg.shape[-1]
        for s in samples:
            cells = s.heat.size
            n_pos = max(1, int(np.count_nonzero(s.heat == 1.0)))
            n_mask = int(np.count_nonzero(s.mask))
            cls_w.append(np.full(cells, 1.0 / (n * n_pos)))
            reg_w.append(np.full(cells, 1.0 / (n * n_mask * R) if n_mask else 0.0))
        self.cls_w = np.concatenate(cls_w)
        # regression only sees GT centre cells
        self.ridx = np.flatnonzero(mask)
        self.reg_w = np.concatenate(reg_w)[self.ridx]
        self.y = y[self.ridx]
        self._negw = {}

    def neg_weight(self, beta: float) -> np.ndarray:
        if beta not in self._negw:
            self._negw[beta] = (1.0 - self.t) ** beta
        return self._negw[beta]

    def embed(self, Q) -> np.ndarray:
        """``Q`` padded to the fused channel count (zeros on BoBEV channels)."""
        return np.concatenate([Q, np.zeros(BOBEV_CHANNELS)])

    def inputs(self, Q, rows=None):
        if rows is None:
            return self.X0 + self.v[:, None] * self.embed(Q)
        return self.X0[rows] + self.v[rows, None] * self.embed(Q)


def loss_and_grad(params: HeadParams, batch, config: TrainConfig = TrainConfig()):
    """Total loss ``lambda_cls * focal + lambda_reg * L1`` (averaged over samples)
    and its gradient as a flat vector in ``HeadParams.flatten`` order."""
    if isinstance(batch, HeadSample):
        batch = _Batch([batch])
    elif not isinstance(batch, _Batch):
        batch = _Batch(list(batch))
    a, b = config.alpha, config.beta
    C = params.channels
    q_pad = batch.embed(params.Q)
    z = batch.X0 @ params.w_cls + batch.v * float(q_pad @ params.w_cls) + params.b_cls
    p_raw = sigmoid(z)
    p = np.clip(p_raw, EPS, 1.0 - EPS)
    clamped = (p_raw < EPS) | (p_raw > 1.0 - EPS)
    pos = batch.pos
    q = 1.0 - p
    logp, logq = np.log(p), np.log(q)
    negw = batch.neg_weight(b)
    pa, qa = p ** a, q ** a

    cell_loss = np.where(pos, -qa * logp, -negw * pa * logq)
    focal = float(np.sum(batch.cls_w * cell_loss))

    # d(cell_loss)/dz, via dp/dz = p q
    d_pos = a * p * qa * logp - qa * q
    d_neg = -negw * (a * pa * q * logq - pa * p)
    gz = np.where(pos, d_pos, d_neg) * batch.cls_w * config.lambda_cls
    gz = np.where(clamped, 0.0, gz)

    Xm = batch.inputs(params.Q, batch.ridx)
    diff = Xm @ params.W_reg + params.b_reg - batch.y
    rw = batch.reg_w[:, None]
    l1 = float(np.sum(rw * np.abs(diff)))
    G = np.sign(diff) * rw * config.lambda_reg

    loss = config.lambda_cls * focal + config.lambda_reg * l1

    vgz = float(batch.v @ gz)
    g_w = batch.X0.T @ gz + q_pad * vgz
    g_b = gz.sum()
    g_W = Xm.T @ G
    g_br = G.sum(axis=0)
    # features seen by the head are F + v Q on the first C channels
    g_Q = vgz * params.w_cls[:C] + params.W_reg[:C] @ (batch.v[batch.ridx] @ G)
    grad = np.concatenate([g_w, [g_b], g_W.ravel(), g_br, g_Q])
    return loss, grad


def _preconditioner(batch: _Batch, params: HeadParams) -> np.ndarray:
    """Diagonal step scaling from the mean squared input of each channel."""
    X = batch.inputs(params.Q)
    scale = 1.0 / np.maximum(np.mean(X * X, axis=0), 1e-3)
    scale = scale / scale.max()
    D, R = params.W_reg.shape
    C = params.channels
    pieces = [scale, [1.0], np.repeat(scale, R), np.ones(R), np.full(C, scale[:C].max())]
    return np.concatenate(pieces)


@dataclass
class TrainResult:
    params: HeadParams
    losses: List[float] = field(default_factory=list)


def train(samples: Sequence[HeadSample], config: TrainConfig = TrainConfig(),
          init: Optional[HeadParams] = None) -> TrainResult:
    """Full-batch descent on the summed focal and L1 losses.

    Every step uses the gradient over the whole dataset. Raises
    ``TrainingDiverged`` if the loss stops being finite.
    """
    batch = _Batch(list(samples))
    channels = samples[0].features.shape[-1]
    params = HeadParams.init(channels, config.seed) if init is None else init.copy()
    theta = params.flatten()
    precond = _preconditioner(batch, params) if config.precondition else np.ones_like(theta)
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    b1, b2 = 0.9, 0.999
    losses = []
    for epoch in range(config.epochs):
        loss, grad = loss_and_grad(HeadParams.unflatten(theta, channels), batch, config)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDiverged(
                f"loss became non-finite at epoch {epoch} (last finite loss "
                f"{losses[-1] if losses else 'n/a'}); lower the learning rate")
        losses.append(loss)
        if config.optimizer == "adam":
            m1 = b1 * m1 + (1 - b1) * grad
            m2 = b2 * m2 + (1 - b2) * grad * grad
            step = (m1 / (1 - b1 ** (epoch + 1))) / (np.sqrt(m2 / (1 - b2 ** (epoch + 1))) + 1e-8)
            theta = theta - config.learning_rate * step
        else:
            theta = theta - config.learning_rate * precond * grad
    final, _ = loss_and_grad(HeadParams.unflatten(theta, channels), batch, config)
    if not np.isfinite(final):
        raise TrainingDiverged(f"loss became non-finite after epoch {config.epochs}")
    losses.append(final)
    log.info("head trained: loss %.5f -> %.5f over %d epochs", losses[0], final, config.epochs)
    return TrainResult(HeadParams.unflatten(theta, channels), losses)


# --------------------------------------------------------------------------
# decoding


def local_maxima(heat: np.ndarray, threshold: float) -> np.ndarray:
    """(N, 2) cells that are >= all 8 neighbours and strictly above ``threshold``."""
    peak = ndimage.maximum_filter(heat, size=3, mode="constant", cval=-np.inf)
    return np.argwhere((heat >= peak) & (heat > threshold))


def decode(heat: np.ndarray, reg: np.ndarray, spec: GridSpec, peak_threshold: float = 0.05,
           z: float = DEFAULT_OBJECT_HEIGHT) -> np.ndarray:
    """Peaks of the heatmap as ``(N, 8)`` ego-frame boxes, highest score first."""
    cells = local_maxima(heat, peak_threshold)
    if len(cells) == 0:
        return np.zeros((0, 8))
    m, n = cells[:, 0], cells[:, 1]
    r = reg[m, n]
    cx, cy = spec.cell_center(m, n)
    out = np.zeros((len(cells), 8))
    out[:, 0] = cx + r[:, 0] * spec.resolution
    out[:, 1] = cy + r[:, 1] * spec.resolution
    out[:, 2] = z
    out[:, 3:6] = np.maximum(r[:, 2:5], 0.1)
    out[:, 6] = np.arctan2(r[:, 5], r[:, 6])
    out[:, 7] = heat[m, n]
    order = np.lexsort((np.arange(len(out)), -out[:, 7]))
    return out[order]
