"""Camera projection, ray/ground intersection and world/ego/BEV transforms.

Camera frame: X right, Y down, Z forward along the viewing direction.
``R`` maps camera axes into the world frame and ``T`` is the camera
origin in world coordinates, so ``P_w = R @ P_c + T``.

Ego frames are pure translations of the world frame (shared axes); the
ego origin sits on the ground under the agent.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

DEFAULT_OBJECT_HEIGHT = 1.5
ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class CameraRig:
    f_x: float
    f_y: float
    c_x: float
    c_y: float
    R: np.ndarray
    T: np.ndarray
    image_w: int = 704
    image_h: int = 256

    def __post_init__(self):
        if not (self.f_x > 0 and self.f_y > 0):
            raise ValueError(f"focal lengths must be positive, got ({self.f_x}, {self.f_y})")
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.T, dtype=np.float64).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation matrix must have determinant +1")
        R.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.f_x, 0.0, self.c_x],
                         [0.0, self.f_y, self.c_y],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class GridSpec:
    """Ego-frame BEV grid. Rows index y, columns index x."""

    extent_min: Tuple[float, float] = (-102.4, -102.4)
    extent_max: Tuple[float, float] = (102.4, 102.4)
    resolution: float = 0.8
    H: int = field(init=False)
    W: int = field(init=False)

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        lo = np.asarray(self.extent_min, dtype=np.float64)
        hi = np.asarray(self.extent_max, dtype=np.float64)
        cells = (hi - lo) / self.resolution
        rounded = np.round(cells)
        if np.any(rounded <= 0) or np.any(np.abs(cells - rounded) > 1e-6):
            raise ValueError(
                f"extent {tuple(lo)}..{tuple(hi)} is not an integer number of "
                f"{self.resolution} m cells")
        object.__setattr__(self, "extent_min", (float(lo[0]), float(lo[1])))
        object.__setattr__(self, "extent_max", (float(hi[0]), float(hi[1])))
        object.__setattr__(self, "W", int(rounded[0]))
        object.__setattr__(self, "H", int(rounded[1]))

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.H, self.W)

    def cell_center(self, m, n):
        """Ego-frame (x, y) of the centre of cell (row m, col n)."""
        x = self.extent_min[0] + (np.asarray(n) + 0.5) * self.resolution
        y = self.extent_min[1] + (np.asarray(m) + 0.5) * self.resolution
        return x, y


def rotation_from_euler(yaw: float, pitch: float, roll: float = 0.0) -> np.ndarray:
    """Camera-to-world rotation for a camera looking along ``yaw`` (about world Z),
    tilted down by ``pitch`` radians below the horizon.

    ``pitch = pi/2`` is a nadir camera. Image "up" points along the heading.
    """
    # camera at yaw=0, pitch=0 looks along world +X with image-right = world -Y
    base = np.array([[0.0, 0.0, 1.0],
                     [-1.0, 0.0, 0.0],
                     [0.0, -1.0, 0.0]])
    cp, sp = np.cos(pitch), np.sin(pitch)
    # tilt about the camera X axis (rotates forward towards down)
    tilt = np.array([[1.0, 0.0, 0.0],
                     [0.0, cp, sp],
                     [0.0, -sp, cp]])
    cr, sr = np.cos(roll), np.sin(roll)
    spin = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    cy, sy = np.cos(yaw), np.sin(yaw)
    heading = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    return heading @ base @ tilt @ spin


def pixel_ray(rig: CameraRig, u, v):
    """World-frame ray ``origin + r * dir`` through pixel (u, v).

    ``dir`` is left unnormalised: its camera-frame Z component is 1.
    Accepts scalars or equal-shaped arrays; array input gives (..., 3) dirs.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cam = np.stack([(u - rig.c_x) / rig.f_x, (v - rig.c_y) / rig.f_y, np.ones_like(u)], axis=-1)
    direction = cam @ rig.R.T
    return rig.T.copy(), direction


def ray_ground_intersect(origin, direction, h: float = DEFAULT_OBJECT_HEIGHT) -> Optional[np.ndarray]:
    """Point where the ray meets the plane ``z = h``; None if parallel or behind."""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    dz = direction[2]
    if dz == 0.0:
        return None
    r = (h - origin[2]) / dz
    if not r > 0.0:
        return None
    point = origin + r * direction
    point[2] = h
    return point


def rays_ground_intersect(origin, directions, h: float = DEFAULT_OBJECT_HEIGHT):
    """Vectorised ray/plane intersection.

    Returns ``(points, valid)`` with ``points`` (N, 3); invalid rows are NaN.
    """
    origin = np.asarray(origin, dtype=np.float64)
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    dz = directions[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (h - origin[2]) / dz
    valid = (dz != 0.0) & (r > 0.0)
    points = np.full(directions.shape, np.nan)
    points[valid] = origin + r[valid, None] * directions[valid]
    points[valid, 2] = h
    return points, valid


def project_to_pixels(rig: CameraRig, points_w):
    """Forward pinhole projection of world points.

    Returns ``(uv, depth)`` where depth is the camera-frame Z; points with
    depth <= 0 are behind the camera and their uv is meaningless.
    """
    pts = np.atleast_2d(np.asarray(points_w, dtype=np.float64))
    cam = (pts - rig.T) @ rig.R
    depth = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = rig.f_x * cam[:, 0] / depth + rig.c_x
        v = rig.f_y * cam[:, 1] / depth + rig.c_y
    return np.stack([u, v], axis=-1), depth


def in_frustum(rig: CameraRig, points_w) -> np.ndarray:
    uv, depth = project_to_pixels(rig, points_w)
    return ((depth > 0)
            & (uv[:, 0] >= 0) & (uv[:, 0] < rig.image_w)
            & (uv[:, 1] >= 0) & (uv[:, 1] < rig.image_h))


def world_to_ego(p, T_ego2w):
    return np.asarray(p, dtype=np.float64) - np.asarray(T_ego2w, dtype=np.float64)


def ego_to_world(p, T_ego2w):
    return np.asarray(p, dtype=np.float64) + np.asarray(T_ego2w, dtype=np.float64)


OUT_OF_RANGE = None


def ego_to_bev(p, spec: GridSpec) -> Optional[Tuple[int, int]]:
    """BEV cell (row, col) holding ego point ``p``, or None when outside the grid."""
    p = np.asarray(p, dtype=np.float64)
    n = int(np.floor((p[0] - spec.extent_min[0]) / spec.resolution))
    m = int(np.floor((p[1] - spec.extent_min[1]) / spec.resolution))
    if 0 <= m < spec.H and 0 <= n < spec.W:
        return (m, n)
    return OUT_OF_RANGE


def ego_to_bev_many(points, spec: GridSpec):
    """Vectorised ``ego_to_bev``: returns (cells (N, 2) int, in_range (N,) bool)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=bool)
    pts = pts.reshape(-1, pts.shape[-1])
    n = np.floor((pts[:, 0] - spec.extent_min[0]) / spec.resolution)
    m = np.floor((pts[:, 1] - spec.extent_min[1]) / spec.resolution)
    ok = np.isfinite(n) & np.isfinite(m) & (m >= 0) & (m < spec.H) & (n >= 0) & (n < spec.W)
    cells = np.zeros((len(pts), 2), dtype=np.int64)
    cells[ok, 0] = m[ok].astype(np.int64)
    cells[ok, 1] = n[ok].astype(np.int64)
    return cells, ok
