"""Frame-to-frame landmark tracking by local SSD block matching.

For each landmark the (2w+1)^2 patch around its position in frame t-1 is
compared with candidate patches in frame t at every integer offset within the
search radius. The best offset is refined with a 2-D quadratic fitted to the 3x3
cost neighborhood, then one Jacobi pass pulls each displacement toward the mean
of its grid neighbors. Displacements accumulate over frames, so drift is
expected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from tagstrain.errors import DomainError, ShapeError
from tagstrain.geometry import N_LANDMARKS, RINGS, SPOKES, LandmarkGrid, LandmarkSequence
from tagstrain.preprocess import Cine, sample_bicubic

logger = logging.getLogger(__name__)

TRACKED = 0
BOUNDARY = 1
FROZEN = 2


@dataclass(frozen=True)
class SSDConfig:
    window_radius: int = 5
    search_radius: int = 4
    subpixel: bool = True
    smoothing_lambda: float = 0.1

    def __post_init__(self) -> None:
        if self.window_radius < 1 or self.search_radius < 1:
            raise DomainError(f"window and search radii must be >= 1, got {self.window_radius}, {self.search_radius}")
        if self.smoothing_lambda < 0:
            raise DomainError(f"smoothing_lambda must be >= 0, got {self.smoothing_lambda}")


@dataclass
class SSDResult:
    sequence: LandmarkSequence
    status: np.ndarray  # (T, 168) uint8: TRACKED, BOUNDARY or FROZEN


def ssd(patch_a: np.ndarray, patch_b: np.ndarray) -> float:
    a = np.asarray(patch_a, dtype=np.float64)
    b = np.asarray(patch_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssd needs equal shapes, got {a.shape} and {b.shape}")
    d = a - b
    return float(np.sum(d * d))


def _offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1, dtype=np.float64)
    oy, ox = np.meshgrid(r, r, indexing="ij")
    return np.stack([ox.ravel(), oy.ravel()], axis=-1)


def _patches(frame: np.ndarray, centers: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Bicubic patches (..., K) around ``centers`` (..., 2)."""
    xs = centers[..., None, 0] + window[:, 0]
    ys = centers[..., None, 1] + window[:, 1]
    return sample_bicubic(frame, xs, ys)


def quadratic_offset(nbhd: np.ndarray) -> np.ndarray:
    """Subpixel minimum of a least-squares quadratic over (N, 3, 3) costs.

    Rows index y in {-1, 0, 1}, columns x. Returns (N, 2) offsets (dx, dy)
    clamped to +/-0.5. A non-convex fit falls back to 1-D parabolas through the
    center row and column.
    """
    f = np.asarray(nbhd, dtype=np.float64)
    x = np.array([-1.0, 0.0, 1.0])
    gx = x[None, None, :]
    gy = x[None, :, None]
    b = np.sum(gx * f, axis=(1, 2)) / 6.0
    c = np.sum(gy * f, axis=(1, 2)) / 6.0
    e = np.sum(gx * gy * f, axis=(1, 2)) / 4.0
    d = np.sum(f[:, :, 0] - 2.0 * f[:, :, 1] + f[:, :, 2], axis=1) / 6.0
    q = np.sum(f[:, 0, :] - 2.0 * f[:, 1, :] + f[:, 2, :], axis=1) / 6.0

    det = 4.0 * d * q - e * e
    convex = (d > 0) & (det > 0)
    safe = np.where(convex, det, 1.0)
    dx = np.where(convex, (e * c - 2.0 * q * b) / safe, 0.0)
    dy = np.where(convex, (e * b - 2.0 * d * c) / safe, 0.0)

    row = f[:, 1, :]
    col = f[:, :, 1]
    curv_x = row[:, 0] - 2.0 * row[:, 1] + row[:, 2]
    curv_y = col[:, 0] - 2.0 * col[:, 1] + col[:, 2]
    dx_1d = np.where(curv_x > 0, (row[:, 0] - row[:, 2]) / (2.0 * np.where(curv_x > 0, curv_x, 1.0)), 0.0)
    dy_1d = np.where(curv_y > 0, (col[:, 0] - col[:, 2]) / (2.0 * np.where(curv_y > 0, curv_y, 1.0)), 0.0)
    dx = np.where(convex, dx, dx_1d)
    dy = np.where(convex, dy, dy_1d)
    return np.clip(np.stack([dx, dy], axis=-1), -0.5, 0.5)


def _neighbor_mean(disp: np.ndarray, active: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean displacement of the active 4-neighbors (spokes wrap, rings do not)."""
    grid = (disp * active[:, None]).reshape(RINGS, SPOKES, 2)
    on = active.reshape(RINGS, SPOKES).astype(np.float64)
    total = np.roll(grid, 1, axis=1) + np.roll(grid, -1, axis=1)
    count = np.roll(on, 1, axis=1) + np.roll(on, -1, axis=1)
    total[1:] += grid[:-1]
    count[1:] += on[:-1]
    total[:-1] += grid[1:]
    count[:-1] += on[1:]
    mean = total / np.maximum(count, 1.0)[..., None]
    return mean.reshape(N_LANDMARKS, 2), count.reshape(N_LANDMARKS)


def smooth_displacements(disp: np.ndarray, active: np.ndarray, weight: float) -> np.ndarray:
    """One Jacobi step: d_i + weight * (mean of active neighbors - d_i)."""
    if weight == 0.0:
        return disp
    mean, count = _neighbor_mean(disp, active)
    pull = (active & (count > 0))[:, None]
    return np.where(pull, disp + weight * (mean - disp), disp)


def _step(prev: np.ndarray, cur: np.ndarray, points: np.ndarray, cfg: SSDConfig) -> Tuple[np.ndarray, np.ndarray]:
    h, w = cur.shape
    s, r = cfg.search_radius, cfg.window_radius
    reach = s + r
    inside = (
        (points[:, 0] - reach >= 0.5) & (points[:, 0] + reach <= w - 0.5)
        & (points[:, 1] - reach >= 0.5) & (points[:, 1] + reach <= h - 0.5)
    )
    status = np.where(inside, TRACKED, FROZEN).astype(np.uint8)
    disp = np.zeros_like(points)
    if not inside.any():
        return disp, status

    window = _offsets(r)
    search = _offsets(s)
    live = points[inside]
    template = _patches(prev, live, window)
    candidates = _patches(cur, live[:, None, :] + search[None, :, :], window)
    diff = candidates - template[:, None, :]
    n_side = 2 * s + 1
    costs = np.sum(diff * diff, axis=-1).reshape(-1, n_side, n_side)

    best = np.argmin(costs.reshape(len(live), -1), axis=1)
    iy, ix = np.divmod(best, n_side)
    offset = np.stack([ix - s, iy - s], axis=-1).astype(np.float64)
    on_edge = (ix == 0) | (iy == 0) | (ix == n_side - 1) | (iy == n_side - 1)
    if cfg.subpixel:
        interior = ~on_edge
        if interior.any():
            rows = np.nonzero(interior)[0]
            ny = iy[rows][:, None, None] + np.arange(-1, 2)[None, :, None]
            nx = ix[rows][:, None, None] + np.arange(-1, 2)[None, None, :]
            offset[rows] += quadratic_offset(costs[rows[:, None, None], ny, nx])

    disp[inside] = offset
    live_status = status[inside]
    live_status[on_edge] = BOUNDARY
    status[inside] = live_status
    return smooth_displacements(disp, inside, cfg.smoothing_lambda), status


def track_ssd(cine: Union[Cine, np.ndarray], initial_grid: LandmarkGrid, cfg: SSDConfig = SSDConfig()) -> SSDResult:
    """Track ``initial_grid`` through the valid frames of ``cine``."""
    if isinstance(cine, Cine):
        frames = np.asarray(cine.frames[: cine.n_valid], dtype=np.float64)
    else:
        frames = np.asarray(cine, dtype=np.float64)
    if frames.ndim != 3:
        raise ShapeError(f"track_ssd expects (T, H, W) frames, got {frames.shape}")
    n = frames.shape[0]
    points = np.empty((n, N_LANDMARKS, 2), dtype=np.float64)
    status = np.zeros((n, N_LANDMARKS), dtype=np.uint8)
    points[0] = initial_grid.points
    for t in range(1, n):
        disp, status[t] = _step(frames[t - 1], frames[t], points[t - 1], cfg)
        points[t] = points[t - 1] + disp
    frozen = int(np.sum(status == FROZEN))
    if frozen:
        logger.warning("ssd tracking froze %d landmark-frames whose search window left the image", frozen)
    logger.debug("ssd tracked %d frames, %d boundary minima", n, int(np.sum(status == BOUNDARY)))
    return SSDResult(LandmarkSequence(points), status)
