"""Fixed preprocessing: spatial padding, temporal normalization, ROI crop and
bicubic resampling, intensity normalization, and the coordinate bookkeeping
that maps landmarks between original, padded and crop space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, Optional, Tuple

import numpy as np

from tagstrain.errors import DomainError, ShapeError
from tagstrain.geometry import FORWARD, INVERSE, BoundingBox, map_points

logger = logging.getLogger(__name__)

NORMALIZATIONS = ("zscore", "minmax", "none")
CUBIC_A = -0.5


@dataclass(frozen=True, eq=False)
class Cine:
    """One slice's image sequence, frames x height x width."""

    frames: np.ndarray
    pixel_spacing_mm: float = 1.0
    case_id: str = ""
    slice_id: str = "0"
    pad_offsets: Tuple[int, int] = (0, 0)
    source_frames: Optional[int] = None

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise ShapeError(f"cine frames must be (T, H, W), got {frames.shape}")
        if frames.shape[0] < 1:
            raise DomainError("cine needs at least one frame")
        if not np.all(np.isfinite(frames)):
            raise DomainError(f"cine {self.case_id!r} contains non-finite intensities")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def n_valid(self) -> int:
        return self.n_frames if self.source_frames is None else min(self.source_frames, self.n_frames)

    def frame_mask(self) -> np.ndarray:
        return np.arange(self.n_frames) < self.n_valid


@dataclass(frozen=True)
class PreprocConfig:
    pad_to: int = 256
    target_frames: int = 20
    crop_to: int = 128
    expand_fraction: float = 0.6
    normalization: str = "zscore"

    def __post_init__(self) -> None:
        if self.pad_to <= 0 or self.crop_to <= 0:
            raise DomainError(f"pad_to and crop_to must be positive, got {self.pad_to}, {self.crop_to}")
        if self.target_frames < 2:
            raise DomainError(f"target_frames must be >= 2, got {self.target_frames}")
        if self.expand_fraction < 0:
            raise DomainError(f"expand_fraction must be >= 0, got {self.expand_fraction}")
        if self.normalization not in NORMALIZATIONS:
            raise DomainError(f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")


@dataclass(frozen=True)
class CropTransform:
    """Maps points between original image space and crop space.

    ``box`` is expressed in padded coordinates; ``pad_offsets`` is (rows, cols).
    """

    box: BoundingBox
    crop_to: int
    pad_offsets: Tuple[int, int] = (0, 0)

    def _shift(self) -> np.ndarray:
        return np.array([self.pad_offsets[1], self.pad_offsets[0]], dtype=np.float64)

    def to_crop(self, points: np.ndarray) -> np.ndarray:
        padded = np.asarray(points, dtype=np.float64) + self._shift()
        return map_points(padded, self.box, self.crop_to, self.crop_to, FORWARD)

    def to_original(self, points: np.ndarray) -> np.ndarray:
        padded = map_points(np.asarray(points, dtype=np.float64), self.box, self.crop_to, self.crop_to, INVERSE)
        return padded - self._shift()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "box": self.box.as_list(),
            "crop_to": self.crop_to,
            "pad_offsets": [int(self.pad_offsets[0]), int(self.pad_offsets[1])],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CropTransform":
        r, c = data.get("pad_offsets", (0, 0))
        return cls(BoundingBox.from_list(data["box"]), int(data["crop_to"]), (int(r), int(c)))


def pad_spatial(c: Cine, pad_to: int) -> Cine:
    t, h, w = c.frames.shape
    if h > pad_to or w > pad_to:
        raise DomainError(f"cine {c.case_id!r} is {h}x{w}, larger than pad_to={pad_to}")
    if h == pad_to and w == pad_to:
        return c
    top = (pad_to - h) // 2
    left = (pad_to - w) // 2
    frames = np.zeros((t, pad_to, pad_to), dtype=c.frames.dtype)
    frames[:, top:top + h, left:left + w] = c.frames
    offsets = (c.pad_offsets[0] + top, c.pad_offsets[1] + left)
    logger.debug("padded %s from %dx%d to %d (offsets %s)", c.case_id, h, w, pad_to, offsets)
    return replace(c, frames=frames, pad_offsets=offsets)


def normalize_frames(c: Cine, target_frames: int) -> Cine:
    t = c.n_frames
    if t == target_frames:
        return c
    if t > target_frames:
        return replace(c, frames=c.frames[:target_frames].copy(), source_frames=min(c.n_valid, target_frames))
    pad = np.zeros((target_frames - t,) + c.frames.shape[1:], dtype=c.frames.dtype)
    return replace(c, frames=np.concatenate([c.frames, pad]), source_frames=c.n_valid)


def prepare_cine(c: Cine, cfg: PreprocConfig) -> Cine:
    return normalize_frames(pad_spatial(c, cfg.pad_to), cfg.target_frames)


def cubic_kernel(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2 = x * x
    x3 = x2 * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def _weight_matrix(n_out: int, n_in: int, start: float, extent: float) -> np.ndarray:
    # output pixel k covers [start + k*step, start + (k+1)*step); sample at its center
    step = extent / n_out
    u = start + (np.arange(n_out) + 0.5) * step - 0.5
    base = np.floor(u)
    frac = u - base
    weights = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for offset in (-1, 0, 1, 2):
        idx = np.clip(base.astype(np.int64) + offset, 0, n_in - 1)
        np.add.at(weights, (rows, idx), cubic_kernel(frac - offset))
    return weights


def resample_bicubic(img: np.ndarray, out_w: int, out_h: int, box: Optional[BoundingBox] = None) -> np.ndarray:
    """Cubic-convolution resample of ``box`` (default: whole image) to out_w x out_h.

    Accepts a single image (H, W) or a stack (T, H, W); edges are clamped.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ShapeError(f"resample expects (H, W) or (T, H, W), got {arr.shape}")
    h, w = arr.shape[-2:]
    if h < 2 or w < 2:
        raise DomainError(f"resample needs at least 2x2 input, got {h}x{w}")
    if box is None:
        box = BoundingBox(0.0, 0.0, float(w), float(h))
    wy = _weight_matrix(out_h, h, box.y_min, box.height)
    wx = _weight_matrix(out_w, w, box.x_min, box.width)
    return (wy @ arr) @ wx.T


def sample_bicubic(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Cubic-convolution samples of a 2-D image at continuous pixel coordinates."""
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape
    u = np.asarray(xs, dtype=np.float64) - 0.5
    v = np.asarray(ys, dtype=np.float64) - 0.5
    bu = np.floor(u).astype(np.int64)
    bv = np.floor(v).astype(np.int64)
    fu = u - bu
    fv = v - bv
    out = np.zeros(np.broadcast(u, v).shape, dtype=np.float64)
    for oy in (-1, 0, 1, 2):
        wy = cubic_kernel(fv - oy)
        iy = np.clip(bv + oy, 0, h - 1)
        for ox in (-1, 0, 1, 2):
            ix = np.clip(bu + ox, 0, w - 1)
            out += wy * cubic_kernel(fu - ox) * arr[iy, ix]
    return out


def normalize_intensity(frames: np.ndarray, mask: np.ndarray, method: str) -> np.ndarray:
    out = np.asarray(frames, dtype=np.float64).copy()
    valid = out[mask]
    if method == "zscore":
        mu = valid.mean()
        sd = valid.std()
        out[mask] = (valid - mu) / sd if sd > 0 else valid - mu
    elif method == "minmax":
        lo, hi = valid.min(), valid.max()
        out[mask] = (valid - lo) / (hi - lo) if hi > lo else valid - lo
    elif method != "none":
        raise DomainError(f"unknown normalization {method!r}")
    out[~mask] = 0.0
    return out


def crop_pipeline(c: Cine, box: BoundingBox, cfg: PreprocConfig) -> Tuple[Cine, CropTransform]:
    """Crop every frame with the same box, resample to crop_to^2 and normalize."""
    image = BoundingBox(0.0, 0.0, float(c.width), float(c.height))
    if box.intersection_area(image) == 0.0:
        raise DomainError(f"crop box {box.as_list()} does not intersect the {c.width}x{c.height} image")
    clipped = BoundingBox(
        max(box.x_min, 0.0), max(box.y_min, 0.0), min(box.x_max, image.x_max), min(box.y_max, image.y_max)
    )
    transform = CropTransform(clipped, cfg.crop_to, c.pad_offsets)
    crops = resample_bicubic(c.frames, cfg.crop_to, cfg.crop_to, clipped)
    crops = normalize_intensity(crops, c.frame_mask(), cfg.normalization)
    cropped = replace(c, frames=crops.astype(np.float32), pad_offsets=(0, 0))
    return cropped, transform
