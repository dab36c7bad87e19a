"""Landmark grids, bounding boxes and coordinate maps between image spaces.

Coordinates are continuous pixels: pixel (row i, column j) covers
[j, j+1) x [i, i+1), so its center sits at (j + 0.5, i + 0.5). Boxes use the
same half-open convention and IoU is computed on areas.

A landmark grid holds 7 rings x 24 spokes. Ring 0 lies on the endocardial
contour and ring 6 on the epicardial contour; spoke 0 starts at the mid-septum.
Point index p = ring * 24 + spoke.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Tuple

import numpy as np

from tagstrain.errors import DomainError, ShapeError

RINGS = 7
SPOKES = 24
N_LANDMARKS = RINGS * SPOKES

# Layer rings, counted from the cavity.
SUBENDO_RING = 1
MIDWALL_RING = 3
SUBEPI_RING = 5

FORWARD = "forward"
INVERSE = "inverse"


class Point2(NamedTuple):
    x: float
    y: float


def index(ring: int, spoke: int) -> int:
    if not 0 <= ring < RINGS or not 0 <= spoke < SPOKES:
        raise DomainError(f"ring/spoke out of range: ({ring}, {spoke})")
    return ring * SPOKES + spoke


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        values = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in values):
            raise DomainError(f"bounding box has non-finite corners: {values}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DomainError(f"bounding box has zero or negative extent: {values}")

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BoundingBox":
        if len(values) != 4:
            raise DomainError(f"bounding box needs 4 values, got {len(values)}")
        return cls(*(float(v) for v in values))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Point2:
        return Point2(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_list(self) -> list:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def intersection_area(self, other: "BoundingBox") -> float:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h


@dataclass(frozen=True)
class AnnulusSpec:
    center: Point2 = Point2(128.0, 128.0)
    r_endo: float = 20.0
    r_epi: float = 32.0
    theta_start: float = math.pi
    orientation: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", Point2(float(self.center[0]), float(self.center[1])))
        if not (0 < self.r_endo < self.r_epi):
            raise DomainError(
                f"annulus needs 0 < r_endo < r_epi, got r_endo={self.r_endo}, r_epi={self.r_epi}"
            )
        if not 0.0 <= self.theta_start < 2 * math.pi:
            raise DomainError(f"theta_start must lie in [0, 2*pi), got {self.theta_start}")
        if self.orientation not in (1, -1):
            raise DomainError(f"orientation must be +1 or -1, got {self.orientation}")

    def ring_radius(self, ring: int) -> float:
        return self.r_endo + (ring / (RINGS - 1)) * (self.r_epi - self.r_endo)

    def spoke_angle(self, spoke: int) -> float:
        return self.theta_start + self.orientation * spoke * (2 * math.pi / SPOKES)


def _checked_points(points: np.ndarray, shape_tail: Tuple[int, int], what: str) -> np.ndarray:
    arr = np.array(points, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[-2:] != shape_tail:
        raise ShapeError(f"{what} expects shape (..., {N_LANDMARKS}, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{what} contains non-finite coordinates")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LandmarkGrid:
    """168 landmarks of one frame, stored as a read-only (168, 2) array."""

    points: np.ndarray

    def __post_init__(self) -> None:
        arr = _checked_points(self.points, (N_LANDMARKS, 2), "LandmarkGrid")
        if arr.ndim != 2:
            raise ShapeError(f"LandmarkGrid expects shape ({N_LANDMARKS}, 2), got {arr.shape}")
        object.__setattr__(self, "points", arr)

    def point(self, ring: int, spoke: int) -> Point2:
        x, y = self.points[index(ring, spoke)]
        return Point2(float(x), float(y))

    def ring(self, ring: int) -> np.ndarray:
        return self.points[ring * SPOKES:(ring + 1) * SPOKES]

    def spoke(self, spoke: int) -> np.ndarray:
        return self.points[spoke::SPOKES]

    def is_empty(self) -> bool:
        return not np.any(self.points)


@dataclass(frozen=True, eq=False)
class LandmarkSequence:
    """T landmark grids; frame 0 is the end-diastolic reference."""

    points: np.ndarray

    def __post_init__(self) -> None:
        arr = _checked_points(self.points, (N_LANDMARKS, 2), "LandmarkSequence")
        if arr.ndim != 3:
            raise ShapeError(f"LandmarkSequence expects shape (T, {N_LANDMARKS}, 2), got {arr.shape}")
        if arr.shape[0] < 2:
            raise DomainError(f"LandmarkSequence needs at least 2 frames, got {arr.shape[0]}")
        object.__setattr__(self, "points", arr)

    @classmethod
    def from_grids(cls, grids: Sequence[LandmarkGrid]) -> "LandmarkSequence":
        return cls(np.stack([g.points for g in grids]))

    @property
    def n_frames(self) -> int:
        return self.points.shape[0]

    def frame(self, t: int) -> LandmarkGrid:
        return LandmarkGrid(self.points[t])

    def is_empty_frame(self, t: int) -> bool:
        return not np.any(self.points[t])

    def __len__(self) -> int:
        return self.n_frames

    def __iter__(self):
        for t in range(self.n_frames):
            yield self.frame(t)


def grid_array(spec: AnnulusSpec) -> np.ndarray:
    rings = np.arange(RINGS, dtype=np.float64)
    spokes = np.arange(SPOKES, dtype=np.float64)
    radii = spec.r_endo + (rings / (RINGS - 1)) * (spec.r_epi - spec.r_endo)
    angles = spec.theta_start + spec.orientation * spokes * (2 * math.pi / SPOKES)
    r = np.repeat(radii, SPOKES)
    a = np.tile(angles, RINGS)
    return np.stack([spec.center.x + r * np.cos(a), spec.center.y + r * np.sin(a)], axis=-1)


def build_grid(spec: AnnulusSpec) -> LandmarkGrid:
    return LandmarkGrid(grid_array(spec))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = a.intersection_area(b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def expand_box(b: BoundingBox, fraction: float, image_w: float, image_h: float) -> BoundingBox:
    if fraction < 0:
        raise DomainError(f"expansion fraction must be >= 0, got {fraction}")
    if fraction == 0:
        return BoundingBox(
            max(0.0, b.x_min), max(0.0, b.y_min), min(float(image_w), b.x_max), min(float(image_h), b.y_max)
        )
    cx, cy = b.center
    half_w = 0.5 * b.width * (1.0 + fraction)
    half_h = 0.5 * b.height * (1.0 + fraction)
    return BoundingBox(
        max(0.0, cx - half_w),
        max(0.0, cy - half_h),
        min(float(image_w), cx + half_w),
        min(float(image_h), cy + half_h),
    )


def points_bbox(points: np.ndarray) -> BoundingBox:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    return BoundingBox(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def landmarks_bbox(grid: LandmarkGrid) -> BoundingBox:
    return points_bbox(grid.points)


def map_points(
    points: np.ndarray,
    from_box: BoundingBox,
    to_w: float,
    to_h: float,
    direction: str = FORWARD,
) -> np.ndarray:
    """Affine map between original coordinates inside ``from_box`` and a to_w x to_h crop."""
    if to_w <= 0 or to_h <= 0:
        raise DomainError(f"crop size must be positive, got {to_w}x{to_h}")
    pts = np.asarray(points, dtype=np.float64)
    scale = np.array([to_w / from_box.width, to_h / from_box.height])
    origin = np.array([from_box.x_min, from_box.y_min])
    if direction == FORWARD:
        return (pts - origin) * scale
    if direction == INVERSE:
        return pts / scale + origin
    raise DomainError(f"unknown map direction: {direction!r}")


def map_coords(
    p: Point2,
    from_box: BoundingBox,
    to_w: float,
    to_h: float,
    direction: str = FORWARD,
) -> Point2:
    x, y = map_points(np.array([p[0], p[1]]), from_box, to_w, to_h, direction)
    return Point2(float(x), float(y))


def rotate_points(points: np.ndarray, angle: float, about: Point2) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    origin = np.array([about[0], about[1]])
    return (np.asarray(points, dtype=np.float64) - origin) @ rot.T + origin


def scale_points(points: np.ndarray, k: float, about: Point2) -> np.ndarray:
    origin = np.array([about[0], about[1]])
    return (np.asarray(points, dtype=np.float64) - origin) * k + origin


def translate_points(points: np.ndarray, dx: float, dy: float) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) + np.array([dx, dy])
