"""Green strain from landmark motion.

For a segment of reference length L0 and current length L the Green strain is
1/2 (L^2 - L0^2) / L0^2. Radial strain averages the 24 transmural chords
(ring 0 to ring 6 along each spoke); circumferential strain averages the 24
wrap-around segments of a ring. Strain is dimensionless, so coordinates may be
in any consistent unit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Sequence, Tuple

import numpy as np

from tagstrain.errors import DegenerateGeometryError, DomainError
from tagstrain.geometry import (
    MIDWALL_RING,
    RINGS,
    SPOKES,
    SUBENDO_RING,
    SUBEPI_RING,
    LandmarkGrid,
    LandmarkSequence,
)

logger = logging.getLogger(__name__)

COMPONENTS = ("eps_R", "eps_C", "eps_C_subendo", "eps_C_midwall", "eps_C_subepi")

_NEXT_SPOKE = np.roll(np.arange(SPOKES), -1)


def green_strain(l_ref: float, l_t: float) -> float:
    if not l_ref > 0:
        raise DomainError(f"reference length must be positive, got {l_ref}")
    if l_t < 0:
        raise DomainError(f"segment length must be non-negative, got {l_t}")
    return 0.5 * (l_t * l_t - l_ref * l_ref) / (l_ref * l_ref)


def radial_sq_lengths(points: np.ndarray) -> np.ndarray:
    """Squared endo-to-epi chord lengths, shape (..., 24)."""
    pts = np.asarray(points, dtype=np.float64)
    endo = pts[..., 0:SPOKES, :]
    epi = pts[..., (RINGS - 1) * SPOKES:RINGS * SPOKES, :]
    d = epi - endo
    return np.sum(d * d, axis=-1)


def ring_sq_lengths(points: np.ndarray, ring: int) -> np.ndarray:
    """Squared lengths of the 24 segments joining spoke k to spoke k+1 on a ring."""
    if not 0 <= ring < RINGS:
        raise DomainError(f"ring index must lie in [0, {RINGS - 1}], got {ring}")
    pts = np.asarray(points, dtype=np.float64)
    ring_pts = pts[..., ring * SPOKES:(ring + 1) * SPOKES, :]
    d = ring_pts[..., _NEXT_SPOKE, :] - ring_pts
    return np.sum(d * d, axis=-1)


def _mean_green(ref_sq: np.ndarray, cur_sq: np.ndarray, what: str) -> np.ndarray:
    if np.any(ref_sq <= 0):
        raise DegenerateGeometryError(f"zero-length reference {what} segment")
    return np.mean(0.5 * (cur_sq / ref_sq - 1.0), axis=-1)


def radial_strain(ref: LandmarkGrid, cur: LandmarkGrid) -> float:
    return float(_mean_green(radial_sq_lengths(ref.points), radial_sq_lengths(cur.points), "radial"))


def circ_strain(ref: LandmarkGrid, cur: LandmarkGrid, ring: int) -> float:
    return float(
        _mean_green(ring_sq_lengths(ref.points, ring), ring_sq_lengths(cur.points, ring), "circumferential")
    )


def strain_components(points: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """All strain components of ``points`` (..., 168, 2) against one reference grid.

    Returns an array (..., 5) ordered as ``COMPONENTS``.
    """
    eps_r = _mean_green(radial_sq_lengths(reference), radial_sq_lengths(points), "radial")
    rings = np.stack(
        [
            _mean_green(ring_sq_lengths(reference, r), ring_sq_lengths(points, r), "circumferential")
            for r in range(RINGS)
        ],
        axis=-1,
    )
    return np.stack(
        [
            eps_r,
            rings.mean(axis=-1),
            rings[..., SUBENDO_RING],
            rings[..., MIDWALL_RING],
            rings[..., SUBEPI_RING],
        ],
        axis=-1,
    )


@dataclass(frozen=True)
class SliceStrain:
    eps_R: float = 0.0
    eps_C: float = 0.0
    eps_C_subendo: float = 0.0
    eps_C_midwall: float = 0.0
    eps_C_subepi: float = 0.0

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "SliceStrain":
        return cls(*(float(v) for v in values))

    def as_row(self) -> Tuple[float, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    def get(self, component: str) -> float:
        if component not in COMPONENTS:
            raise DomainError(f"unknown strain component: {component!r}")
        return getattr(self, component)


@dataclass(frozen=True)
class SliceStrainCurve:
    per_frame: Tuple[SliceStrain, ...]
    es_frame: int
    n_valid: int = -1

    def __post_init__(self) -> None:
        n = len(self.per_frame)
        if self.n_valid < 0:
            object.__setattr__(self, "n_valid", n)
        if not 0 <= self.es_frame < n:
            raise DomainError(f"es_frame {self.es_frame} outside [0, {n})")

    def __len__(self) -> int:
        return len(self.per_frame)

    def to_array(self) -> np.ndarray:
        return np.array([s.as_row() for s in self.per_frame], dtype=np.float64)

    def component(self, name: str) -> np.ndarray:
        return self.to_array()[:, COMPONENTS.index(name)]

    @property
    def at_es(self) -> SliceStrain:
        return self.per_frame[self.es_frame]


def slice_strain(ref: LandmarkGrid, cur: LandmarkGrid) -> SliceStrain:
    return SliceStrain.from_array(strain_components(cur.points, ref.points))


def _trailing_empty(points: np.ndarray) -> int:
    empty = ~np.any(points.reshape(points.shape[0], -1), axis=1)
    n = 0
    for flag in empty[::-1]:
        if not flag:
            break
        n += 1
    return n


def strain_curve(seq: LandmarkSequence) -> SliceStrainCurve:
    points = seq.points
    values = strain_components(points, points[0])
    n_valid = points.shape[0] - _trailing_empty(points)
    if n_valid < 1:
        raise DegenerateGeometryError("reference frame is empty")
    es_frame = int(np.argmin(values[:n_valid, COMPONENTS.index("eps_C_midwall")]))
    logger.debug("strain curve: %d frames (%d valid), es_frame=%d", len(values), n_valid, es_frame)
    return SliceStrainCurve(
        per_frame=tuple(SliceStrain.from_array(row) for row in values),
        es_frame=es_frame,
        n_valid=n_valid,
    )


def strain_error(pred: float, truth: float) -> float:
    return abs(pred - truth)


def peak_strain(curve: SliceStrainCurve, component: str) -> float:
    """Extreme value over non-padded frames: max for radial, min for circumferential."""
    values = curve.component(component)[: curve.n_valid]
    if component == "eps_R":
        return float(values.max())
    return float(values.min())
