"""Analytic ground truth: a deforming incompressible annulus with SPAMM tags.

The myocardium is a 2-D annulus about ``annulus.center``. At activation a the
endocardial radius shrinks to r_endo * (1 - c * a) and every material radius r0
in the wall moves to sqrt(r0^2 - D) with D = r_endo^2 - r_endo(t)^2, which keeps
the area between any two material radii constant. The wall also rotates by
peak_rotation * a. The blood pool scales linearly and a cosine band beyond the
epicardium blends the motion back to identity.

Tags are a product of two cos^2 line patterns evaluated at the material
(reference) position, so they move with tissue.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from tagstrain import formats
from tagstrain.errors import DomainError
from tagstrain.geometry import (
    RINGS,
    AnnulusSpec,
    BoundingBox,
    LandmarkSequence,
    Point2,
    grid_array,
    points_bbox,
)
from tagstrain.preprocess import Cine
from tagstrain.schema import to_dict
from tagstrain.strain import SliceStrain, SliceStrainCurve, strain_curve

logger = logging.getLogger(__name__)

REGIONS = ("basal", "mid", "apical")
SPLITS = ("train", "val", "test")
RELAXED_ACTIVATION = 0.15
MANIFEST_FORMAT = "tagstrain-manifest"
MANIFEST_VERSION = 1
_BISECTION_STEPS = 60


@dataclass(frozen=True)
class PhantomSpec:
    image_w: int = 256
    image_h: int = 256
    pixel_spacing_mm: float = 1.4
    frames: int = 20
    annulus: AnnulusSpec = AnnulusSpec(center=Point2(128.0, 128.0), r_endo=20.0, r_epi=30.0)
    peak_endo_contraction: float = 0.1
    peak_rotation: float = 0.1
    es_frame: int = 9
    tag_spacing_mm: float = 6.0
    tag_angle: float = 0.0
    tag_depth: float = 0.8
    fade_rate: Optional[float] = None
    t1_ms: float = 850.0
    frame_interval_ms: float = 41.0
    noise_sigma: float = 0.02
    background_level: float = 1.0
    blood_level: float = 0.25
    outside_level: float = 0.6
    blend_band_px: float = 8.0
    region: str = "mid"
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.image_w < 2 or self.image_h < 2:
            raise DomainError(f"image must be at least 2x2, got {self.image_w}x{self.image_h}")
        if self.frames < 2:
            raise DomainError(f"phantom needs at least 2 frames, got {self.frames}")
        if not 0.0 <= self.peak_endo_contraction < 0.5:
            raise DomainError(f"peak_endo_contraction must lie in [0, 0.5), got {self.peak_endo_contraction}")
        if not 1 <= self.es_frame < self.frames:
            raise DomainError(f"es_frame must lie in [1, {self.frames}), got {self.es_frame}")
        if self.tag_spacing_mm <= 0 or self.pixel_spacing_mm <= 0:
            raise DomainError("tag_spacing_mm and pixel_spacing_mm must be positive")
        if not 0.0 <= self.tag_depth <= 1.0:
            raise DomainError(f"tag_depth must lie in [0, 1], got {self.tag_depth}")
        if self.fade_rate is not None and self.fade_rate < 0:
            raise DomainError(f"fade_rate must be >= 0, got {self.fade_rate}")
        if self.t1_ms <= 0 or self.frame_interval_ms <= 0:
            raise DomainError("t1_ms and frame_interval_ms must be positive")
        if self.noise_sigma < 0:
            raise DomainError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.blend_band_px <= 0:
            raise DomainError(f"blend_band_px must be positive, got {self.blend_band_px}")
        if self.region not in REGIONS:
            raise DomainError(f"region must be one of {REGIONS}, got {self.region!r}")
        if self.rng_seed < 0:
            raise DomainError(f"rng_seed must be non-negative, got {self.rng_seed}")

    @property
    def effective_fade_rate(self) -> float:
        if self.fade_rate is not None:
            return self.fade_rate
        return self.frame_interval_ms / self.t1_ms

    @property
    def tag_period_px(self) -> float:
        return self.tag_spacing_mm / self.pixel_spacing_mm


def activation(t: float, spec: PhantomSpec) -> float:
    if not 0 <= t <= spec.frames - 1:
        raise DomainError(f"frame {t} outside [0, {spec.frames - 1}]")
    es = spec.es_frame
    if t <= es:
        return 0.5 * (1.0 - math.cos(math.pi * t / es))
    span = spec.frames - 1 - es
    return RELAXED_ACTIVATION + (1.0 - RELAXED_ACTIVATION) * 0.5 * (1.0 + math.cos(math.pi * (t - es) / span))


def _motion(t: float, spec: PhantomSpec) -> Tuple[float, float, float, float]:
    """(activation, current endo radius, area shift D, rotation) at frame t."""
    a = activation(t, spec)
    r_endo = spec.annulus.r_endo
    r_endo_t = r_endo * (1.0 - spec.peak_endo_contraction * a)
    return a, r_endo_t, r_endo * r_endo - r_endo_t * r_endo_t, spec.peak_rotation * a


def _band_weight(r0: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    u = np.clip((r0 - spec.annulus.r_epi) / spec.blend_band_px, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(math.pi * u))


def _band_radius(r0: np.ndarray, delta: float, spec: PhantomSpec) -> np.ndarray:
    g = np.sqrt(np.maximum(r0 * r0 - delta, 0.0))
    return r0 + _band_weight(r0, spec) * (g - r0)


def _polar_apply(points: np.ndarray, center: Point2, k: np.ndarray, angle: np.ndarray) -> np.ndarray:
    c = np.array([center.x, center.y])
    d = points - c
    cos, sin = np.cos(angle), np.sin(angle)
    x = cos * d[..., 0] - sin * d[..., 1]
    y = sin * d[..., 0] + cos * d[..., 1]
    return c + np.stack([x, y], axis=-1) * k[..., None]


def deform_points(points: np.ndarray, t: float, spec: PhantomSpec) -> np.ndarray:
    """Move reference positions (..., 2) to their positions at frame t."""
    pts = np.asarray(points, dtype=np.float64)
    a, r_endo_t, delta, rot = _motion(t, spec)
    if a == 0.0:
        return pts.copy()
    ann = spec.annulus
    d = pts - np.array([ann.center.x, ann.center.y])
    r0 = np.hypot(d[..., 0], d[..., 1])
    pool = r0 < ann.r_endo
    wall = ~pool & (r0 <= ann.r_epi)
    band = (r0 > ann.r_epi) & (r0 < ann.r_epi + spec.blend_band_px)
    safe = np.where(r0 > 0, r0, 1.0)

    k = np.ones_like(r0)
    k[pool] = r_endo_t / ann.r_endo
    k[wall] = np.sqrt(r0[wall] ** 2 - delta) / safe[wall]
    k[band] = _band_radius(r0[band], delta, spec) / safe[band]

    angle = np.zeros_like(r0)
    angle[pool | wall] = rot
    angle[band] = _band_weight(r0[band], spec) * rot
    return _polar_apply(pts, ann.center, k, angle)


def deform(p_ref: Point2, t: float, spec: PhantomSpec) -> Point2:
    x, y = deform_points(np.array([p_ref[0], p_ref[1]]), t, spec)
    return Point2(float(x), float(y))


def inverse_deform_points(points: np.ndarray, t: float, spec: PhantomSpec) -> np.ndarray:
    """Reference (material) positions of current positions (..., 2) at frame t."""
    pts = np.asarray(points, dtype=np.float64)
    a, r_endo_t, delta, rot = _motion(t, spec)
    if a == 0.0:
        return pts.copy()
    ann = spec.annulus
    d = pts - np.array([ann.center.x, ann.center.y])
    r = np.hypot(d[..., 0], d[..., 1])
    r_epi_t = math.sqrt(ann.r_epi ** 2 - delta)
    band_end = ann.r_epi + spec.blend_band_px
    pool = r < r_endo_t
    wall = ~pool & (r <= r_epi_t)
    band = (r > r_epi_t) & (r < band_end)
    safe = np.where(r > 0, r, 1.0)

    k = np.ones_like(r)
    k[pool] = ann.r_endo / r_endo_t
    k[wall] = np.sqrt(r[wall] ** 2 + delta) / safe[wall]

    angle = np.zeros_like(r)
    angle[pool | wall] = -rot
    if np.any(band):
        target = r[band]
        lo = np.full_like(target, ann.r_epi)
        hi = np.full_like(target, band_end)
        # the band map is strictly increasing in r0
        for _ in range(_BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            above = _band_radius(mid, delta, spec) > target
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        r0 = 0.5 * (lo + hi)
        k[band] = r0 / safe[band]
        angle[band] = -_band_weight(r0, spec) * rot
    return _polar_apply(pts, ann.center, k, angle)


def inverse_deform(x: Point2, t: float, spec: PhantomSpec) -> Point2:
    px, py = inverse_deform_points(np.array([x[0], x[1]]), t, spec)
    return Point2(float(px), float(py))


def tag_depth_at(t: float, spec: PhantomSpec) -> float:
    return spec.tag_depth * math.exp(-spec.effective_fade_rate * t)


def tag_modulation(material: np.ndarray, depth: float, spec: PhantomSpec) -> np.ndarray:
    s = spec.tag_period_px
    cu, su = math.cos(spec.tag_angle), math.sin(spec.tag_angle)
    along_u = cu * material[..., 0] + su * material[..., 1]
    along_v = -su * material[..., 0] + cu * material[..., 1]
    return (1.0 - depth * np.cos(math.pi * along_u / s) ** 2) * (1.0 - depth * np.cos(math.pi * along_v / s) ** 2)


def render_frame(t: int, spec: PhantomSpec) -> np.ndarray:
    ys, xs = np.mgrid[0:spec.image_h, 0:spec.image_w]
    pixels = np.stack([xs + 0.5, ys + 0.5], axis=-1).astype(np.float64)
    material = inverse_deform_points(pixels, t, spec)
    ann = spec.annulus
    r0 = np.hypot(material[..., 0] - ann.center.x, material[..., 1] - ann.center.y)

    tags = tag_modulation(material, tag_depth_at(t, spec), spec)
    image = np.where(r0 < ann.r_endo, spec.blood_level, 0.0)
    image = np.where(r0 >= ann.r_endo, np.where(r0 <= ann.r_epi, spec.background_level, spec.outside_level) * tags, image)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([spec.rng_seed, t]))
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return image.astype(np.float32)


def analytic_strain(spec: PhantomSpec, t: float) -> SliceStrain:
    """Closed-form strain of the landmark grid at frame t against frame 0."""
    _a, _r_endo_t, delta, _rot = _motion(t, spec)
    radii = np.array([spec.annulus.ring_radius(k) for k in range(RINGS)])
    current = np.sqrt(radii * radii - delta)
    rings = 0.5 * (current * current / (radii * radii) - 1.0)
    chord_ref = radii[-1] - radii[0]
    chord = current[-1] - current[0]
    eps_r = 0.5 * (chord * chord / (chord_ref * chord_ref) - 1.0)
    return SliceStrain(
        eps_R=float(eps_r),
        eps_C=float(rings.mean()),
        eps_C_subendo=float(rings[1]),
        eps_C_midwall=float(rings[3]),
        eps_C_subepi=float(rings[5]),
    )


@dataclass(frozen=True, eq=False)
class PhantomCase:
    cine: Cine
    truth_landmarks: LandmarkSequence
    truth_bbox: BoundingBox
    truth_strain: SliceStrainCurve
    spec: PhantomSpec


def truth_points(spec: PhantomSpec) -> np.ndarray:
    grid = grid_array(spec.annulus)
    return np.stack([deform_points(grid, t, spec) for t in range(spec.frames)])


def generate_case(spec: PhantomSpec, case_id: str = "") -> PhantomCase:
    sequence = LandmarkSequence(truth_points(spec))
    frames = np.stack([render_frame(t, spec) for t in range(spec.frames)])
    cine = Cine(frames=frames, pixel_spacing_mm=spec.pixel_spacing_mm, case_id=case_id)
    return PhantomCase(
        cine=cine,
        truth_landmarks=sequence,
        truth_bbox=points_bbox(sequence.points[0]),
        truth_strain=strain_curve(sequence),
        spec=spec,
    )


Range = Tuple[float, float]


@dataclass(frozen=True)
class DatasetRanges:
    """Additive uniform perturbations applied to the base spec, per case."""

    center_x: Range = (-10.0, 10.0)
    center_y: Range = (-10.0, 10.0)
    r_endo: Range = (-3.0, 3.0)
    r_epi: Range = (-3.0, 3.0)
    peak_endo_contraction: Range = (-0.05, 0.1)
    peak_rotation: Range = (-0.1, 0.1)
    noise_sigma: Range = (0.0, 0.03)
    fade_rate: Range = (-0.01, 0.01)
    theta_start: Range = (-0.3, 0.3)

    def __post_init__(self) -> None:
        for name, (lo, hi) in to_dict(self).items():
            if lo > hi:
                raise DomainError(f"range {name} has low {lo} > high {hi}")

    @classmethod
    def zero(cls) -> "DatasetRanges":
        return cls(**{name: (0.0, 0.0) for name in to_dict(cls())})


@dataclass(frozen=True)
class SplitFractions:
    train: float = 0.72
    val: float = 0.18
    test: float = 0.10

    def __post_init__(self) -> None:
        values = (self.train, self.val, self.test)
        if any(v < 0 for v in values) or abs(sum(values) - 1.0) > 1e-6:
            raise DomainError(f"split fractions must be non-negative and sum to 1, got {values}")

    def counts(self, n: int) -> Tuple[int, int, int]:
        counts = [int(math.floor(f * n + 1e-9)) for f in (self.train, self.val, self.test)]
        k = 0
        while sum(counts) < n:
            counts[k % 3] += 1
            k += 1
        return counts[0], counts[1], counts[2]


def assign_splits(n: int, fractions: SplitFractions, seed: int) -> List[str]:
    labels = [name for name, count in zip(SPLITS, fractions.counts(n)) for _ in range(count)]
    order = np.random.default_rng(np.random.SeedSequence([seed, n, 1])).permutation(n)
    splits = [""] * n
    for j, i in enumerate(order):
        splits[int(i)] = labels[j]
    return splits


def draw_spec(base: PhantomSpec, ranges: DatasetRanges, seed: int, case_index: int) -> PhantomSpec:
    rng = np.random.default_rng(np.random.SeedSequence([seed, case_index]))

    def draw(bounds: Range) -> float:
        return float(rng.uniform(bounds[0], bounds[1]))

    ann = base.annulus
    cx, cy = ann.center.x + draw(ranges.center_x), ann.center.y + draw(ranges.center_y)
    r_endo = ann.r_endo + draw(ranges.r_endo)
    r_epi = ann.r_epi + draw(ranges.r_epi)
    theta = (ann.theta_start + draw(ranges.theta_start)) % (2 * math.pi)
    contraction = min(max(base.peak_endo_contraction + draw(ranges.peak_endo_contraction), 0.0), 0.49)
    rotation = base.peak_rotation + draw(ranges.peak_rotation)
    noise = max(base.noise_sigma + draw(ranges.noise_sigma), 0.0)
    fade_delta = draw(ranges.fade_rate)
    fade = base.fade_rate if fade_delta == 0.0 else max(base.effective_fade_rate + fade_delta, 0.0)
    annulus = AnnulusSpec(Point2(cx, cy), r_endo, r_epi, theta, ann.orientation)
    return replace(
        base,
        annulus=annulus,
        peak_endo_contraction=contraction,
        peak_rotation=rotation,
        noise_sigma=noise,
        fade_rate=fade,
        rng_seed=base.rng_seed + case_index,
    )


@dataclass
class DatasetManifest:
    cases: List[Dict[str, Any]] = field(default_factory=list)
    provenance: Dict[str, Any] = field(default_factory=formats.make_provenance)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "provenance": self.provenance,
            "cases": self.cases,
        }

    def split(self, name: str) -> List[Dict[str, Any]]:
        return [c for c in self.cases if c["split"] == name]


def _write_case(root: Path, index: int, spec: PhantomSpec, split: str, provenance: Dict[str, Any]) -> Dict[str, Any]:
    case_id = f"case_{index:04d}"
    case = generate_case(spec, case_id)
    cine_rel = f"cines/{case_id}.cine"
    landmarks_rel = f"landmarks/{case_id}.landmarks.json"
    formats.write_cine(root / cine_rel, case.cine, provenance)
    formats.write_landmarks(
        root / landmarks_rel,
        formats.LandmarkFile(
            sequence=case.truth_landmarks,
            pixel_spacing_mm=spec.pixel_spacing_mm,
            case_id=case_id,
            region=spec.region,
            provenance=provenance,
        ),
    )
    logger.debug("wrote %s (%s, es midwall %.4f)", case_id, split, case.truth_strain.at_es.eps_C_midwall)
    return {
        "case_id": case_id,
        "cine_path": cine_rel,
        "landmarks_path": landmarks_rel,
        "bbox": case.truth_bbox.as_list(),
        "split": split,
        "region": spec.region,
        "spec": to_dict(spec),
    }


def generate_dataset(
    out_dir: Union[str, Path],
    n_cases: int,
    base: PhantomSpec,
    ranges: DatasetRanges,
    seed: int,
    fractions: SplitFractions = SplitFractions(),
    threads: Optional[int] = None,
    config: Optional[Dict[str, Any]] = None,
) -> DatasetManifest:
    """Render n_cases phantoms under out_dir and write manifest.json.

    Case i draws its parameters from SeedSequence([seed, i]), so the output does
    not depend on the order worker threads finish in.
    """
    if n_cases < 1:
        raise DomainError(f"n_cases must be >= 1, got {n_cases}")
    root = Path(out_dir)
    provenance = formats.make_provenance(config)
    specs = [draw_spec(base, ranges, seed, i) for i in range(n_cases)]
    splits = assign_splits(n_cases, fractions, seed)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        cases = list(pool.map(lambda i: _write_case(root, i, specs[i], splits[i], provenance), range(n_cases)))
    manifest = DatasetManifest(cases=cases, provenance=provenance)
    formats.write_json(root / "manifest.json", manifest.to_dict())
    counts = {name: len(manifest.split(name)) for name in SPLITS}
    logger.info("generated %d cases in %s (train %d, val %d, test %d)", n_cases, root, counts["train"], counts["val"], counts["test"])
    return manifest
