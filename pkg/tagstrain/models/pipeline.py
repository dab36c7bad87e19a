"""End-to-end inference: pad, localize on ED, crop every frame, track, map back, strain."""

from __future__ import annotations

import contextlib
import logging
import time
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from tagstrain.errors import ConfigError, DataError, DegenerateBoxError, StageError, TagstrainError
from tagstrain.geometry import BoundingBox, LandmarkSequence, expand_box
from tagstrain.models.checkpoint import ModelCheckpoint
from tagstrain.models.localizer import Localizer
from tagstrain.models.tracker import Tracker
from tagstrain.preprocess import Cine, CropTransform, crop_pipeline, prepare_cine
from tagstrain.strain import SliceStrainCurve, strain_curve

logger = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    landmarks: LandmarkSequence
    curve: SliceStrainCurve
    tight_box: BoundingBox
    crop_box: BoundingBox
    transform: CropTransform
    fallback: bool
    frames_per_second: float


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    logger.debug("pipeline stage: %s", name)
    try:
        yield
    except StageError:
        raise
    except (TagstrainError, ValueError, FloatingPointError) as exc:
        raise StageError(name, exc) from exc


class Pipeline:
    """Loaded localizer + tracker pair; reusable across cines."""

    def __init__(self, localizer_ckpt: ModelCheckpoint, tracker_ckpt: ModelCheckpoint):
        with stage("load"):
            self.localizer = Localizer(localizer_ckpt)
            self.tracker = Tracker(tracker_ckpt)
            if self.localizer.pre != self.tracker.pre:
                raise ConfigError("localizer and tracker were trained with different preprocessing configs")
        self.pre = self.tracker.pre

    def run(self, cine: Cine) -> PipelineResult:
        if cine.n_valid < 2:
            raise DataError(f"{cine.case_id or 'cine'}: strain needs at least 2 valid frames, got {cine.n_valid}")
        start = time.perf_counter()
        with stage("preprocess"):
            prepared = prepare_cine(cine, self.pre)
        fallback = False
        with stage("localize"):
            try:
                tight = self.localizer.predict_box(prepared.frames[0])
                box = expand_box(tight, self.pre.expand_fraction, self.pre.pad_to, self.pre.pad_to)
            except DegenerateBoxError as exc:
                logger.warning("%s: %s; falling back to the full padded frame", cine.case_id or "cine", exc)
                tight = box = BoundingBox(0.0, 0.0, float(prepared.width), float(prepared.height))
                fallback = True
        with stage("crop"):
            cropped, transform = crop_pipeline(prepared, box, self.pre)
        with stage("track"):
            crop_points = self.tracker.track(cropped).points
        with stage("map"):
            n = min(cine.n_valid, crop_points.shape[0])
            landmarks = LandmarkSequence(transform.to_original(crop_points[:n]))
        with stage("strain"):
            curve = strain_curve(landmarks)
        elapsed = time.perf_counter() - start
        fps = prepared.n_frames / max(elapsed, 1e-9)
        logger.debug("pipeline: %d frames in %.3f s", prepared.n_frames, elapsed)
        return PipelineResult(
            landmarks=landmarks,
            curve=curve,
            tight_box=tight.translate(-prepared.pad_offsets[1], -prepared.pad_offsets[0]),
            crop_box=transform.box.translate(-prepared.pad_offsets[1], -prepared.pad_offsets[0]),
            transform=transform,
            fallback=fallback,
            frames_per_second=float(fps),
        )


def full_pipeline(localizer_ckpt: ModelCheckpoint, tracker_ckpt: ModelCheckpoint, cine: Cine) -> PipelineResult:
    return Pipeline(localizer_ckpt, tracker_ckpt).run(cine)


def zero_motion_floor(result: PipelineResult) -> float:
    """Largest absolute strain over valid frames; the noise floor on a static cine."""
    return float(np.max(np.abs(result.curve.to_array()[: result.curve.n_valid])))
