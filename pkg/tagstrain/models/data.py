"""Dataset manifests and the arrays the two networks train on."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from tagstrain import formats
from tagstrain.errors import DataError, FormatError
from tagstrain.geometry import BoundingBox, LandmarkSequence, expand_box
from tagstrain.phantom import MANIFEST_FORMAT
from tagstrain.preprocess import Cine, CropTransform, PreprocConfig, crop_pipeline, prepare_cine, resample_bicubic

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    root: Path
    cases: List[Dict[str, Any]]
    provenance: Dict[str, Any] = field(default_factory=dict)

    def split(self, name: str, required: bool = True) -> List[Dict[str, Any]]:
        cases = [c for c in self.cases if c.get("split") == name]
        if required and not cases:
            raise DataError(f"split {name!r} of {self.root / 'manifest.json'} is empty")
        return cases

    def case(self, case_id: str) -> Dict[str, Any]:
        for record in self.cases:
            if record["case_id"] == case_id:
                return record
        raise DataError(f"case {case_id!r} not in {self.root / 'manifest.json'}")


def load_manifest(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = formats.read_json(path)
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: not a {MANIFEST_FORMAT} document")
    cases = doc.get("cases")
    if not isinstance(cases, list):
        raise FormatError(f"{path}: manifest has no cases array")
    return Dataset(root=path.parent, cases=cases, provenance=doc.get("provenance") or {})


def load_case(dataset: Dataset, record: Dict[str, Any]) -> Tuple[Cine, LandmarkSequence, BoundingBox]:
    cine = formats.read_cine(dataset.root / record["cine_path"])
    landmarks = formats.read_landmarks(dataset.root / record["landmarks_path"]).sequence
    return cine, landmarks, BoundingBox.from_list(record["bbox"])


def zscore(frame: np.ndarray) -> np.ndarray:
    sd = frame.std()
    centered = frame - frame.mean()
    return centered / sd if sd > 0 else centered


def localizer_input(padded_frame: np.ndarray, input_size: int) -> np.ndarray:
    """(1, S, S) network input from a padded ED frame."""
    frame = np.asarray(padded_frame, dtype=np.float64)
    if frame.shape != (input_size, input_size):
        frame = resample_bicubic(frame, input_size, input_size)
    return zscore(frame)[None].astype(np.float32)


def padded_box(box: BoundingBox, pad_offsets: Tuple[int, int]) -> BoundingBox:
    return box.translate(pad_offsets[1], pad_offsets[0])


def localizer_arrays(dataset: Dataset, records: List[Dict[str, Any]], pre: PreprocConfig, input_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Inputs (N, 1, S, S) and tight-box targets (N, 4) normalized by pad_to."""
    xs, ys = [], []
    for record in records:
        cine, _landmarks, bbox = load_case(dataset, record)
        prepared = prepare_cine(cine, pre)
        xs.append(localizer_input(prepared.frames[0], input_size))
        ys.append(np.array(padded_box(bbox, prepared.pad_offsets).as_list()) / pre.pad_to)
    return np.stack(xs), np.stack(ys)


def normalize_landmarks(points: np.ndarray, target_frames: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pad with all-zero frames or truncate to target_frames; returns (points, mask)."""
    t = points.shape[0]
    mask = np.arange(target_frames) < t
    if t >= target_frames:
        return points[:target_frames].copy(), mask
    pad = np.zeros((target_frames - t,) + points.shape[1:], dtype=points.dtype)
    return np.concatenate([points, pad]), mask


@dataclass
class TrackerSample:
    case_id: str
    frames: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    transform: CropTransform
    truth_original: np.ndarray
    pixel_spacing_mm: float
    region: str


BoxFn = Callable[[np.ndarray], BoundingBox]


def tracker_sample(dataset: Dataset, record: Dict[str, Any], pre: PreprocConfig, box_fn: Optional[BoxFn] = None) -> TrackerSample:
    """Crop and map truth landmarks to [0, 1] crop units.

    The crop box is the expanded truth box unless ``box_fn`` is given, in which
    case it is called on the padded ED frame and must return an expanded box in
    padded coordinates.
    """
    cine, landmarks, bbox = load_case(dataset, record)
    prepared = prepare_cine(cine, pre)
    if box_fn is None:
        box = expand_box(padded_box(bbox, prepared.pad_offsets), pre.expand_fraction, pre.pad_to, pre.pad_to)
    else:
        box = box_fn(prepared.frames[0])
    crops, transform = crop_pipeline(prepared, box, pre)
    points, mask = normalize_landmarks(landmarks.points, pre.target_frames)
    mask &= prepared.frame_mask()
    target = np.where(mask[:, None, None], transform.to_crop(points) / pre.crop_to, 0.0)
    return TrackerSample(
        case_id=record["case_id"],
        frames=crops.frames,
        target=target,
        mask=mask,
        transform=transform,
        truth_original=points,
        pixel_spacing_mm=cine.pixel_spacing_mm,
        region=record.get("region", ""),
    )


def tracker_samples(
    dataset: Dataset, records: List[Dict[str, Any]], pre: PreprocConfig, box_fn: Optional[BoxFn] = None
) -> List[TrackerSample]:
    samples = [tracker_sample(dataset, r, pre, box_fn) for r in records]
    logger.debug("prepared %d tracker samples", len(samples))
    return samples
