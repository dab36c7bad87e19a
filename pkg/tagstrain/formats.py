"""On-disk formats: landmark JSON, cine binary and strain CSV.

Every writer embeds a ``provenance`` block (tool version + effective config) and
serializes JSON with sorted keys so identical inputs give identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from tagstrain import __version__
from tagstrain.errors import FormatError
from tagstrain.geometry import N_LANDMARKS, RINGS, SPOKES, LandmarkSequence
from tagstrain.preprocess import Cine
from tagstrain.strain import COMPONENTS, SliceStrain, SliceStrainCurve

PathLike = Union[str, Path]

LANDMARK_FORMAT = "tagstrain-landmarks"
LANDMARK_VERSION = 1
CINE_MAGIC = b"TAGSTRAINCINE\0\0\0"
CINE_DTYPE = "f32le"


def make_provenance(config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {"tool_version": __version__, "config": config or {}}


def dumps(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_bytes(path: Path, payload: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as exc:
        raise FormatError(f"failed to write {path}: {exc}") from exc


def read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise FormatError(f"failed to read {path}: {exc}") from exc


# === Landmarks ===

@dataclass
class LandmarkFile:
    sequence: LandmarkSequence
    pixel_spacing_mm: float
    case_id: str = ""
    region: Optional[str] = None
    transform: Optional[Dict[str, Any]] = None
    status: Optional[np.ndarray] = None
    extra: Dict[str, Any] = field(default_factory=dict)
    provenance: Dict[str, Any] = field(default_factory=make_provenance)


def write_landmarks(path: PathLike, doc: LandmarkFile) -> None:
    seq = doc.sequence
    header: Dict[str, Any] = {
        "format": LANDMARK_FORMAT,
        "version": LANDMARK_VERSION,
        "frames": seq.n_frames,
        "rings": RINGS,
        "spokes": SPOKES,
        "pixel_spacing_mm": float(doc.pixel_spacing_mm),
        "case_id": doc.case_id,
        "provenance": doc.provenance,
    }
    if doc.region is not None:
        header["region"] = doc.region
    if doc.transform is not None:
        header["transform"] = doc.transform
    header.update(doc.extra)
    body: Dict[str, Any] = {
        "header": header,
        "frames": [[[float(x), float(y)] for x, y in frame] for frame in seq.points],
    }
    if doc.status is not None:
        body["status"] = np.asarray(doc.status, dtype=int).tolist()
    write_bytes(Path(path), (dumps(body) + "\n").encode("utf-8"))


def read_landmarks(path: PathLike) -> LandmarkFile:
    path = Path(path)
    try:
        body = json.loads(read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a landmark JSON document: {exc}") from exc
    header = body.get("header") if isinstance(body, dict) else None
    if not isinstance(header, dict) or header.get("format") != LANDMARK_FORMAT:
        raise FormatError(f"{path}: missing {LANDMARK_FORMAT} header")
    if header.get("version") != LANDMARK_VERSION:
        raise FormatError(f"{path}: unsupported landmark version {header.get('version')!r}")
    if header.get("rings") != RINGS or header.get("spokes") != SPOKES:
        raise FormatError(f"{path}: expected {RINGS} rings x {SPOKES} spokes")
    points = np.asarray(body.get("frames"), dtype=np.float64)
    if points.ndim != 3 or points.shape[1:] != (N_LANDMARKS, 2) or points.shape[0] != header.get("frames"):
        raise FormatError(f"{path}: frames array has shape {points.shape}, header says {header.get('frames')}")
    known = {"format", "version", "frames", "rings", "spokes", "pixel_spacing_mm", "case_id",
             "region", "transform", "provenance"}
    status = body.get("status")
    return LandmarkFile(
        sequence=LandmarkSequence(points),
        pixel_spacing_mm=float(header.get("pixel_spacing_mm", 1.0)),
        case_id=str(header.get("case_id") or path.name.split(".")[0]),
        region=header.get("region"),
        transform=header.get("transform"),
        status=None if status is None else np.asarray(status, dtype=np.uint8),
        extra={k: v for k, v in header.items() if k not in known},
        provenance=header.get("provenance") or {},
    )


# === Cine ===

def encode_cine(cine: Cine, provenance: Optional[Dict[str, Any]] = None) -> bytes:
    frames = np.asarray(cine.frames)
    t, h, w = frames.shape
    header = {
        "width": w,
        "height": h,
        "frames": t,
        "pixel_spacing_mm": float(cine.pixel_spacing_mm),
        "dtype": CINE_DTYPE,
        "case_id": cine.case_id,
        "slice_id": cine.slice_id,
        "provenance": provenance or make_provenance(),
    }
    raw_header = dumps(header).encode("utf-8")
    out = io.BytesIO()
    out.write(CINE_MAGIC)
    out.write(struct.pack("<I", len(raw_header)))
    out.write(raw_header)
    out.write(frames.astype("<f4").tobytes(order="C"))
    return out.getvalue()


def decode_cine(payload: bytes, source: str = "<bytes>") -> Tuple[Cine, Dict[str, Any]]:
    if payload[: len(CINE_MAGIC)] != CINE_MAGIC:
        raise FormatError(f"{source}: bad cine magic")
    offset = len(CINE_MAGIC)
    if len(payload) < offset + 4:
        raise FormatError(f"{source}: truncated cine header")
    (n,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    try:
        header = json.loads(payload[offset:offset + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: bad cine header: {exc}") from exc
    offset += n
    if header.get("dtype") != CINE_DTYPE:
        raise FormatError(f"{source}: unsupported cine dtype {header.get('dtype')!r}")
    t, h, w = int(header["frames"]), int(header["height"]), int(header["width"])
    expected = t * h * w * 4
    if len(payload) - offset != expected:
        raise FormatError(f"{source}: expected {expected} data bytes, found {len(payload) - offset}")
    frames = np.frombuffer(payload, dtype="<f4", offset=offset).reshape(t, h, w).astype(np.float32)
    cine = Cine(
        frames=frames,
        pixel_spacing_mm=float(header["pixel_spacing_mm"]),
        case_id=str(header.get("case_id", "")),
        slice_id=str(header.get("slice_id", "0")),
    )
    return cine, header


def write_cine(path: PathLike, cine: Cine, provenance: Optional[Dict[str, Any]] = None) -> None:
    write_bytes(Path(path), encode_cine(cine, provenance))


def read_cine(path: PathLike) -> Cine:
    path = Path(path)
    cine, _header = decode_cine(read_bytes(path), str(path))
    return cine


# === Strain CSV ===

STRAIN_HEADER = ("frame_index",) + COMPONENTS


def provenance_trailer(provenance: Optional[Dict[str, Any]] = None) -> List[str]:
    """`#` comment lines carrying the tool version and config, for CSV outputs."""
    prov = provenance or make_provenance()
    return [f"# tool_version={prov.get('tool_version', __version__)}", f"# config={dumps(prov.get('config', {}))}"]


def format_strain_csv(curve: SliceStrainCurve, provenance: Optional[Dict[str, Any]] = None) -> str:
    lines = [",".join(STRAIN_HEADER)]
    for t, s in enumerate(curve.per_frame):
        lines.append(",".join([str(t)] + [repr(float(v)) for v in s.as_row()]))
    lines.append(f"# es_frame={curve.es_frame}")
    lines.append(f"# n_valid={curve.n_valid}")
    lines += provenance_trailer(provenance)
    return "\n".join(lines) + "\n"


def write_strain_csv(path: PathLike, curve: SliceStrainCurve, provenance: Optional[Dict[str, Any]] = None) -> None:
    write_bytes(Path(path), format_strain_csv(curve, provenance).encode("utf-8"))


def read_strain_csv(path: PathLike) -> Tuple[SliceStrainCurve, Dict[str, Any]]:
    path = Path(path)
    text = read_bytes(path).decode("utf-8")
    rows: List[SliceStrain] = []
    meta: Dict[str, Any] = {}
    lines = text.splitlines()
    if not lines or lines[0].split(",") != list(STRAIN_HEADER):
        raise FormatError(f"{path}: missing strain CSV header")
    for line in lines[1:]:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
            continue
        cells = line.split(",")
        if len(cells) != len(STRAIN_HEADER):
            raise FormatError(f"{path}: malformed row {line!r}")
        rows.append(SliceStrain.from_array([float(c) for c in cells[1:]]))
    try:
        es_frame = int(meta["es_frame"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: missing '# es_frame=' line") from exc
    n_valid = int(meta.get("n_valid", len(rows)))
    config = json.loads(meta["config"]) if "config" in meta else {}
    provenance = {"tool_version": meta.get("tool_version"), "config": config}
    return SliceStrainCurve(per_frame=tuple(rows), es_frame=es_frame, n_valid=n_valid), provenance


def write_json(path: PathLike, doc: Any, indent: Optional[int] = 2) -> None:
    text = json.dumps(doc, indent=indent, sort_keys=True, allow_nan=False)
    write_bytes(Path(path), (text + "\n").encode("utf-8"))


def read_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        return json.loads(read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc


def write_jsonl(path: PathLike, records: List[Dict[str, Any]], provenance: Optional[Dict[str, Any]] = None) -> None:
    """One JSON object per line; ``provenance`` becomes a leading `{"provenance": ...}` record."""
    if provenance is not None:
        records = [{"provenance": provenance}] + list(records)
    text = "".join(dumps(record) + "\n" for record in records)
    write_bytes(Path(path), text.encode("utf-8"))


def read_jsonl(path: PathLike) -> List[Dict[str, Any]]:
    path = Path(path)
    records = []
    for lineno, line in enumerate(read_bytes(path).decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON line: {exc}") from exc
    return records


def read_metrics(path: PathLike) -> Tuple[List[Dict[str, Any]], Dict[str, Any]]:
    """Training metrics rows and the provenance record ({} when the log has none)."""
    records = read_jsonl(path)
    if records and set(records[0]) == {"provenance"}:
        return records[1:], records[0]["provenance"]
    return records, {}
