"""Checkpoint container: magic, length-prefixed JSON header, float32 arrays.

Layout (little-endian):

    b"TAGSTRAINCKPT" | uint32 header length | UTF-8 JSON header | arrays

The header lists every array as {name, shape} in storage order; arrays follow
back to back as float32. Headers are written with sorted keys so a load/save
round trip reproduces the input bytes.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from tagstrain.errors import FormatError
from tagstrain.formats import dumps, make_provenance, read_bytes, write_bytes

CKPT_MAGIC = b"TAGSTRAINCKPT"
KINDS = ("localizer", "tracker")


@dataclass
class ModelCheckpoint:
    kind: str
    config: Dict[str, Any]
    preprocess: Dict[str, Any]
    parameters: "OrderedDict[str, np.ndarray]"
    epoch: int = 0
    seed: int = 0
    optimizer: Dict[str, Any] = field(default_factory=dict)
    provenance: Dict[str, Any] = field(default_factory=make_provenance)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise FormatError(f"checkpoint kind must be one of {KINDS}, got {self.kind!r}")

    def header(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "config": self.config,
            "preprocess": self.preprocess,
            "epoch": self.epoch,
            "seed": self.seed,
            "optimizer": self.optimizer,
            "parameters": [{"name": k, "shape": list(v.shape)} for k, v in self.parameters.items()],
            "provenance": self.provenance,
        }

    def to_bytes(self) -> bytes:
        raw = dumps(self.header()).encode("utf-8")
        out = io.BytesIO()
        out.write(CKPT_MAGIC)
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        for values in self.parameters.values():
            out.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, payload: bytes, source: str = "<bytes>") -> "ModelCheckpoint":
        if payload[: len(CKPT_MAGIC)] != CKPT_MAGIC:
            raise FormatError(f"{source}: not a tagstrain checkpoint (bad magic)")
        offset = len(CKPT_MAGIC)
        if len(payload) < offset + 4:
            raise FormatError(f"{source}: truncated checkpoint header")
        (n,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        try:
            header = json.loads(payload[offset:offset + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{source}: bad checkpoint header: {exc}") from exc
        offset += n
        params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for entry in header.get("parameters", []):
            shape = tuple(int(s) for s in entry["shape"])
            size = int(np.prod(shape, dtype=np.int64))
            end = offset + 4 * size
            if end > len(payload):
                raise FormatError(f"{source}: array {entry['name']} runs past the end of the file")
            params[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32)
            offset = end
        if offset != len(payload):
            raise FormatError(f"{source}: {len(payload) - offset} trailing bytes after the last array")
        try:
            return cls(
                kind=header["kind"],
                config=header["config"],
                preprocess=header["preprocess"],
                parameters=params,
                epoch=int(header["epoch"]),
                seed=int(header["seed"]),
                optimizer=header.get("optimizer", {}),
                provenance=header.get("provenance", {}),
            )
        except KeyError as exc:
            raise FormatError(f"{source}: checkpoint header misses {exc}") from exc

    def save(self, path: Union[str, Path]) -> None:
        write_bytes(Path(path), self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelCheckpoint":
        path = Path(path)
        return cls.from_bytes(read_bytes(path), str(path))


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    metrics: List[Dict[str, Any]]
