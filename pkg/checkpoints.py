"""
Checkpoint container for TinyCnn models.

Byte layout (all integers little-endian):

    offset  size  field
    0       8     magic b"MXBCKPT\\x00"
    8       4     format version (uint32, currently 1)
    12      8     header length H (uint64)
    20      H     header: UTF-8 JSON with sorted keys
                    {"architecture": {...ArchitectureSpec...},
                     "metadata": {...training metadata...},
                     "parameters": [{"name", "shape", "offset", "count"}, ...]}
    20+H    ...   payload: parameter arrays as float64 little-endian, C order,
                  concatenated in header order; "offset" counts bytes from the
                  start of the payload

The header never contains timestamps, so identical models and metadata give
identical files.
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from errors import DataFormatError, ShapeError
from numeric_helpers import canonical_json
from pydantic_models import ArchitectureSpec
from tiny_cnn import TinyCnn

MAGIC = b"MXBCKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def checkpoint_bytes(model: TinyCnn, metadata: Dict[str, Any]) -> bytes:
    entries = []
    payload = bytearray()
    for name, param in model.parameters.items():
        raw = np.ascontiguousarray(param.data, dtype="<f8").tobytes()
        entries.append(
            {"name": name, "shape": list(param.data.shape), "offset": len(payload), "count": int(param.data.size)}
        )
        payload.extend(raw)
    header = canonical_json(
        {
            "architecture": model.spec.model_dump(mode="json"),
            "metadata": metadata,
            "parameters": entries,
        }
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + bytes(payload)


def save_checkpoint(path: Path, model: TinyCnn, metadata: Dict[str, Any]) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, metadata))


def parse_checkpoint(blob: bytes) -> Tuple[TinyCnn, Dict[str, Any]]:
    if len(blob) < _PREFIX.size:
        raise DataFormatError("Checkpoint is truncated")
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataFormatError("Not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"Unsupported checkpoint version {version}")
    header_end = _PREFIX.size + header_len
    if len(blob) < header_end:
        raise DataFormatError("Checkpoint header is truncated")
    payload = blob[header_end:]
    try:
        header = json.loads(blob[_PREFIX.size : header_end].decode("utf-8"))
        spec = ArchitectureSpec.model_validate(header["architecture"])
        entries = [(e["name"], int(e["offset"]), int(e["count"]), list(e["shape"])) for e in header["parameters"]]
    except (ValueError, KeyError, TypeError) as e:
        raise DataFormatError(f"Checkpoint header is malformed: {e!r}") from e

    state = {}
    for name, start, count, shape in entries:
        if start < 0 or count < 0 or start + 8 * count > len(payload):
            raise DataFormatError(f"Parameter {name} runs past the end of the payload")
        values = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        try:
            state[name] = values.reshape(shape).astype(np.float64)
        except ValueError as e:
            raise DataFormatError(f"Parameter {name} has {count} values, shape {shape} does not fit") from e

    model = TinyCnn.initialize(spec, seed=0)
    try:
        model.load_state_dict(state)
    except ShapeError as e:
        raise DataFormatError(f"Checkpoint parameters do not match its architecture: {e}") from e
    return model, header.get("metadata", {})


def load_checkpoint(path: Path) -> Tuple[TinyCnn, Dict[str, Any]]:
    return parse_checkpoint(Path(path).read_bytes())
