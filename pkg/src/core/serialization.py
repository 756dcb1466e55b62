"""Versioned binary container for trained models (links, MTE, ensembles).

Layout: magic ``HGM1``, u16 major, u16 minor, u32 header length, UTF-8 JSON header,
then every parameter array as little-endian float64 in header order.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from core.config import config
from core.error_handler import FormatError
from utils.version import parse_version, require_compatible_format

MODEL_MAGIC = b"HGM1"
_PREFIX = struct.Struct("<4sHHI")


@dataclass
class ModelRecord:
    """Everything needed to rebuild a trained model.

    Attributes:
        kind: Learner or ensemble tag (e.g. ``linear-patch``, ``ensemble``)
        hyperparameters: JSON-ready learner settings
        channels: Input channel order
        parameters: Named parameter arrays, in a fixed order
    """

    kind: str
    hyperparameters: dict[str, Any]
    channels: tuple[str, ...]
    parameters: dict[str, np.ndarray] = field(default_factory=dict)


def encode_model(record: ModelRecord) -> bytes:
    version = parse_version(config.model_format_version)
    header = {
        "format_version": config.model_format_version,
        "kind": record.kind,
        "hyperparameters": record.hyperparameters,
        "channels": list(record.channels),
        "parameters": [
            {"name": name, "shape": list(array.shape)} for name, array in record.parameters.items()
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(
        np.ascontiguousarray(array, dtype="<f8").tobytes() for array in record.parameters.values()
    )
    prefix = _PREFIX.pack(MODEL_MAGIC, version.major, version.minor, len(header_bytes))
    return prefix + header_bytes + body


def decode_model(data: bytes, path: Path | None = None) -> ModelRecord:
    """
    Parse a model container.

    Raises:
        FormatError: On bad magic, unsupported version or truncation
    """
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise FormatError("bad model magic", offset=0, path=path)
    if len(data) < _PREFIX.size:
        raise FormatError("truncated model header", offset=len(data), path=path)
    _, major, minor, header_length = _PREFIX.unpack_from(data)
    require_compatible_format(f"{major}.{minor}", config.model_format_version, "model")

    start = _PREFIX.size
    end = start + header_length
    if len(data) < end:
        raise FormatError("truncated model header", offset=len(data), path=path)
    try:
        header = json.loads(data[start:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable model header: {e}", offset=start, path=path) from e

    parameters: dict[str, np.ndarray] = {}
    offset = end
    for entry in header["parameters"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        stop = offset + 8 * count
        if len(data) < stop:
            raise FormatError(
                f"truncated parameter {entry['name']!r}", offset=len(data), path=path
            )
        array = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        parameters[entry["name"]] = array.astype(np.float64).reshape(shape)
        offset = stop
    if offset != len(data):
        raise FormatError("trailing bytes after model parameters", offset=offset, path=path)

    return ModelRecord(
        kind=header["kind"],
        hyperparameters=header["hyperparameters"],
        channels=tuple(header["channels"]),
        parameters=parameters,
    )


def write_model(path: Path, record: ModelRecord) -> None:
    """Write a model container atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_model(record))
    os.replace(tmp, path)


def read_model(path: Path) -> ModelRecord:
    path = Path(path)
    return decode_model(path.read_bytes(), path=path)
