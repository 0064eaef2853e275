"""
Structured-text codec shared by map, world and session files.

Every document is JSON with a schema name and version; numeric arrays are
stored as base64 of their raw little-endian bytes so that descriptors keep
their family dtype (float32 / uint8) and round-trip exactly.
"""

import base64
import hashlib
import json
import logging
import os
from typing import Any, Dict

import numpy as np

from errors import DataError, SchemaVersionError
from geom import Pose

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 2


def encode_array(arr: np.ndarray) -> Dict[str, Any]:
    arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    return {
        "dtype": arr.dtype.str,
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_array(d: Dict[str, Any]) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def encode_pose(p: Pose) -> Dict[str, Any]:
    # the rotation matrix itself, row-major, so decoding is exact
    return {"R": [float(x) for x in p.rotation.ravel()], "t": [float(x) for x in p.translation]}


def decode_pose(d: Dict[str, Any]) -> Pose:
    return Pose(np.reshape(d["R"], (3, 3)), d["t"])


def dump_document(kind: str, payload: Dict[str, Any], path: str) -> str:
    """
    Write a versioned document. Keys are sorted so equal content gives equal bytes.
    """
    doc = {"schema": f"msloc/{kind}", "version": SCHEMA_VERSION}
    doc.update(payload)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
    logger.info(f"Wrote {kind} document to {path}")
    return path


def load_document(kind: str, path: str) -> Dict[str, Any]:
    try:
        with open(path, "r") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise DataError(f"{kind} file not found: {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}")
    if doc.get("schema") != f"msloc/{kind}":
        raise SchemaVersionError(f"{path}: expected schema msloc/{kind}, found {doc.get('schema')!r}")
    if doc.get("version") != SCHEMA_VERSION:
        raise SchemaVersionError(f"{path}: unsupported {kind} schema version {doc.get('version')!r}")
    return doc


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
