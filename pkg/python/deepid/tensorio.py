"""A versioned binary container of named float64 tensors.

Layout (all integers little-endian):

    magic     8 bytes   b"DEEPID\\x00\\x00"
    version   uint32    currently 1
    length    uint64    byte length of the JSON header
    header    JSON      {"version": 1, "meta": {...}, "tensors": [{"name", "shape", "offset"}]}
    payload   <f8 ...   tensors back to back, offsets relative to the payload start

Network parameters, Joint Bayesian models, PCA projections and feature matrices are all
stored this way.
"""

from __future__ import annotations

import json
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np

from deepid.errors import ContainerError
from deepid.tensor import Tensor

MAGIC = b"DEEPID\x00\x00"
VERSION = 1

_PREAMBLE = struct.Struct("<8sIQ")


def save_tensors(
    path: str | Path,
    tensors: Mapping[str, Tensor],
    meta: Mapping[str, Any] | None = None,
) -> None:
    """Write `tensors` (in iteration order) and a JSON-serializable `meta` to `path`."""
    entries = []
    payloads = []
    offset = 0
    for name, tensor in tensors.items():
        data = np.ascontiguousarray(tensor, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        payloads.append(data.tobytes())
        offset += data.nbytes

    header = json.dumps(
        {"version": VERSION, "meta": dict(meta or {}), "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")

    with open(path, "wb") as fp:
        fp.write(_PREAMBLE.pack(MAGIC, VERSION, len(header)))
        fp.write(header)
        for payload in payloads:
            fp.write(payload)


def load_tensors(path: str | Path) -> tuple[dict[str, Tensor], dict[str, Any]]:
    """Read a container written by `save_tensors`, returning `(tensors, meta)`."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise ContainerError(f"truncated container: {path}")
    magic, version, length = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise ContainerError(f"not a tensor container: {path}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}: {path}")

    start = _PREAMBLE.size
    try:
        header = json.loads(raw[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ContainerError(f"malformed container header in {path}: {err}") from None

    payload = memoryview(raw)[start + length :]
    tensors: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        begin = entry["offset"]
        end = begin + 8 * count
        if end > len(payload):
            raise ContainerError(f"truncated payload for `{entry['name']}` in {path}")
        if count == 0:
            tensors[entry["name"]] = np.zeros(shape)
            continue
        data = np.frombuffer(payload[begin:end], dtype="<f8", count=count)
        tensors[entry["name"]] = data.astype(np.float64).reshape(shape)
    return tensors, header["meta"]
