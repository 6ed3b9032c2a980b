"""Binary checkpoint container.

Byte layout (all integers little-endian):

    offset  size  content
    0       4     magic b"DWCK"
    4       4     format version, uint32 (currently 1)
    8       8     header length L, uint64
    16      L     header, UTF-8 JSON with sorted keys
    16+L    ...   array payloads, concatenated in header order

The header object has three keys:

    "topology":  free-form descriptor of the network that wrote the file
                 (kind, config values, and the named layer shapes)
    "metadata":  training provenance (seed, epochs, final metrics)
    "arrays":    list of {"name", "dtype", "shape", "offset", "nbytes"}
                 where offset is relative to the end of the header and
                 dtype is a little-endian numpy dtype string ("<f8", "<f4")

Payload bytes are the row-major array contents.  Save followed by load is
value-exact for float32 and float64 arrays.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import DataError

MAGIC = b"DWCK"
VERSION = 1


@dataclass
class Checkpoint:
    topology: dict
    metadata: dict
    arrays: dict[str, np.ndarray]


def save_checkpoint(path, arrays: dict[str, np.ndarray], topology: dict,
                    metadata: dict) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.float64:
            dt = "<f8"
        elif arr.dtype == np.float32:
            dt = "<f4"
        else:
            raise DataError(f"unsupported checkpoint dtype {arr.dtype} for '{name}'")
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": dt,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": len(raw),
        })
        payload.extend(raw)
    header = json.dumps(
        {"topology": topology, "metadata": metadata, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        raw = blob[start:start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(topology=header["topology"], metadata=header["metadata"],
                      arrays=arrays)
