"""Binary checkpoint container used by every pipeline artifact.

Layout: 4-byte magic ``CKPT``, little-endian uint64 header length, UTF-8
JSON header, then the concatenated little-endian float32 payload. The
header is canonical JSON (sorted keys), so write -> read -> write is
byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"CKPT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _canonical_header(entries, metadata):
    header = {
        "format_version": FORMAT_VERSION,
        "entries": entries,
        "metadata": metadata,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, arrays: dict, metadata: dict | None = None):
    """Write named arrays as float32 entries. Atomic: temp file then rename."""
    entries = []
    payload = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append(
            {
                "name": name,
                "dtype": "f32",
                "shape": list(arr.shape),
                "byte_offset": offset,
            }
        )
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header = _canonical_header(entries, metadata or {})
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for chunk in payload:
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path):
    """Read a container; returns (dict name -> float32 array, metadata dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format_version")
        payload = fh.read()
    expected = 0
    arrays = {}
    for entry in header["entries"]:
        if entry["byte_offset"] != expected:
            raise CheckpointError(f"{path}: entry {entry['name']} offset mismatch")
        size = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        raw = payload[entry["byte_offset"] : entry["byte_offset"] + size]
        if len(raw) != size:
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        expected += size
    if expected != len(payload):
        raise CheckpointError(f"{path}: payload length mismatch")
    return arrays, header["metadata"]
