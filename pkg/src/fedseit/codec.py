"""Shape-tagged f64 parameter blobs.

Layout: one JSON header line ``[[name, [dims...]], ...]`` terminated by ``\\n``,
followed by every array's values as little-endian f64, row-major, in header
order. Used for federation message payloads, registry checkpoints and frozen
task bundles.
"""

from __future__ import annotations

import base64
import json

import numpy as np

_DTYPE = np.dtype("<f8")


def encode(named: list[tuple[str, np.ndarray]]) -> bytes:
    header = [[name, list(np.shape(arr))] for name, arr in named]
    body = b"".join(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes() for _, arr in named)
    return json.dumps(header, separators=(",", ":")).encode() + b"\n" + body


def decode(blob: bytes) -> list[tuple[str, np.ndarray]]:
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl].decode())
    buf = memoryview(blob)[nl + 1 :]
    out, offset = [], 0
    for name, shape in header:
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * _DTYPE.itemsize
        if offset + nbytes > len(buf):
            raise ValueError(f"truncated parameter blob at {name!r}")
        arr = np.frombuffer(buf[offset : offset + nbytes], dtype=_DTYPE).reshape(shape).astype(np.float64)
        out.append((name, arr))
        offset += nbytes
    if offset != len(buf):
        raise ValueError(f"{len(buf) - offset} trailing bytes in parameter blob")
    return out


def to_text(blob: bytes) -> str:
    return base64.b64encode(blob).decode("ascii")


def from_text(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"))
