"""Named-tensor checkpoint files.

Layout (all integers little-endian)::

    8 bytes   magic  b"SNIACKP1"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header: {"meta": {...},
                                  "tensors": [{"name", "shape", "offset"}, ...]}
    payload   float64 little-endian values, row-major, tensor after tensor

``offset`` counts bytes from the start of the payload.  The header is written
with sorted keys, so identical inputs give byte-identical files.
"""
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SNIACKP1"


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        a = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_tensors(path):
    """Return ``(tensors, meta)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    base = 12 + hlen
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        tensors[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return tensors, header["meta"]
