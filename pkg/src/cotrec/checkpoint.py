"""Byte-stable parameter container.

Layout: the 8-byte magic ``COTREC1\\n``, a little-endian uint64 header
length, a canonical-JSON header, then each tensor's raw C-order bytes in
header order. The header records the run config and, per tensor, its name,
shape, and dtype. Writing the same parameters twice yields identical bytes,
so checkpoints can be compared by hash.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError
from .util import canonical_json

MAGIC = b"COTREC1\n"


def save_checkpoint(path: str, config: dict, arrays: dict[str, np.ndarray]) -> None:
    tensors = [{"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
               for name, arr in arrays.items()]
    header = canonical_json({"config": config, "tensors": tensors}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        fh = open(path, "rb")
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    with fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: corrupt checkpoint header: {exc}") from exc
        arrays: dict[str, np.ndarray] = {}
        for spec in header.get("tensors", []):
            shape = tuple(spec["shape"])
            dtype = np.dtype(spec["dtype"])
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            buf = fh.read(n_bytes)
            if len(buf) != n_bytes:
                raise DataError(f"{path}: truncated tensor {spec['name']!r}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
        return header.get("config", {}), arrays
