"""Shared plumbing: seeded sub-RNGs, stable hashing, newline-delimited JSON."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np


def subseed(root_seed: int, name: str) -> int:
    """Derive a named 64-bit sub-seed from a root seed.

    Stable across processes and platforms (unlike ``hash``), so every
    consumer of randomness can own an independent, reproducible stream.
    """
    h = hashlib.blake2b(name.encode("utf-8"), digest_size=8,
                        key=int(root_seed).to_bytes(8, "little", signed=False))
    return int.from_bytes(h.digest(), "little")


def rng_for(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for the named randomness consumer."""
    return np.random.default_rng(subseed(root_seed, name))


def stable_hash64(text: str, seed: int = 0) -> int:
    """Deterministic 64-bit hash of a string, parameterized by a seed."""
    h = hashlib.blake2b(text.encode("utf-8"), digest_size=8,
                        key=int(seed).to_bytes(8, "little", signed=False))
    return int.from_bytes(h.digest(), "little")


def canonical_json(obj: Any) -> str:
    """JSON with sorted keys and fixed separators; byte-stable for hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_ndjson(path: str | Path, records: Iterable[dict]) -> int:
    """Write one canonical-JSON object per line; returns the record count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(canonical_json(rec))
            fh.write("\n")
            n += 1
    return n


def read_ndjson(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
