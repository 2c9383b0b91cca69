"""Text encoders producing unit-norm embeddings, plus the embedding-pack file format.

Two providers: a seeded feature-hashing encoder (no learned weights, fully
deterministic) and a file-backed lookup over precomputed vectors. Both emit
L2-normalized float64 vectors of a fixed dimension.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .util import stable_hash64

PACK_MAGIC = "LCFE1"

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class EncoderKeyError(KeyError):
    """Raised when a file-backed encoder is queried with an unknown key."""


def tokenize(text: str) -> list[str]:
    """Lowercased alphanumeric runs; whitespace and punctuation are separators."""
    return _TOKEN_RE.findall(text.lower())


def normalize(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / n


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; inputs need not be pre-normalized."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero vectors")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


class SyntheticEncoder:
    """Seeded feature hashing of word tokens into signed buckets.

    Texts sharing tokens land in shared buckets, so token overlap translates
    into cosine similarity, which is what retrieval needs. Empty texts map to
    a fixed unit vector (the empty token's bucket).
    """

    def __init__(self, seed: int = 0, dim: int = 64):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.seed = int(seed)
        self.dim = int(dim)

    def encode(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim, dtype=np.float64)
        tokens = tokenize(text) or [""]
        for tok in tokens:
            h = stable_hash64(tok, self.seed)
            idx = h % self.dim
            sign = 1.0 if (h >> 32) & 1 else -1.0
            v[idx] += sign
        if not v.any():
            # signs of repeated tokens can cancel; fall back to count weights
            for tok in tokens:
                v[stable_hash64(tok, self.seed) % self.dim] += 1.0
        return normalize(v)


class FileEncoder:
    """Lookup encoder over a key -> vector map (typically an embedding pack)."""

    def __init__(self, vectors: dict[str, np.ndarray], dim: int | None = None):
        if not vectors and dim is None:
            raise ValueError("empty vector map needs an explicit dim")
        self.dim = int(dim) if dim is not None else len(next(iter(vectors.values())))
        self.vectors = {}
        for key, vec in vectors.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (self.dim,):
                raise ValueError(f"vector for {key!r} has shape {vec.shape}, want ({self.dim},)")
            self.vectors[key] = normalize(vec)

    @classmethod
    def from_pack(cls, path: str | Path) -> "FileEncoder":
        dim, vectors = read_pack(path)
        return cls(vectors, dim=dim)

    def encode(self, key: str) -> np.ndarray:
        try:
            return self.vectors[key]
        except KeyError:
            raise EncoderKeyError(f"no embedding for key: {key!r}") from None


def write_pack(path: str | Path, vectors: dict[str, np.ndarray], dim: int) -> None:
    """Binary embedding pack: header line, then per row a key line + raw floats.

    Layout: ``LCFE1 <dim> <count>\\n`` then for each row the UTF-8 key
    terminated by ``\\n`` followed by ``dim`` little-endian float32 values.
    Keys must not contain newlines.
    """
    with open(path, "wb") as fh:
        fh.write(f"{PACK_MAGIC} {dim} {len(vectors)}\n".encode("utf-8"))
        for key, vec in vectors.items():
            if "\n" in key or "\r" in key:
                raise ValueError(f"pack key may not contain newlines: {key!r}")
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise ValueError(f"vector for {key!r} has shape {vec.shape}, want ({dim},)")
            fh.write(key.encode("utf-8") + b"\n")
            fh.write(vec.astype("<f4").tobytes())


def read_pack(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    """Read an embedding pack, binary or textual.

    The textual twin of the binary layout has the same header line followed by
    ``count`` lines of ``key<TAB>v1 v2 ... vdim``. Format is sniffed from the
    content after the header.
    """
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing pack header")
    parts = raw[:nl].decode("utf-8", errors="replace").split()
    if len(parts) != 3 or parts[0] != PACK_MAGIC:
        raise ValueError(f"{path}: bad pack header (want '{PACK_MAGIC} <dim> <count>')")
    dim, count = int(parts[1]), int(parts[2])
    body = raw[nl + 1:]

    text_rows = _try_text_rows(body, dim, count)
    if text_rows is not None:
        return dim, text_rows

    vectors: dict[str, np.ndarray] = {}
    pos = 0
    row_bytes = 4 * dim
    for _ in range(count):
        key_end = body.find(b"\n", pos)
        if key_end < 0:
            raise ValueError(f"{path}: truncated pack (missing key line)")
        key = body[pos:key_end].decode("utf-8")
        pos = key_end + 1
        blob = body[pos:pos + row_bytes]
        if len(blob) != row_bytes:
            raise ValueError(f"{path}: truncated pack (short vector for {key!r})")
        vectors[key] = np.frombuffer(blob, dtype="<f4").astype(np.float64)
        pos += row_bytes
    return dim, vectors


def _try_text_rows(body: bytes, dim: int, count: int) -> dict[str, np.ndarray] | None:
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError:
        return None
    lines = [ln for ln in text.split("\n") if ln]
    if len(lines) != count:
        return None
    vectors: dict[str, np.ndarray] = {}
    for ln in lines:
        if "\t" not in ln:
            return None
        key, _, rest = ln.partition("\t")
        fields = rest.split()
        if len(fields) != dim:
            return None
        try:
            vectors[key] = np.array([float(x) for x in fields], dtype=np.float64)
        except ValueError:
            return None
    return vectors


def make_encoder(kind: str, *, seed: int = 0, dim: int = 64,
                 pack_path: str | Path | None = None):
    """Factory used by the CLI: kind is 'synthetic' or 'file'."""
    if kind == "synthetic":
        return SyntheticEncoder(seed=seed, dim=dim)
    if kind == "file":
        if pack_path is None:
            raise ValueError("file encoder needs pack_path")
        return FileEncoder.from_pack(pack_path)
    raise ValueError(f"unknown encoder kind: {kind!r}")
