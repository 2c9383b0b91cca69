"""Reasoning-trace store: build, persist, and retrieve in-context examples.

A store row pairs one training interaction with two embeddings: the key
(an embedding of the interaction's rendered text, used for similarity
search) and the reasoning-trace embedding consumed by the sequence
encoder. Retrieval applies two guards: a strict-past timestamp filter so
no retrieved record postdates the query, and label balancing so each
class contributes half of the K slots.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Protocol

import numpy as np

from . import _accel, textenc, util
from .data import Example, example_from_record, example_record
from .errors import DataError

STORE_FILE = "store.jsonl"
PACK_FILE = "embeddings.lcfe"
PROMPT_ASSET = "cot_prompt_v1.txt"


def load_prompt_template() -> str:
    """Return the versioned reasoning-prompt template shipped with the package.

    The template is what an external text-generation step should apply to a
    rendered interaction before its output is handed to FileCoTProvider.
    """
    return resources.files("cotrec.assets").joinpath(PROMPT_ASSET).read_text("utf-8")


@dataclass
class CoTRecord:
    """One store row: an interaction plus its key and trace embeddings."""

    id: int
    example: Example
    key_embedding: np.ndarray
    cot_embedding: np.ndarray
    cot_text: str | None = None

    @property
    def label(self) -> int:
        return self.example.label

    @property
    def timestamp(self) -> int:
        return self.example.timestamp

    def identity(self) -> tuple[str, str, int, int]:
        ex = self.example
        return (ex.user_id, ex.item_id, ex.timestamp, ex.label)


@dataclass
class RetrievalConfig:
    """Knobs for one retrieval call; defaults follow the training setup."""

    k: int = 4
    balance: bool = True
    anti_leakage: bool = True

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.balance and self.k % 2 != 0:
            raise ValueError(f"balanced retrieval needs an even k, got {self.k}")


def sample_subset(examples: list[Example], ratio: float, seed: int) -> list[Example]:
    """Draw round(ratio * N) examples without replacement, original order kept.

    The subset is seed-deterministic; sorting the drawn indices canonicalizes
    the output order so downstream record ids do not depend on draw order.
    """
    if not examples:
        raise DataError("cannot sample a reasoning-trace subset from zero examples")
    if not 0.0 < ratio <= 1.0:
        raise DataError(f"sample ratio must be in (0, 1], got {ratio}")
    n = int(round(ratio * len(examples)))
    n = max(1, min(n, len(examples)))
    if n == len(examples):
        return list(examples)
    rng = util.rng_for(seed, "cot-sample")
    idx = np.sort(rng.choice(len(examples), size=n, replace=False))
    return [examples[i] for i in idx]


class CoTProvider(Protocol):
    """Source of reasoning traces for sampled training examples."""

    def generate(self, record_id: int, example: Example) -> tuple[str | None, np.ndarray]:
        """Return (trace text or None, trace embedding) for one example."""
        ...


class SyntheticCoTProvider:
    """Deterministic stand-in for an external text-generation step.

    Each trace embedding mixes a feature component (a hashed encoding of the
    example text, label-free) with a label-direction component:

        e = normalize((1 - signal) * feat + signal * dir(label) + noise_scale * g)

    ``signal`` in [0, 1] controls how much the trace reveals the label:
    0 makes traces label-independent, 1 with zero noise collapses each class
    onto a single direction (within-class cosine exactly 1). ``g`` is a
    per-example unit Gaussian vector, fixed by the seed and the example
    identity.
    """

    def __init__(self, seed: int, signal: float = 0.7, dim: int = 64,
                 noise_scale: float = 0.05) -> None:
        if not 0.0 <= signal <= 1.0:
            raise ValueError(f"signal must be in [0, 1], got {signal}")
        if noise_scale < 0.0:
            raise ValueError(f"noise_scale must be >= 0, got {noise_scale}")
        self.seed = seed
        self.signal = signal
        self.dim = dim
        self.noise_scale = noise_scale
        self._feat_enc = textenc.SyntheticEncoder(util.subseed(seed, "cot-feat"), dim=dim)
        direction = util.rng_for(seed, "cot-dir").standard_normal(dim)
        self._direction = textenc.normalize(direction)

    def generate(self, record_id: int, example: Example) -> tuple[None, np.ndarray]:
        feat = self._feat_enc.encode(example.text)
        sign = 1.0 if example.label == 1 else -1.0
        vec = (1.0 - self.signal) * feat + self.signal * sign * self._direction
        if self.noise_scale > 0.0:
            ident = f"{example.user_id}|{example.item_id}|{example.timestamp}|{example.label}"
            g = util.rng_for(util.subseed(self.seed, "cot-noise"), ident).standard_normal(self.dim)
            vec = vec + self.noise_scale * textenc.normalize(g)
        if not np.any(vec):
            # signal=0.5 can in principle cancel feat against the direction;
            # fall back to the label-free feature component.
            vec = feat
        return None, textenc.normalize(vec)


class FileCoTProvider:
    """Reasoning traces read from files produced by an external generator.

    ``texts`` maps record id (as produced by the deterministic sampling
    order) to trace text. Embeddings come from ``embeddings`` when given,
    otherwise each text is encoded with ``encoder``.
    """

    def __init__(self, texts: dict[int, str],
                 embeddings: dict[int, np.ndarray] | None = None,
                 encoder: textenc.TextEncoder | None = None) -> None:
        if embeddings is None and encoder is None:
            raise ValueError("FileCoTProvider needs embeddings or an encoder")
        self.texts = texts
        self.embeddings = embeddings
        self.encoder = encoder

    @classmethod
    def from_file(cls, path: str, encoder: textenc.TextEncoder | None = None,
                  pack_path: str | None = None) -> "FileCoTProvider":
        """Load traces from an NDJSON file of {"id": int, "text": str} rows."""
        texts: dict[int, str] = {}
        for row in util.read_ndjson(path):
            if "id" not in row or "text" not in row:
                raise DataError(f"{path}: trace rows need 'id' and 'text' fields")
            texts[int(row["id"])] = str(row["text"])
        embeddings = None
        if pack_path is not None:
            _, vecs = textenc.read_pack(pack_path)
            embeddings = {int(k): v for k, v in vecs.items()}
        return cls(texts, embeddings=embeddings, encoder=encoder)

    def generate(self, record_id: int, example: Example) -> tuple[str, np.ndarray]:
        if record_id not in self.texts:
            raise DataError(f"no reasoning trace for record id {record_id}")
        text = self.texts[record_id]
        if self.embeddings is not None:
            if record_id not in self.embeddings:
                raise DataError(f"no trace embedding for record id {record_id}")
            emb = self.embeddings[record_id]
        else:
            emb = self.encoder.encode(text)
        return text, np.asarray(emb, dtype=np.float64)


def build_cot_records(examples: list[Example], provider: CoTProvider,
                      encoder: textenc.TextEncoder) -> list[CoTRecord]:
    """Encode keys and generate traces for an already-sampled example list."""
    records: list[CoTRecord] = []
    for i, ex in enumerate(examples):
        key = encoder.encode(ex.text)
        text, cot = provider.generate(i, ex)
        cot = np.asarray(cot, dtype=np.float64)
        if cot.shape != key.shape:
            raise DataError(
                f"record {i}: trace embedding dim {cot.shape} != key dim {key.shape}")
        records.append(CoTRecord(id=i, example=ex, key_embedding=key,
                                 cot_embedding=cot, cot_text=text))
    return records


@dataclass
class CoTStore:
    """In-memory store with exact and shortlist-reranked similarity search."""

    records: list[CoTRecord]
    approx_seed: int = 0
    approx_dim: int = 16
    imbalance_events: int = field(default=0, init=False)

    def __post_init__(self) -> None:
        n = len(self.records)
        for want, got in zip(range(n), (r.id for r in self.records)):
            if want != got:
                raise DataError(f"store ids must be 0..n-1 in order, found {got} at {want}")
        dim = self.records[0].key_embedding.shape[0] if n else 0
        self._keys = np.zeros((n, dim), dtype=np.float64)
        self._timestamps = np.zeros(n, dtype=np.int64)
        self._labels = np.zeros(n, dtype=np.int8)
        self._by_identity: dict[tuple[str, str, int, int], int] = {}
        for r in self.records:
            if r.key_embedding.shape != (dim,):
                raise DataError(f"record {r.id}: key dim {r.key_embedding.shape[0]} != {dim}")
            self._keys[r.id] = textenc.normalize(np.asarray(r.key_embedding, dtype=np.float64))
            self._timestamps[r.id] = r.timestamp
            self._labels[r.id] = 1 if r.label == 1 else 0
            self._by_identity.setdefault(r.identity(), r.id)
        self._proj: np.ndarray | None = None
        self._proj_keys: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def dim(self) -> int:
        return self._keys.shape[1]

    def record_id_for(self, example: Example) -> int:
        """Store id holding this exact interaction, or -1 when absent.

        Used for self-exclusion: a query must never retrieve its own row.
        """
        key = (example.user_id, example.item_id, example.timestamp, example.label)
        return self._by_identity.get(key, -1)

    def _similarities(self, query_embedding: np.ndarray) -> np.ndarray:
        q = np.asarray(query_embedding, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DataError(f"query dim {q.shape} != store dim ({self.dim},)")
        q = textenc.normalize(q)
        return np.clip(self._keys @ q, -1.0, 1.0)

    def retrieve(self, query_embedding: np.ndarray, query_timestamp: int,
                 config: RetrievalConfig, exclude_id: int = -1) -> list[CoTRecord]:
        """Select up to ``config.k`` records for one query.

        Returns records ordered by ascending similarity (most similar last,
        adjacent to the query position in the assembled sequence). Fewer
        than k eligible records is not an error; class shortfalls under
        balancing are filled from the other class and counted in
        ``imbalance_events``.
        """
        if not self.records or config.k == 0:
            return []
        sims = self._similarities(query_embedding)
        idx, fill = _accel.balanced_select(
            sims, self._timestamps, self._labels, int(query_timestamp),
            int(exclude_id), config.k, config.balance, config.anti_leakage)
        self.imbalance_events += fill
        return [self.records[i] for i in idx]

    def topk(self, query_embedding: np.ndarray, k: int,
             mode: str = "exact") -> list[tuple[int, float]]:
        """Unfiltered k nearest keys as (id, similarity), most similar first.

        ``mode="approx"`` routes through a seeded random projection to a
        short candidate list, then reranks those candidates exactly; with a
        shortlist larger than k this usually reproduces the exact answer but
        carries no guarantee.
        """
        if mode not in ("exact", "approx"):
            raise ValueError(f"unknown topk mode: {mode!r}")
        if not self.records or k <= 0:
            return []
        sims = self._similarities(query_embedding)
        if mode == "approx" and len(self.records) > k:
            cand = self._approx_candidates(query_embedding, k)
            sub_idx, _ = _accel.balanced_select(
                sims[cand], self._timestamps[cand], self._labels[cand],
                0, -1, min(k, cand.size), False, False)
            chosen = cand[sub_idx]
        else:
            chosen, _ = _accel.balanced_select(
                sims, self._timestamps, self._labels, 0, -1, k, False, False)
        order = np.lexsort((chosen, -sims[chosen]))  # sim desc, ties by id asc
        return [(int(i), float(sims[i])) for i in chosen[order]]

    def _approx_candidates(self, query_embedding: np.ndarray, k: int) -> np.ndarray:
        if self._proj is None:
            rng = util.rng_for(self.approx_seed, "ann-proj")
            self._proj = rng.standard_normal((self.dim, self.approx_dim)) / np.sqrt(self.approx_dim)
            self._proj_keys = self._keys @ self._proj
        q = textenc.normalize(np.asarray(query_embedding, dtype=np.float64)) @ self._proj
        shortlist = min(len(self.records), max(4 * k, 64))
        scores = self._proj_keys @ q
        part = np.argpartition(-scores, shortlist - 1)[:shortlist]
        return np.sort(part)


def write_store(directory: str, records: list[CoTRecord], vocab) -> None:
    """Persist records as NDJSON rows plus one embedding pack.

    Embeddings live in the pack under the refs named by each row
    (``key:<id>`` and ``cot:<id>``); key and trace embeddings must share
    one dimension because a pack is single-width.
    """
    if not records:
        raise DataError("refusing to write an empty reasoning-trace store")
    os.makedirs(directory, exist_ok=True)
    rows = []
    vectors: dict[str, np.ndarray] = {}
    for r in records:
        if r.cot_embedding.shape != r.key_embedding.shape:
            raise DataError(f"record {r.id}: key/trace dims differ, cannot pack together")
        row = {
            "id": r.id,
            "key_ref": f"key:{r.id}",
            "cot_ref": f"cot:{r.id}",
        }
        row.update(example_record(r.example, vocab))
        if r.cot_text is not None:
            row["cot_text"] = r.cot_text
        rows.append(row)
        vectors[f"key:{r.id}"] = r.key_embedding
        vectors[f"cot:{r.id}"] = r.cot_embedding
    util.write_ndjson(os.path.join(directory, STORE_FILE), rows)
    textenc.write_pack(os.path.join(directory, PACK_FILE),
                       vectors, dim=records[0].key_embedding.shape[0])


def read_store(directory: str, vocab) -> list[CoTRecord]:
    """Load records written by write_store, resolving features via ``vocab``."""
    store_path = os.path.join(directory, STORE_FILE)
    pack_path = os.path.join(directory, PACK_FILE)
    if not os.path.exists(store_path) or not os.path.exists(pack_path):
        raise DataError(f"{directory}: missing {STORE_FILE} or {PACK_FILE}")
    try:
        _, vectors = textenc.read_pack(pack_path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    records: list[CoTRecord] = []
    for row in util.read_ndjson(store_path):
        try:
            rid = int(row["id"])
            key_ref, cot_ref = row["key_ref"], row["cot_ref"]
            example = example_from_record(row, vocab)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{store_path}: bad store row: {exc}") from exc
        if key_ref not in vectors or cot_ref not in vectors:
            raise DataError(f"{store_path}: row {rid} references missing pack entries")
        records.append(CoTRecord(
            id=rid, example=example,
            key_embedding=vectors[key_ref], cot_embedding=vectors[cot_ref],
            cot_text=row.get("cot_text")))
    if not records:
        raise DataError(f"{store_path}: store file holds no rows")
    return records
