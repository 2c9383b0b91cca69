"""Interaction ingestion, vocabularies, leave-one-out splits, and text rendering.

The interaction log is newline-delimited JSON with keys user_id, item_id,
timestamp, user_attrs, item_attrs. Every logged event is an implicit
positive; negatives are sampled 1:1 afterwards. Splits are per user:
last event -> test, second-to-last -> valid, remainder -> train.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import DataError
from .util import read_ndjson, rng_for, write_ndjson

MAX_HISTORY = 10
MIN_INTERACTIONS = 3

SPLIT_NAMES = ("train", "valid", "test")


@dataclass
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    label: int = 1
    user_attrs: dict = field(default_factory=dict)
    item_attrs: dict = field(default_factory=dict)


@dataclass
class LoadResult:
    interactions: list
    malformed: int


@dataclass
class Example:
    """One (user, item) decision point with its bounded history.

    Indices refer to the Vocab; ``history`` holds item indices in
    chronological order (oldest first). ``text`` is the rendered query.
    """

    user_id: str
    item_id: str
    user_index: int
    user_attr_indices: list
    history: list
    target_item_index: int
    target_attr_indices: list
    timestamp: int
    label: int
    text: str = ""


@dataclass
class DatasetSplit:
    train: list
    valid: list
    test: list

    def __getitem__(self, name):
        return getattr(self, name)


class Vocab:
    """Per-field token -> index maps with index 0 reserved for out-of-vocab.

    Also carries the item metadata catalog (index-aligned attribute dicts)
    needed to render history items as text.
    """

    def __init__(self):
        self.fields: dict[str, dict[str, int]] = {}
        self._tokens: dict[str, list[str]] = {}
        self.user_attr_fields: list[str] = []
        self.item_attr_fields: list[str] = []
        self.item_meta: list[dict] = [{}]

    @classmethod
    def build(cls, interactions) -> "Vocab":
        vocab = cls()
        user_fields = sorted({k for it in interactions for k in it.user_attrs})
        item_fields = sorted({k for it in interactions for k in it.item_attrs})
        vocab.user_attr_fields = user_fields
        vocab.item_attr_fields = item_fields

        def add_field(name, tokens):
            ordered = sorted(tokens)
            vocab.fields[name] = {tok: i + 1 for i, tok in enumerate(ordered)}
            vocab._tokens[name] = ["<oov>"] + ordered

        add_field("user_id", {it.user_id for it in interactions})
        add_field("item_id", {it.item_id for it in interactions})
        for f in user_fields:
            add_field("user:" + f, {it.user_attrs.get(f, "") for it in interactions})
        for f in item_fields:
            add_field("item:" + f, {it.item_attrs.get(f, "") for it in interactions})

        vocab.item_meta = [{} for _ in range(vocab.size("item_id"))]
        for it in interactions:  # first occurrence wins; attrs assumed stable per item
            idx = vocab.lookup("item_id", it.item_id)
            if not vocab.item_meta[idx]:
                vocab.item_meta[idx] = dict(it.item_attrs)
        return vocab

    def lookup(self, fld: str, token: str) -> int:
        return self.fields.get(fld, {}).get(token, 0)

    def token(self, fld: str, index: int) -> str:
        toks = self._tokens.get(fld, ["<oov>"])
        return toks[index] if 0 <= index < len(toks) else "<oov>"

    def size(self, fld: str) -> int:
        return len(self._tokens.get(fld, ["<oov>"]))

    @property
    def n_items(self) -> int:
        return self.size("item_id")

    def field_sizes(self) -> dict[str, int]:
        return {f: len(toks) for f, toks in self._tokens.items()}

    def to_dict(self) -> dict:
        return {
            "user_attr_fields": self.user_attr_fields,
            "item_attr_fields": self.item_attr_fields,
            "tokens": {f: toks[1:] for f, toks in self._tokens.items()},
            "item_meta": self.item_meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        vocab = cls()
        vocab.user_attr_fields = list(d["user_attr_fields"])
        vocab.item_attr_fields = list(d["item_attr_fields"])
        for f, toks in d["tokens"].items():
            vocab.fields[f] = {tok: i + 1 for i, tok in enumerate(toks)}
            vocab._tokens[f] = ["<oov>"] + list(toks)
        vocab.item_meta = [dict(m) for m in d["item_meta"]]
        return vocab


def load_interactions(path, time_range=None) -> LoadResult:
    """Read the interaction log; returns positives sorted by (user_id, timestamp).

    Malformed lines are skipped and counted. ``time_range`` is an inclusive
    (start, end) pair of epoch seconds.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"interaction log not found: {path}")
    interactions = []
    malformed = 0
    with open(path, "r", encoding="utf-8") as fh:
        for order, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                it = Interaction(
                    user_id=str(rec["user_id"]),
                    item_id=str(rec["item_id"]),
                    timestamp=int(rec["timestamp"]),
                    user_attrs={str(k): str(v) for k, v in rec.get("user_attrs", {}).items()},
                    item_attrs={str(k): str(v) for k, v in rec.get("item_attrs", {}).items()},
                )
                if not it.user_id or not it.item_id or it.timestamp < 0:
                    raise ValueError("empty id or negative timestamp")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                malformed += 1
                continue
            if time_range is not None:
                start, end = time_range
                if not (start <= it.timestamp <= end):
                    continue
            interactions.append((it.user_id, it.timestamp, order, it))
    interactions.sort(key=lambda t: t[:3])
    result = LoadResult([t[3] for t in interactions], malformed)
    if not result.interactions:
        raise DataError(f"no usable interactions in {path}")
    return result


def log_stats(interactions) -> dict:
    users = {it.user_id for it in interactions}
    items = {it.item_id for it in interactions}
    n = len(interactions)
    return {
        "n_users": len(users),
        "n_items": len(items),
        "n_reviews": n,
        "sparsity_pct": 100.0 * n / (len(users) * len(items)) if users and items else 0.0,
    }


def build_splits(interactions, max_history: int = MAX_HISTORY,
                 min_interactions: int = MIN_INTERACTIONS):
    """Leave-one-out split with bounded chronological histories.

    Users with fewer than ``min_interactions`` positives are dropped (counted).
    A history contains only items whose timestamp strictly precedes the
    example's timestamp, truncated to the most recent ``max_history``.
    Returns (DatasetSplit, Vocab, n_dropped_users).
    """
    vocab = Vocab.build(interactions)
    by_user: dict[str, list] = {}
    seen_triples = set()
    for it in interactions:  # already in canonical (user, timestamp, order) order
        triple = (it.user_id, it.item_id, it.timestamp)
        if triple in seen_triples:  # replayed log lines would break split disjointness
            continue
        seen_triples.add(triple)
        by_user.setdefault(it.user_id, []).append(it)

    split = DatasetSplit([], [], [])
    dropped = 0
    for user_id in sorted(by_user):
        events = by_user[user_id]
        if len(events) < min_interactions:
            dropped += 1
            continue
        user_index = vocab.lookup("user_id", user_id)
        user_attr_idx = [vocab.lookup("user:" + f, events[0].user_attrs.get(f, ""))
                         for f in vocab.user_attr_fields]
        item_idx = [vocab.lookup("item_id", it.item_id) for it in events]
        for j, it in enumerate(events):
            hist = [item_idx[p] for p in range(j) if events[p].timestamp < it.timestamp]
            ex = Example(
                user_id=user_id,
                item_id=it.item_id,
                user_index=user_index,
                user_attr_indices=user_attr_idx,
                history=hist[-max_history:],
                target_item_index=item_idx[j],
                target_attr_indices=[vocab.lookup("item:" + f, it.item_attrs.get(f, ""))
                                     for f in vocab.item_attr_fields],
                timestamp=it.timestamp,
                label=1,
            )
            if j == len(events) - 1:
                split.test.append(ex)
            elif j == len(events) - 2:
                split.valid.append(ex)
            else:
                split.train.append(ex)
    if not split.train:
        raise DataError("empty train split (all users below the interaction minimum?)")
    for part in SPLIT_NAMES:
        for ex in split[part]:
            ex.text = render_text(ex, vocab)
    return split, vocab, dropped


def render_text(example, vocab, include_target: bool = True) -> str:
    """Deterministic single-line query text; never mentions the label.

    Retrieval-task queries are rendered with ``include_target=False`` so the
    target item leaks neither into retrieval nor into the context feature.
    """
    parts = ["Will this user be interested in the next item?"]
    user_bits = []
    for f, idx in zip(vocab.user_attr_fields, example.user_attr_indices):
        tok = vocab.token("user:" + f, idx)
        user_bits.append(f"{f}={tok if idx != 0 and tok else 'unknown'}")
    if user_bits:
        parts.append("User: " + ", ".join(user_bits) + ".")
    if example.history:
        listed = "; ".join(f"{n}) {_item_phrase(vocab, idx)}"
                           for n, idx in enumerate(example.history, 1))
        parts.append("History: " + listed + ".")
    else:
        parts.append("History: none, no prior interactions.")
    if include_target:
        target_bits = []
        for f, idx in zip(vocab.item_attr_fields, example.target_attr_indices):
            tok = vocab.token("item:" + f, idx)
            target_bits.append(f"{f}={tok if idx != 0 and tok else 'unknown'}")
        inner = " [" + ", ".join(target_bits) + "]" if target_bits else ""
        parts.append("Target: " + _title_of(vocab, example.target_item_index) + inner + ".")
    return " ".join(parts)


def _title_of(vocab, item_index: int) -> str:
    meta = vocab.item_meta[item_index] if item_index < len(vocab.item_meta) else {}
    return meta.get("title") or "unknown"


def _item_phrase(vocab, item_index: int) -> str:
    meta = vocab.item_meta[item_index] if item_index < len(vocab.item_meta) else {}
    extras = ", ".join(f"{k}={meta[k] or 'unknown'}" for k in sorted(meta) if k != "title")
    title = _title_of(vocab, item_index)
    return f"{title} [{extras}]" if extras else title


def sample_negatives(split, vocab, seed: int):
    """Pair every positive with one uniformly sampled unseen item (label 0).

    The negative shares the positive's user, timestamp, and history; its
    target item is drawn uniformly from the items the user never interacted
    with, deterministically for a given seed.
    """
    seen: dict[str, set] = {}
    for part in SPLIT_NAMES:
        for ex in split[part]:
            if ex.label == 1:
                seen.setdefault(ex.user_id, set()).add(ex.target_item_index)
    n_items = vocab.n_items
    rng = rng_for(seed, "negatives")
    out = DatasetSplit([], [], [])
    for part in SPLIT_NAMES:
        for ex in split[part]:
            out[part].append(ex)
            if ex.label != 1:
                continue
            user_seen = seen[ex.user_id]
            if len(user_seen) >= n_items - 1:
                raise DataError(f"user {ex.user_id} interacted with every item; "
                                "cannot sample a negative")
            while True:
                cand = int(rng.integers(1, n_items))
                if cand not in user_seen:
                    break
            neg = replace(
                ex,
                item_id=vocab.token("item_id", cand),
                target_item_index=cand,
                target_attr_indices=[vocab.lookup("item:" + f, vocab.item_meta[cand].get(f, ""))
                                     for f in vocab.item_attr_fields],
                label=0,
                history=list(ex.history),
                user_attr_indices=list(ex.user_attr_indices),
            )
            neg.text = render_text(neg, vocab)
            out[part].append(neg)
    return out


def example_record(ex, vocab) -> dict:
    return {
        "user_id": ex.user_id,
        "item_id": ex.item_id,
        "timestamp": ex.timestamp,
        "label": ex.label,
        "user_attrs": {f: vocab.token("user:" + f, i)
                       for f, i in zip(vocab.user_attr_fields, ex.user_attr_indices)},
        "item_attrs": {f: vocab.token("item:" + f, i)
                       for f, i in zip(vocab.item_attr_fields, ex.target_attr_indices)},
        "history": [vocab.token("item_id", i) for i in ex.history],
    }


def example_from_record(rec, vocab) -> Example:
    ex = Example(
        user_id=rec["user_id"],
        item_id=rec["item_id"],
        user_index=vocab.lookup("user_id", rec["user_id"]),
        user_attr_indices=[vocab.lookup("user:" + f, rec["user_attrs"].get(f, ""))
                           for f in vocab.user_attr_fields],
        history=[vocab.lookup("item_id", t) for t in rec["history"]],
        target_item_index=vocab.lookup("item_id", rec["item_id"]),
        target_attr_indices=[vocab.lookup("item:" + f, rec["item_attrs"].get(f, ""))
                             for f in vocab.item_attr_fields],
        timestamp=int(rec["timestamp"]),
        label=int(rec["label"]),
    )
    ex.text = render_text(ex, vocab)
    return ex


def write_split_dir(split, vocab, outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for part in SPLIT_NAMES:
        write_ndjson(outdir / f"{part}.jsonl", (example_record(ex, vocab) for ex in split[part]))
    with open(outdir / "vocab.json", "w", encoding="utf-8") as fh:
        json.dump(vocab.to_dict(), fh, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def read_split_dir(indir):
    indir = Path(indir)
    vocab_path = indir / "vocab.json"
    if not vocab_path.exists():
        raise DataError(f"missing vocab file: {vocab_path}")
    with open(vocab_path, "r", encoding="utf-8") as fh:
        vocab = Vocab.from_dict(json.load(fh))
    split = DatasetSplit([], [], [])
    for part in SPLIT_NAMES:
        part_path = indir / f"{part}.jsonl"
        if not part_path.exists():
            raise DataError(f"missing split file: {part_path}")
        for rec in read_ndjson(part_path):
            split[part].append(example_from_record(rec, vocab))
    return split, vocab
