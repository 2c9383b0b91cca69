"""In-context token sequences and the causal encoder that turns them into
a collaborative feature vector.

A query interaction plus its retrieved neighbors becomes one token
sequence: for each retrieved record an interaction token (R), a
reasoning-trace token (C), and a feedback token (L), then the query's own
R token last. A small causal decoder reads the sequence; the hidden state
over the final (query) position is the feature handed to the downstream
model. An auxiliary reconstruction loss pushes the hidden state over each
R token toward that record's trace embedding, so the traces keep shaping
the feature even though they are never seen at the query position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .cotstore import CoTRecord
from .data import Example
from .errors import NumericalError

TOKEN_EXAMPLE = "R"
TOKEN_TRACE = "C"
TOKEN_FEEDBACK = "L"

_NORM_FLOOR = 1e-12


@dataclass
class IctConfig:
    """Sequence-encoder shape; defaults follow the training setup."""

    dim: int = 32
    heads: int = 2
    layers: int = 2
    k_max: int = 8
    text_dim: int = 64
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def max_seq_len(self) -> int:
        return 3 * self.k_max + 1


@dataclass
class QueryPayload:
    """The query interaction's features as the final R token sees them.

    ``mask_target`` hides the candidate-item fields (identity and
    attributes) from the token, for the retrieval task where the model must
    produce a feature before any candidate is fixed; the text embedding
    passed here must then come from a target-free rendering.
    """

    user_index: int
    user_attr_indices: list[int]
    target_item_index: int
    target_attr_indices: list[int]
    text_embedding: np.ndarray
    mask_target: bool = False


def query_payload(example: Example, text_embedding: np.ndarray,
                  mask_target: bool = False) -> QueryPayload:
    return QueryPayload(
        user_index=example.user_index,
        user_attr_indices=list(example.user_attr_indices),
        target_item_index=0 if mask_target else example.target_item_index,
        target_attr_indices=([0] * len(example.target_attr_indices) if mask_target
                             else list(example.target_attr_indices)),
        text_embedding=np.asarray(text_embedding, dtype=np.float64),
        mask_target=mask_target,
    )


def token_layout(k_prime: int, include_cot: bool) -> tuple[list[int], list[int], list[int], int]:
    """Slot positions (r_slots, c_slots, l_slots, seq_len) for one pattern.

    The full pattern interleaves (R, C, L) per retrieved record; without
    traces the pattern is (R, L). The query R token is always last and is
    included in r_slots.
    """
    if include_cot:
        r = [3 * k for k in range(k_prime)] + [3 * k_prime]
        c = [3 * k + 1 for k in range(k_prime)]
        l = [3 * k + 2 for k in range(k_prime)]
        return r, c, l, 3 * k_prime + 1
    r = [2 * k for k in range(k_prime)] + [2 * k_prime]
    return r, [], [2 * k + 1 for k in range(k_prime)], 2 * k_prime + 1


@dataclass
class ICTSequence:
    """One assembled token sequence: retrieved records plus the query."""

    records: list[CoTRecord]
    query: QueryPayload
    include_cot: bool = True
    kinds: list[str] = field(init=False)

    def __post_init__(self) -> None:
        per = (TOKEN_EXAMPLE, TOKEN_TRACE, TOKEN_FEEDBACK) if self.include_cot \
            else (TOKEN_EXAMPLE, TOKEN_FEEDBACK)
        self.kinds = [kind for _ in self.records for kind in per] + [TOKEN_EXAMPLE]

    def __len__(self) -> int:
        return len(self.kinds)

    @property
    def k_prime(self) -> int:
        return len(self.records)

    @property
    def example_positions(self) -> list[int]:
        """Positions of the retrieved records' R tokens (query excluded)."""
        return token_layout(self.k_prime, self.include_cot)[0][:-1]

    @property
    def query_position(self) -> int:
        return len(self.kinds) - 1


def assemble(query: QueryPayload, retrieved: list[CoTRecord],
             include_cot: bool = True) -> ICTSequence:
    """Build the token sequence for one query.

    ``retrieved`` is taken in the order the store returns it (ascending
    similarity), which places the most similar record adjacent to the
    query token.
    """
    return ICTSequence(records=list(retrieved), query=query, include_cot=include_cot)


@dataclass
class SequenceBatch:
    """Collated arrays for a group of same-shape sequences.

    S = k_prime + 1 R-slots per sequence; field_mask zeroes the candidate
    fields of target-masked query tokens so the field mean skips them.
    """

    k_prime: int
    include_cot: bool
    user_idx: np.ndarray      # (B, S) int64
    user_attrs: np.ndarray    # (B, S, nU) int64
    item_idx: np.ndarray      # (B, S) int64
    item_attrs: np.ndarray    # (B, S, nI) int64
    field_mask: np.ndarray    # (B, S, 2 + nU + nI) float64
    text: np.ndarray          # (B, S, text_dim) float64
    cot: np.ndarray           # (B, k_prime, text_dim) float64
    labels: np.ndarray        # (B, k_prime) int64

    @property
    def batch_size(self) -> int:
        return self.user_idx.shape[0]

    @property
    def seq_len(self) -> int:
        return token_layout(self.k_prime, self.include_cot)[3]


def collate(sequences: list[ICTSequence]) -> SequenceBatch:
    """Stack sequences that share (k_prime, include_cot) into one batch."""
    if not sequences:
        raise ValueError("cannot collate an empty sequence list")
    kp = sequences[0].k_prime
    include_cot = sequences[0].include_cot
    n_user = len(sequences[0].query.user_attr_indices)
    n_item = len(sequences[0].query.target_attr_indices)
    text_dim = sequences[0].query.text_embedding.shape[0]
    bsz, slots = len(sequences), kp + 1
    n_fields = 2 + n_user + n_item

    user_idx = np.zeros((bsz, slots), dtype=np.int64)
    user_attrs = np.zeros((bsz, slots, n_user), dtype=np.int64)
    item_idx = np.zeros((bsz, slots), dtype=np.int64)
    item_attrs = np.zeros((bsz, slots, n_item), dtype=np.int64)
    mask = np.ones((bsz, slots, n_fields), dtype=np.float64)
    text = np.zeros((bsz, slots, text_dim), dtype=np.float64)
    cot = np.zeros((bsz, kp, text_dim), dtype=np.float64)
    labels = np.zeros((bsz, kp), dtype=np.int64)

    for b, seq in enumerate(sequences):
        if seq.k_prime != kp or seq.include_cot != include_cot:
            raise ValueError("collate needs uniform (k_prime, include_cot) groups")
        for s, rec in enumerate(seq.records):
            ex = rec.example
            user_idx[b, s] = ex.user_index
            user_attrs[b, s] = ex.user_attr_indices
            item_idx[b, s] = ex.target_item_index
            item_attrs[b, s] = ex.target_attr_indices
            text[b, s] = rec.key_embedding
            cot[b, s] = rec.cot_embedding
            labels[b, s] = 1 if rec.label == 1 else 0
        q = seq.query
        user_idx[b, kp] = q.user_index
        user_attrs[b, kp] = q.user_attr_indices
        item_idx[b, kp] = q.target_item_index
        item_attrs[b, kp] = q.target_attr_indices
        text[b, kp] = q.text_embedding
        if q.mask_target:
            mask[b, kp, 1 + n_user:] = 0.0
    return SequenceBatch(kp, include_cot, user_idx, user_attrs, item_idx,
                         item_attrs, mask, text, cot, labels)


def cf_feature(hidden: np.ndarray) -> np.ndarray:
    """The collaborative feature: hidden state over the final (query) token."""
    return hidden[..., -1, :]


def mean_pool_feature(embedded: np.ndarray) -> np.ndarray:
    """Ablation feature: mean of the token embeddings, decoder skipped."""
    return embedded.mean(axis=-2)


def recon_loss(hidden: np.ndarray, seq: ICTSequence, targets: np.ndarray) -> float:
    """Mean cosine-distance between R-token hidden states and trace targets.

    ``targets`` holds one constant vector per retrieved record (the
    projected trace rows, detached). Ranges over [0, 2]; an empty sequence
    scores 0. Zero-norm vectors on either side are a numerical fault.
    """
    positions = seq.example_positions
    if not positions:
        return 0.0
    total = 0.0
    for k, pos in enumerate(positions):
        h = hidden[pos]
        t = targets[k]
        hn = float(np.linalg.norm(h))
        tn = float(np.linalg.norm(t))
        if hn < _NORM_FLOOR or tn < _NORM_FLOOR:
            raise NumericalError(f"zero-norm vector in reconstruction at position {pos}")
        total += 1.0 - float(h @ t) / (hn * tn)
    return total / len(positions)


class ContextEncoder:
    """Projects token payloads into model space and runs the causal decoder.

    Works on one collated group per forward; backward must run before the
    next forward because intermediate activations are cached in place.
    Field tables are shared with the downstream model (passed in), so the
    sequence sees interactions through the same feature encoder.
    """

    def __init__(self, store: nn.ParamStore, name: str, fields: nn.FieldEmbeddingSet,
                 config: IctConfig, rng: np.random.Generator):
        if fields.dim != config.dim:
            raise ValueError(f"field dim {fields.dim} != encoder dim {config.dim}")
        self.store = store
        self.name = name
        self.fields = fields
        self.config = config
        d, dt = config.dim, config.text_dim
        self.text_lin = nn.Linear(store, name + ".text", dt, d, rng)
        self.feat_proj = nn.Linear(store, name + ".feat", 2 * d, d, rng)
        self.cot_l1 = nn.Linear(store, name + ".cot1", dt, d, rng)
        self.cot_l2 = nn.Linear(store, name + ".cot2", d, d, rng)
        self.label_table = nn.Embedding(store, name + ".label", 2, d, rng)
        self.pos = store.add(name + ".pos",
                             nn.uniform_init(rng, (config.max_seq_len, d), d))
        self.decoder = nn.Decoder(store, name + ".decoder", d, config.heads,
                                  config.layers, rng)

    def _field_indices(self, batch: SequenceBatch) -> dict[str, np.ndarray]:
        names = self.fields.fields
        n_user = batch.user_attrs.shape[2]
        n_item = batch.item_attrs.shape[2]
        if len(names) != 2 + n_user + n_item:
            raise ValueError(f"batch has {2 + n_user + n_item} fields, tables have {len(names)}")
        arrays = ([batch.user_idx]
                  + [batch.user_attrs[:, :, j] for j in range(n_user)]
                  + [batch.item_idx]
                  + [batch.item_attrs[:, :, j] for j in range(n_item)])
        return dict(zip(names, arrays))

    def embed_tokens(self, batch: SequenceBatch) -> np.ndarray:
        """Token embedding matrix E, shape (B, T, dim), positions included.

        Also caches the projected trace rows (pre-position) as detached
        reconstruction targets.
        """
        if batch.k_prime > self.config.k_max:
            raise ValueError(f"k_prime {batch.k_prime} exceeds k_max {self.config.k_max}")
        r_slots, c_slots, l_slots, seq_len = token_layout(batch.k_prime, batch.include_cot)

        stack, self._field_cache = self.fields.gather(self._field_indices(batch))
        mask = batch.field_mask[..., None]
        count = batch.field_mask.sum(axis=-1, keepdims=True)
        field_mean = (stack * mask).sum(axis=-2) / count
        text_part = self.text_lin.forward(batch.text)
        r_rows = self.feat_proj.forward(np.concatenate([field_mean, text_part], axis=-1))

        bsz = batch.batch_size
        embedded = np.zeros((bsz, seq_len, self.config.dim))
        embedded[:, r_slots] = r_rows
        if batch.include_cot:
            u1 = self.cot_l1.forward(batch.cot)
            c_rows = self.cot_l2.forward(nn.silu(u1))
            self._cot_pre = u1
            self.recon_targets = c_rows.copy()  # constants for the recon loss
            embedded[:, c_slots] = c_rows
        else:
            self.recon_targets = np.zeros((bsz, 0, self.config.dim))
        embedded[:, l_slots] = self.label_table.forward(batch.labels)
        embedded += self.pos[:seq_len]
        self._layout = (r_slots, c_slots, l_slots, seq_len)
        self._mask_count = (mask, count)
        return embedded

    def forward(self, batch: SequenceBatch, mean_pool: bool = False,
                dropout_rng: np.random.Generator | None = None
                ) -> tuple[np.ndarray, np.ndarray]:
        """Return (feature w (B, dim), recon losses (B,)) for one group."""
        embedded = self.embed_tokens(batch)
        self._mean_pool = mean_pool
        self._drop_mask = None
        p = self.config.dropout
        if p > 0.0 and dropout_rng is not None:
            self._drop_mask = (dropout_rng.random(embedded.shape) >= p) / (1.0 - p)
            embedded = embedded * self._drop_mask
        if mean_pool:
            self._seq_len = embedded.shape[1]
            return mean_pool_feature(embedded), np.zeros(batch.batch_size)
        hidden = self.decoder.forward(embedded)
        w = cf_feature(hidden).copy()
        recon = self._recon_forward(hidden, batch)
        return w, recon

    def _recon_forward(self, hidden: np.ndarray, batch: SequenceBatch) -> np.ndarray:
        r_slots = self._layout[0][:-1]
        if not batch.include_cot or not r_slots:
            self._recon_cache = None
            return np.zeros(batch.batch_size)
        h = hidden[:, r_slots]                      # (B, K', d)
        t = self.recon_targets                      # (B, K', d)
        hn = np.linalg.norm(h, axis=-1)
        tn = np.linalg.norm(t, axis=-1)
        if (hn < _NORM_FLOOR).any() or (tn < _NORM_FLOOR).any():
            raise NumericalError("zero-norm vector in reconstruction loss")
        cos = (h * t).sum(axis=-1) / (hn * tn)
        self._recon_cache = (h, t, hn, tn, cos, r_slots)
        return (1.0 - cos).mean(axis=-1)

    def backward(self, d_w: np.ndarray, d_recon: np.ndarray) -> None:
        """Accumulate gradients for d(loss)/d(w) and per-example recon weights."""
        if self._mean_pool:
            d_embedded = np.broadcast_to(d_w[:, None, :] / self._seq_len,
                                         (d_w.shape[0], self._seq_len, d_w.shape[1])).copy()
            self._embed_backward(d_embedded)
            return
        r_slots, _, _, seq_len = self._layout
        d_hidden = np.zeros((d_w.shape[0], seq_len, self.config.dim))
        d_hidden[:, -1] += d_w
        if self._recon_cache is not None:
            h, t, hn, tn, cos, ex_slots = self._recon_cache
            k = len(ex_slots)
            hu = h / hn[..., None]
            tu = t / tn[..., None]
            d_cos = -(tu - cos[..., None] * hu) / hn[..., None]
            d_hidden[:, ex_slots] += d_cos * (d_recon[:, None, None] / k)
        d_embedded = self.decoder.backward(d_hidden)
        self._embed_backward(d_embedded)

    def _embed_backward(self, d_embedded: np.ndarray) -> None:
        if self._drop_mask is not None:
            d_embedded = d_embedded * self._drop_mask
        r_slots, c_slots, l_slots, seq_len = self._layout
        self.store.grad(self.name + ".pos")[:seq_len] += d_embedded.sum(axis=0)
        self.label_table.backward(d_embedded[:, l_slots])
        if c_slots:
            d_c = self.cot_l2.backward(d_embedded[:, c_slots])
            self.cot_l1.backward(d_c * nn.silu_grad(self._cot_pre))
        d_r = self.feat_proj.backward(d_embedded[:, r_slots])
        d_mean, d_text = np.split(d_r, 2, axis=-1)
        self.text_lin.backward(d_text)
        mask, count = self._mask_count
        d_stack = d_mean[..., None, :] * (mask / count[..., None])
        self.fields.scatter(self._field_cache, d_stack)
