"""Recommendation backbones that accept an optional fused feature vector.

Each backbone shares one FieldEmbeddingSet (so the sequence encoder and the
scoring model read features through the same tables) and exposes the same
contract: ``forward(features, w)`` produces logits and ``backward(d_logits)``
accumulates parameter gradients and returns the gradient flowing into w.

Passing ``w=None`` is bit-identical to passing a zero vector: the fusion
slot always exists and zeros contribute nothing, so a plain backbone is the
fused model with the feature switched off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Example

ATT_HIDDEN = 32
TOWER_HIDDEN = 64


@dataclass
class FeatureBatch:
    """Plain collated features for scoring a batch of interactions."""

    user_idx: np.ndarray     # (B,) int64
    user_attrs: np.ndarray   # (B, nU) int64
    item_idx: np.ndarray     # (B,) int64
    item_attrs: np.ndarray   # (B, nI) int64
    history: np.ndarray      # (B, Hm) int64, zero-padded
    hist_mask: np.ndarray    # (B, Hm) float64
    labels: np.ndarray       # (B,) float64

    @property
    def batch_size(self) -> int:
        return self.user_idx.shape[0]


def collate_features(examples: list[Example]) -> FeatureBatch:
    bsz = len(examples)
    if bsz == 0:
        raise ValueError("cannot collate an empty example list")
    n_user = len(examples[0].user_attr_indices)
    n_item = len(examples[0].target_attr_indices)
    max_h = max((len(ex.history) for ex in examples), default=0)
    user_idx = np.zeros(bsz, dtype=np.int64)
    user_attrs = np.zeros((bsz, n_user), dtype=np.int64)
    item_idx = np.zeros(bsz, dtype=np.int64)
    item_attrs = np.zeros((bsz, n_item), dtype=np.int64)
    history = np.zeros((bsz, max_h), dtype=np.int64)
    hist_mask = np.zeros((bsz, max_h), dtype=np.float64)
    labels = np.zeros(bsz, dtype=np.float64)
    for b, ex in enumerate(examples):
        user_idx[b] = ex.user_index
        user_attrs[b] = ex.user_attr_indices
        item_idx[b] = ex.target_item_index
        item_attrs[b] = ex.target_attr_indices
        h = len(ex.history)
        history[b, :h] = ex.history
        hist_mask[b, :h] = 1.0
        labels[b] = float(ex.label)
    return FeatureBatch(user_idx, user_attrs, item_idx, item_attrs,
                        history, hist_mask, labels)


def _field_indices(fields: nn.FieldEmbeddingSet, fb: FeatureBatch) -> dict[str, np.ndarray]:
    names = fields.fields
    n_user = fb.user_attrs.shape[1]
    n_item = fb.item_attrs.shape[1]
    if len(names) != 2 + n_user + n_item:
        raise ValueError(f"batch has {2 + n_user + n_item} fields, tables have {len(names)}")
    arrays = ([fb.user_idx]
              + [fb.user_attrs[:, j] for j in range(n_user)]
              + [fb.item_idx]
              + [fb.item_attrs[:, j] for j in range(n_item)])
    return dict(zip(names, arrays))


def _wslot(w: np.ndarray | None, bsz: int, dim: int) -> np.ndarray:
    if w is None:
        return np.zeros((bsz, dim))
    if w.shape != (bsz, dim):
        raise ValueError(f"w has shape {w.shape}, want ({bsz}, {dim})")
    return w


class FMDeep:
    """Factorization machine plus a deep tower over the flattened fields.

    logit = bias + sum of first-order weights + pairwise interaction term
    + tower([fields, w]). The context feature participates in the pairwise
    term like a field, so feature-by-context products are linearly
    reachable. With every parameter zero the logit is exactly 0, and a zero
    context vector leaves both terms untouched.
    """

    def __init__(self, store: nn.ParamStore, name: str, fields: nn.FieldEmbeddingSet,
                 sizes: dict[str, int], rng: np.random.Generator):
        self.store = store
        self.name = name
        self.fields = fields
        d = fields.dim
        self.first_order = nn.FieldEmbeddingSet(store, name + ".fo", sizes, 1, rng)
        for fld in self.first_order.fields:  # linear terms start at zero
            self.first_order.table(fld)[...] = 0.0
        self.bias = store.add(name + ".bias", np.zeros(1))
        n_in = fields.n_fields * d + d
        self.tower = nn.MLPTower(store, name + ".tower", n_in, TOWER_HIDDEN, 1, rng)

    def forward(self, fb: FeatureBatch, w: np.ndarray | None) -> np.ndarray:
        idx = _field_indices(self.fields, fb)
        stack, self._cache = self.fields.gather(idx)          # (B, F, d)
        fo_stack, self._fo_cache = self.first_order.gather(idx)
        bsz = fb.batch_size
        wvec = _wslot(w, bsz, self.fields.dim)
        svw = stack.sum(axis=1) + wvec                        # (B, d)
        pair = 0.5 * (svw ** 2 - (stack ** 2).sum(axis=1) - wvec ** 2).sum(axis=-1)
        deep_in = np.concatenate([stack.reshape(bsz, -1), wvec], axis=-1)
        deep = self.tower.forward(deep_in)[:, 0]
        self._stack, self._svw, self._wvec = stack, svw, wvec
        return self.bias[0] + fo_stack.sum(axis=(1, 2)) + pair + deep

    def backward(self, d_logits: np.ndarray) -> np.ndarray:
        bsz = d_logits.shape[0]
        d = self.fields.dim
        self.store.grad(self.name + ".bias")[0] += d_logits.sum()
        self.first_order.scatter(
            self._fo_cache,
            np.broadcast_to(d_logits[:, None, None],
                            (bsz, self.first_order.n_fields, 1)))
        d_in = self.tower.backward(d_logits[:, None])
        d_stack = d_in[:, :-d].reshape(bsz, -1, d).copy()
        d_w = d_in[:, -d:].copy()
        d_stack += d_logits[:, None, None] * (self._svw[:, None, :] - self._stack)
        d_w += d_logits[:, None] * (self._svw - self._wvec)
        self.fields.scatter(self._cache, d_stack)
        return d_w


class TargetAttention:
    """History attention pooled against the candidate, then a deep tower.

    Attention weights come from a two-layer scorer over
    [h, t, h - t, h * t]; rows with empty history pool to a zero vector.
    """

    def __init__(self, store: nn.ParamStore, name: str, fields: nn.FieldEmbeddingSet,
                 sizes: dict[str, int], rng: np.random.Generator):
        self.store = store
        self.name = name
        self.fields = fields
        d = fields.dim
        self.att1 = nn.Linear(store, name + ".att1", 4 * d, ATT_HIDDEN, rng)
        self.att2 = nn.Linear(store, name + ".att2", ATT_HIDDEN, 1, rng)
        self.tower = nn.MLPTower(store, name + ".tower", 4 * d, TOWER_HIDDEN, 1, rng)

    def forward(self, fb: FeatureBatch, w: np.ndarray | None) -> np.ndarray:
        stack, self._cache = self.fields.gather(_field_indices(self.fields, fb))
        n_user = fb.user_attrs.shape[1]
        self._n_user = n_user
        uvec = stack[:, :n_user + 1].mean(axis=1)             # (B, d)
        tvec = stack[:, n_user + 1:].mean(axis=1)             # (B, d)
        hvec, self._hist_idx = self.fields.lookup("item_id", fb.history)  # (B, Hm, d)
        bsz, max_h, d = hvec.shape

        mask = fb.hist_mask
        if max_h > 0:
            tb = np.broadcast_to(tvec[:, None, :], hvec.shape)
            att_in = np.concatenate([hvec, tb, hvec - tb, hvec * tb], axis=-1)
            a1 = self.att1.forward(att_in)
            scores = self.att2.forward(nn.silu(a1))[..., 0]   # (B, Hm)
            has_any = (mask.sum(axis=1) > 0).astype(np.float64)
            attn = nn.softmax(scores + nn.NEG_BIG * (1.0 - mask)) * has_any[:, None]
            pooled = (attn[..., None] * hvec).sum(axis=1)
            self._att = (hvec, tvec, att_in, a1, attn, mask)
        else:
            pooled = np.zeros((bsz, d))
            self._att = None

        wvec = _wslot(w, bsz, d)
        tower_in = np.concatenate([pooled, tvec, uvec, wvec], axis=-1)
        self._stack = stack
        return self.tower.forward(tower_in)[:, 0]

    def backward(self, d_logits: np.ndarray) -> np.ndarray:
        d = self.fields.dim
        n_user = self._n_user
        d_in = self.tower.backward(d_logits[:, None])
        d_pooled, d_tvec, d_uvec, d_w = (d_in[:, :d].copy(), d_in[:, d:2 * d].copy(),
                                         d_in[:, 2 * d:3 * d].copy(), d_in[:, 3 * d:].copy())
        if self._att is not None:
            hvec, tvec, att_in, a1, attn, mask = self._att
            d_attn = (d_pooled[:, None, :] * hvec).sum(axis=-1)        # (B, Hm)
            d_hvec = attn[..., None] * d_pooled[:, None, :]
            # softmax backward within each row; masked rows have attn == 0
            d_scores = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
            d_a1 = self.att2.backward(d_scores[..., None]) * nn.silu_grad(a1)
            d_att_in = self.att1.backward(d_a1)
            dh1, dt1, dd, dp = np.split(d_att_in, 4, axis=-1)
            tb = np.broadcast_to(tvec[:, None, :], hvec.shape)
            d_hvec += dh1 + dd + dp * tb
            d_tvec += (dt1 - dd + dp * hvec).sum(axis=1)
            self.fields.scatter_one("item_id", self._hist_idx, d_hvec)
        d_stack = np.zeros_like(self._stack)
        d_stack[:, :n_user + 1] = d_uvec[:, None, :] / (n_user + 1)
        d_stack[:, n_user + 1:] = d_tvec[:, None, :] / (d_stack.shape[1] - n_user - 1)
        self.fields.scatter(self._cache, d_stack)
        return d_w


class TwoTower:
    """User tower against a separate item output table, scored by dot product.

    The fused feature adds to the user tower output. ``forward`` scores the
    batch's own candidate items; ``forward_candidates`` scores an explicit
    (B, C) candidate matrix, which also serves full-catalog ranking.
    """

    def __init__(self, store: nn.ParamStore, name: str, fields: nn.FieldEmbeddingSet,
                 sizes: dict[str, int], rng: np.random.Generator):
        self.store = store
        self.name = name
        self.fields = fields
        d = fields.dim
        self.tower = nn.MLPTower(store, name + ".tower", 2 * d, TOWER_HIDDEN, d, rng)
        self.item_out = store.add(name + ".item_out",
                                  nn.uniform_init(rng, (sizes["item_id"], d), d))

    def _user_vec(self, fb: FeatureBatch, w: np.ndarray | None) -> np.ndarray:
        stack, self._cache = self.fields.gather(_field_indices(self.fields, fb))
        n_user = fb.user_attrs.shape[1]
        self._n_user = n_user
        uvec = stack[:, :n_user + 1].mean(axis=1)
        hvec, self._hist_idx = self.fields.lookup("item_id", fb.history)
        counts = np.maximum(fb.hist_mask.sum(axis=1, keepdims=True), 1.0)
        hmean = (hvec * fb.hist_mask[..., None]).sum(axis=1) / counts
        self._hist = (hvec, fb.hist_mask, counts)
        self._stack = stack
        out = self.tower.forward(np.concatenate([uvec, hmean], axis=-1))
        return out + _wslot(w, fb.batch_size, self.fields.dim)

    def forward(self, fb: FeatureBatch, w: np.ndarray | None) -> np.ndarray:
        fused = self._user_vec(fb, w)
        self._fused = fused
        self._cands = fb.item_idx[:, None]
        return (fused * self.item_out[fb.item_idx]).sum(axis=-1)

    def forward_candidates(self, fb: FeatureBatch, w: np.ndarray | None,
                           candidates: np.ndarray) -> np.ndarray:
        """Scores for an explicit candidate matrix, shape (B, C)."""
        fused = self._user_vec(fb, w)
        self._fused = fused
        self._cands = np.asarray(candidates, dtype=np.int64)
        return np.einsum("bd,bcd->bc", fused, self.item_out[self._cands])

    def score_all(self, fb: FeatureBatch, w: np.ndarray | None) -> np.ndarray:
        """Scores against every item row, shape (B, n_items); inference only."""
        return self._user_vec(fb, w) @ self.item_out.T

    def backward(self, d_scores: np.ndarray) -> np.ndarray:
        if d_scores.ndim == 1:
            d_scores = d_scores[:, None]
        cand_rows = self.item_out[self._cands]                     # (B, C, d)
        d_fused = np.einsum("bc,bcd->bd", d_scores, cand_rows)
        d_out = d_scores[..., None] * self._fused[:, None, :]
        np.add.at(self.store.grad(self.name + ".item_out"), self._cands, d_out)
        d_in = self.tower.backward(d_fused)
        d = self.fields.dim
        d_uvec, d_hmean = d_in[:, :d], d_in[:, d:]
        hvec, mask, counts = self._hist
        d_hvec = d_hmean[:, None, :] * (mask[..., None] / counts[..., None])
        self.fields.scatter_one("item_id", self._hist_idx, d_hvec)
        n_user = self._n_user
        d_stack = np.zeros_like(self._stack)
        d_stack[:, :n_user + 1] = d_uvec[:, None, :] / (n_user + 1)
        self.fields.scatter(self._cache, d_stack)
        return d_fused


BACKBONES = ("fm_deep", "target_attention", "two_tower")


def build_backbone(kind: str, store: nn.ParamStore, fields: nn.FieldEmbeddingSet,
                   sizes: dict[str, int], rng: np.random.Generator):
    if kind == "fm_deep":
        return FMDeep(store, "backbone", fields, sizes, rng)
    if kind == "target_attention":
        return TargetAttention(store, "backbone", fields, sizes, rng)
    if kind == "two_tower":
        return TwoTower(store, "backbone", fields, sizes, rng)
    raise ValueError(f"unknown backbone: {kind!r}")
