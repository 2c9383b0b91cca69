"""Minimal float64 neural-net layers with explicit forward/backward passes.

All trainable tensors live in a central ParamStore so the optimizer, the
finite-difference checks, and the checkpoint writer see one flat namespace.
Layers cache what their backward pass needs on ``self``; a training step is
one forward followed by one backward (single-threaded per step).

Shapes use (B, T, D) = batch, sequence, model width.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError


class ParamStore:
    """Flat name -> tensor registry with matching gradient accumulators."""

    def __init__(self):
        self.arrays: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.arrays:
            raise ValueError(f"duplicate parameter name: {name}")
        arr = np.asarray(value, dtype=np.float64)
        self.arrays[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def grad(self, name: str) -> np.ndarray:
        return self.grads[name]

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def names(self) -> list[str]:
        return list(self.arrays)

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def clone_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.arrays.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k not in self.arrays:
                raise KeyError(f"unknown parameter: {k}")
            if self.arrays[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {self.arrays[k].shape} vs {v.shape}")
            self.arrays[k][...] = v


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Zero-mean uniform init with range 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Linear:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.store = store
        self.name = name
        self.W = store.add(name + ".W", uniform_init(rng, (n_in, n_out), n_in))
        self.b = store.add(name + ".b", np.zeros(n_out)) if bias else None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        y = x @ self.W
        if self.b is not None:
            y = y + self.b
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        xf = x.reshape(-1, x.shape[-1])
        dyf = dy.reshape(-1, dy.shape[-1])
        self.store.grad(self.name + ".W")[...] += xf.T @ dyf
        if self.b is not None:
            self.store.grad(self.name + ".b")[...] += dyf.sum(axis=0)
        return dy @ self.W.T


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-5):
        self.store = store
        self.name = name
        self.eps = eps
        self.gamma = store.add(name + ".gamma", np.ones(dim))
        self.beta = store.add(name + ".beta", np.zeros(dim))

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return xhat * self.gamma + self.beta

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv = self._cache
        axes = tuple(range(dy.ndim - 1))
        self.store.grad(self.name + ".gamma")[...] += (dy * xhat).sum(axis=axes)
        self.store.grad(self.name + ".beta")[...] += dy.sum(axis=axes)
        dxhat = dy * self.gamma
        # dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)


class Embedding:
    """Index lookup table; backward scatter-adds into the table gradient."""

    def __init__(self, store: ParamStore, name: str, n_rows: int, dim: int,
                 rng: np.random.Generator):
        self.store = store
        self.name = name
        self.table = store.add(name, uniform_init(rng, (n_rows, dim), dim))

    def forward(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.table.shape[0]):
            raise IndexError(f"{self.name}: index out of range (OOV must map to 0 upstream)")
        self._idx = idx
        return self.table[idx]

    def backward(self, dout: np.ndarray) -> None:
        np.add.at(self.store.grad(self.name), self._idx, dout)


NEG_BIG = -1e30  # additive mask value; exp() underflows to exactly 0.0


class CausalSelfAttention:
    """Multi-head causal self-attention with hand-derived gradients."""

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int,
                 rng: np.random.Generator):
        if dim % heads != 0:
            raise ValueError("dim must be divisible by heads")
        self.dim = dim
        self.heads = heads
        self.dh = dim // heads
        self.wq = Linear(store, name + ".wq", dim, dim, rng)
        self.wk = Linear(store, name + ".wk", dim, dim, rng)
        self.wv = Linear(store, name + ".wv", dim, dim, rng)
        self.wo = Linear(store, name + ".wo", dim, dim, rng)

    def _split(self, x: np.ndarray) -> np.ndarray:
        B, T, _ = x.shape
        return x.reshape(B, T, self.heads, self.dh).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        B, H, T, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)

    def forward(self, x: np.ndarray) -> np.ndarray:
        B, T, _ = x.shape
        q = self._split(self.wq.forward(x))
        k = self._split(self.wk.forward(x))
        v = self._split(self.wv.forward(x))
        scale = 1.0 / np.sqrt(self.dh)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        mask = np.triu(np.full((T, T), NEG_BIG), k=1)
        P = softmax(scores + mask)
        ctx = P @ v
        self._cache = (q, k, v, P, scale)
        return self.wo.forward(self._merge(ctx))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        q, k, v, P, scale = self._cache
        dctx = self._split(self.wo.backward(dy))
        dP = dctx @ v.transpose(0, 1, 3, 2)
        dv = P.transpose(0, 1, 3, 2) @ dctx
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True))
        dq = (dS @ k) * scale
        dk = (dS.transpose(0, 1, 3, 2) @ q) * scale
        dx = self.wq.backward(self._merge(dq))
        dx += self.wk.backward(self._merge(dk))
        dx += self.wv.backward(self._merge(dv))
        return dx


class FeedForward:
    """Position-wise 2-layer MLP with a smooth gated nonlinearity (SiLU)."""

    def __init__(self, store: ParamStore, name: str, dim: int, hidden: int,
                 rng: np.random.Generator):
        self.w1 = Linear(store, name + ".w1", dim, hidden, rng)
        self.w2 = Linear(store, name + ".w2", hidden, dim, rng)

    def forward(self, x: np.ndarray) -> np.ndarray:
        u = self.w1.forward(x)
        self._u = u
        return self.w2.forward(silu(u))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dh = self.w2.backward(dy)
        return self.w1.backward(dh * silu_grad(self._u))


class DecoderBlock:
    """Pre-norm block: x + attn(ln1(x)), then h + ffn(ln2(h))."""

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int,
                 rng: np.random.Generator, ff_mult: int = 4):
        self.ln1 = LayerNorm(store, name + ".ln1", dim)
        self.attn = CausalSelfAttention(store, name + ".attn", dim, heads, rng)
        self.ln2 = LayerNorm(store, name + ".ln2", dim)
        self.ffn = FeedForward(store, name + ".ffn", dim, ff_mult * dim, rng)

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x + self.attn.forward(self.ln1.forward(x))
        return h + self.ffn.forward(self.ln2.forward(h))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dh = dy + self.ln2.backward(self.ffn.backward(dy))
        return dh + self.ln1.backward(self.attn.backward(dh))


class Decoder:
    """Stack of causal pre-norm blocks; zero layers is the identity map."""

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int,
                 n_layers: int, rng: np.random.Generator):
        self.blocks = [DecoderBlock(store, f"{name}.block{i}", dim, heads, rng)
                       for i in range(n_layers)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x
        for i, blk in enumerate(self.blocks):
            h = blk.forward(h)
            if not np.isfinite(h).all():
                raise NumericalError(f"non-finite activations after decoder block {i}")
        return h

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for blk in reversed(self.blocks):
            dy = blk.backward(dy)
        return dy


class FieldEmbeddingSet:
    """Per-field lookup tables with a stacked gather and explicit caches.

    Unlike Embedding, gather/scatter are functional (the caller holds the
    cache), so several consumers can read the same tables within one
    forward/backward pass without clobbering each other's saved indices.
    Field order is fixed at construction and defines the stack axis.
    """

    def __init__(self, store: ParamStore, name: str, sizes: dict[str, int],
                 dim: int, rng: np.random.Generator):
        self.store = store
        self.name = name
        self.fields = list(sizes)
        self.dim = dim
        for fld, n_rows in sizes.items():
            store.add(f"{name}.{fld}", uniform_init(rng, (n_rows, dim), dim))

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    def table(self, fld: str) -> np.ndarray:
        return self.store[f"{self.name}.{fld}"]

    def table_grad(self, fld: str) -> np.ndarray:
        return self.store.grad(f"{self.name}.{fld}")

    def _check(self, fld: str, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        n = self.table(fld).shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"{self.name}.{fld}: index out of range 0..{n - 1}")
        return idx

    def gather(self, per_field_idx: dict[str, np.ndarray]) -> tuple[np.ndarray, dict]:
        """Stack one embedding per field: output shape (*batch, n_fields, dim).

        ``per_field_idx`` must cover every field; all index arrays share one
        batch shape. Returns the stack and the cache for scatter().
        """
        cache = {fld: self._check(fld, per_field_idx[fld]) for fld in self.fields}
        out = np.stack([self.table(fld)[cache[fld]] for fld in self.fields], axis=-2)
        return out, cache

    def scatter(self, cache: dict, d_stack: np.ndarray) -> None:
        for pos, fld in enumerate(self.fields):
            np.add.at(self.table_grad(fld), cache[fld], d_stack[..., pos, :])

    def lookup(self, fld: str, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Single-field gather; returns (vectors, checked indices)."""
        idx = self._check(fld, idx)
        return self.table(fld)[idx], idx

    def scatter_one(self, fld: str, idx: np.ndarray, dout: np.ndarray) -> None:
        np.add.at(self.table_grad(fld), idx, dout)


class MLPTower:
    """Two hidden SiLU layers then a linear head; width per the backbones."""

    def __init__(self, store: ParamStore, name: str, n_in: int, hidden: int,
                 n_out: int, rng: np.random.Generator):
        self.l1 = Linear(store, name + ".l1", n_in, hidden, rng)
        self.l2 = Linear(store, name + ".l2", hidden, hidden, rng)
        self.l3 = Linear(store, name + ".l3", hidden, n_out, rng)

    def forward(self, x: np.ndarray) -> np.ndarray:
        u1 = self.l1.forward(x)
        u2 = self.l2.forward(silu(u1))
        self._u1, self._u2 = u1, u2
        return self.l3.forward(silu(u2))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        d2 = self.l3.backward(dy) * silu_grad(self._u2)
        d1 = self.l2.backward(d2) * silu_grad(self._u1)
        return self.l1.backward(d1)
