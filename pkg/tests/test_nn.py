"""Finite-difference gradient checks for every layer primitive."""

import numpy as np
import pytest

from cotrec import nn
from cotrec.errors import NumericalError

H = 1e-5
TOL = 1e-6


def fd_param_grads(store, loss_fn):
    """Central finite differences over every stored parameter entry."""
    grads = {}
    for name in store.names():
        arr = store[name]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + H
            lp = loss_fn()
            flat[i] = orig - H
            lm = loss_fn()
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * H)
        grads[name] = g
    return grads


def fd_input_grad(x, loss_fn):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + H
        lp = loss_fn()
        flat[i] = orig - H
        lm = loss_fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2 * H)
    return g


def assert_layer_grads(store, layer, x, seed=0):
    """Weighted-sum loss over the layer output; checks params and input."""
    rng = np.random.default_rng(seed)
    weights = rng.normal(size=layer.forward(x).shape)

    def loss():
        return float((layer.forward(x) * weights).sum())

    store.zero_grads()
    out = layer.forward(x)
    dx = layer.backward(weights)
    want_params = fd_param_grads(store, loss)
    for name, want in want_params.items():
        np.testing.assert_allclose(store.grad(name), want, atol=1e-4,
                                   rtol=1e-4, err_msg=name)
    want_dx = fd_input_grad(x, loss)
    np.testing.assert_allclose(dx, want_dx, atol=1e-4, rtol=1e-4)
    return out


def test_param_store_bookkeeping():
    store = nn.ParamStore()
    w = store.add("layer.W", np.ones((2, 3)))
    assert store.n_params() == 6
    store.grad("layer.W")[:] = 5.0
    store.zero_grads()
    assert store.grad("layer.W").sum() == 0.0
    with pytest.raises(ValueError):
        store.add("layer.W", np.ones(1))
    clone = store.clone_arrays()
    clone["layer.W"][0, 0] = -1.0
    assert w[0, 0] == 1.0  # clone is detached
    store.load_arrays(clone)
    assert store["layer.W"][0, 0] == -1.0


def test_uniform_init_scale():
    rng = np.random.default_rng(0)
    w = nn.uniform_init(rng, (200, 50), fan_in=50)
    bound = 1.0 / np.sqrt(50)
    assert w.min() >= -bound and w.max() <= bound
    assert abs(w.mean()) < 0.01


def test_silu_grad_matches_fd():
    x = np.linspace(-4, 4, 33)
    want = fd_input_grad(x, lambda: float(nn.silu(x).sum()))
    np.testing.assert_allclose(nn.silu_grad(x), want, atol=1e-8)


def test_softmax_rows_sum_to_one():
    z = np.random.default_rng(1).normal(size=(4, 7)) * 10
    p = nn.softmax(z)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert (p > 0).all()


def test_softmax_handles_masked_lanes():
    z = np.array([[0.0, nn.NEG_BIG, 0.0]])
    p = nn.softmax(z)
    assert p[0, 1] == pytest.approx(0.0, abs=1e-12)


def test_linear_grads():
    store = nn.ParamStore()
    rng = np.random.default_rng(2)
    layer = nn.Linear(store, "lin", 4, 3, rng)
    x = rng.normal(size=(2, 5, 4))
    assert_layer_grads(store, layer, x)


def test_layernorm_grads():
    store = nn.ParamStore()
    layer = nn.LayerNorm(store, "ln", 6)
    store["ln.gamma"][:] = np.linspace(0.5, 1.5, 6)
    store["ln.beta"][:] = 0.1
    x = np.random.default_rng(3).normal(size=(3, 6)) * 2
    assert_layer_grads(store, layer, x)


def test_layernorm_output_standardized():
    store = nn.ParamStore()
    layer = nn.LayerNorm(store, "ln", 8)
    x = np.random.default_rng(4).normal(size=(5, 8)) * 3 + 1
    y = layer.forward(x)
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-3)


def test_embedding_grads_accumulate_repeats():
    store = nn.ParamStore()
    rng = np.random.default_rng(5)
    emb = nn.Embedding(store, "emb", 6, 3, rng)
    idx = np.array([[1, 1, 4], [0, 2, 1]])
    weights = rng.normal(size=(2, 3, 3))

    def loss():
        return float((emb.forward(idx) * weights).sum())

    store.zero_grads()
    emb.forward(idx)
    emb.backward(weights)
    want = fd_param_grads(store, loss)["emb"]
    np.testing.assert_allclose(store.grad("emb"), want, atol=1e-6)


def test_embedding_rejects_out_of_range():
    store = nn.ParamStore()
    emb = nn.Embedding(store, "emb", 4, 2, np.random.default_rng(0))
    with pytest.raises(IndexError):
        emb.forward(np.array([4]))
    with pytest.raises(IndexError):
        emb.forward(np.array([-1]))


def test_attention_grads():
    store = nn.ParamStore()
    rng = np.random.default_rng(6)
    attn = nn.CausalSelfAttention(store, "attn", dim=6, heads=2, rng=rng)
    x = rng.normal(size=(2, 5, 6))
    assert_layer_grads(store, attn, x)


def test_attention_is_causal():
    store = nn.ParamStore()
    rng = np.random.default_rng(7)
    attn = nn.CausalSelfAttention(store, "attn", dim=4, heads=2, rng=rng)
    x = rng.normal(size=(1, 6, 4))
    base = attn.forward(x.copy())
    x2 = x.copy()
    x2[0, 4] += 10.0  # future token for positions < 4
    bumped = attn.forward(x2)
    np.testing.assert_allclose(bumped[0, :4], base[0, :4], atol=1e-12)
    assert not np.allclose(bumped[0, 4], base[0, 4])


def test_feedforward_grads():
    store = nn.ParamStore()
    rng = np.random.default_rng(8)
    ff = nn.FeedForward(store, "ff", dim=5, hidden=7, rng=rng)
    x = rng.normal(size=(2, 3, 5))
    assert_layer_grads(store, ff, x)


def test_decoder_block_grads():
    store = nn.ParamStore()
    rng = np.random.default_rng(9)
    block = nn.DecoderBlock(store, "blk", dim=4, heads=2, rng=rng)
    x = rng.normal(size=(2, 4, 4))
    assert_layer_grads(store, block, x)


def test_decoder_grads_and_shape():
    store = nn.ParamStore()
    rng = np.random.default_rng(10)
    dec = nn.Decoder(store, "dec", dim=4, heads=2, n_layers=2, rng=rng)
    x = rng.normal(size=(2, 5, 4))
    out = assert_layer_grads(store, dec, x)
    assert out.shape == x.shape


def test_decoder_flags_non_finite_activations():
    store = nn.ParamStore()
    rng = np.random.default_rng(11)
    dec = nn.Decoder(store, "dec", dim=4, heads=2, n_layers=1, rng=rng)
    x = rng.normal(size=(1, 3, 4))
    x[0, 0, 0] = np.nan
    with pytest.raises(NumericalError):
        dec.forward(x)


def test_mlp_tower_grads():
    store = nn.ParamStore()
    rng = np.random.default_rng(12)
    tower = nn.MLPTower(store, "tower", n_in=6, hidden=5, n_out=1, rng=rng)
    x = rng.normal(size=(4, 6))
    assert_layer_grads(store, tower, x)


def test_field_embedding_set_gather_scatter():
    store = nn.ParamStore()
    rng = np.random.default_rng(13)
    fields = nn.FieldEmbeddingSet(store, "f",
                                  {"user_id": 5, "item_id": 7}, 3, rng)
    idx = {"user_id": np.array([[1, 2]]), "item_id": np.array([[3, 0]])}
    weights = rng.normal(size=(1, 2, 2, 3))

    def loss():
        stack, _ = fields.gather(idx)
        return float((stack * weights).sum())

    store.zero_grads()
    stack, cache = fields.gather(idx)
    assert stack.shape == (1, 2, 2, 3)
    fields.scatter(cache, weights)
    for name, want in fd_param_grads(store, loss).items():
        np.testing.assert_allclose(store.grad(name), want, atol=1e-6,
                                   err_msg=name)


def test_field_embedding_set_names_offending_field():
    store = nn.ParamStore()
    fields = nn.FieldEmbeddingSet(store, "f", {"user_id": 3}, 2,
                                  np.random.default_rng(0))
    with pytest.raises(IndexError, match="user_id"):
        fields.gather({"user_id": np.array([5])})


def test_gather_caches_are_independent():
    """Two gathers before two scatters must not clobber each other."""
    store = nn.ParamStore()
    rng = np.random.default_rng(14)
    fields = nn.FieldEmbeddingSet(store, "f", {"item_id": 4}, 2, rng)
    idx_a = {"item_id": np.array([1])}
    idx_b = {"item_id": np.array([2])}
    _, cache_a = fields.gather(idx_a)
    _, cache_b = fields.gather(idx_b)
    fields.scatter(cache_a, np.ones((1, 1, 2)))
    fields.scatter(cache_b, np.full((1, 1, 2), 2.0))
    g = store.grad("f.item_id")
    assert g[1] == pytest.approx([1.0, 1.0])
    assert g[2] == pytest.approx([2.0, 2.0])
