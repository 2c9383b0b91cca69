import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cotrec import incontext, nn
from cotrec.cotstore import CoTRecord
from cotrec.data import Example
from cotrec.errors import NumericalError

TEXT_DIM = 6
DIM = 4


def make_example(uid, iid, ts, label):
    return Example(user_id=uid, item_id=iid, user_index=(ts % 2) + 1,
                   user_attr_indices=[1], history=[],
                   target_item_index=(ts % 3) + 1, target_attr_indices=[1],
                   timestamp=ts, label=label, text=f"{uid} {iid}")


def make_record(rid, label=1, ts=None, rng=None):
    rng = rng or np.random.default_rng(rid)
    ex = make_example(f"u{rid}", f"i{rid}", ts if ts is not None else rid,
                      label)
    key = rng.normal(size=TEXT_DIM)
    cot = rng.normal(size=TEXT_DIM)
    return CoTRecord(rid, ex, key / np.linalg.norm(key),
                     cot / np.linalg.norm(cot))


def make_query(mask_target=False, rng=None):
    rng = rng or np.random.default_rng(99)
    ex = make_example("uq", "iq", 50, 1)
    return incontext.query_payload(ex, rng.normal(size=TEXT_DIM),
                                   mask_target=mask_target)


def make_encoder(k_max=2, layers=1, rng_seed=0):
    store = nn.ParamStore()
    rng = np.random.default_rng(rng_seed)
    sizes = {"user_id": 3, "user:seg": 3, "item_id": 4, "item:cat": 3}
    fields = nn.FieldEmbeddingSet(store, "fields", sizes, DIM, rng)
    config = incontext.IctConfig(dim=DIM, heads=2, layers=layers,
                                 k_max=k_max, text_dim=TEXT_DIM)
    enc = incontext.ContextEncoder(store, "ict", fields, config, rng)
    return store, enc


def test_token_layout_full_pattern():
    r, c, l, n = incontext.token_layout(4, include_cot=True)
    assert n == 13
    assert r == [0, 3, 6, 9, 12]
    assert c == [1, 4, 7, 10]
    assert l == [2, 5, 8, 11]
    assert sorted(r + c + l) == list(range(13))


def test_token_layout_no_cot_pattern():
    r, c, l, n = incontext.token_layout(2, include_cot=False)
    assert n == 5
    assert r == [0, 2, 4]
    assert c == []
    assert l == [1, 3]


def test_token_layout_empty_context():
    r, c, l, n = incontext.token_layout(0, include_cot=True)
    assert (r, c, l, n) == ([0], [], [], 1)


@given(st.integers(0, 8), st.booleans())
def test_token_layout_lengths(k, include_cot):
    r, c, l, n = incontext.token_layout(k, include_cot)
    assert n == (3 * k + 1 if include_cot else 2 * k + 1)
    assert sorted(r + c + l) == list(range(n))
    assert r[-1] == n - 1


def test_assemble_keeps_store_order_and_kinds():
    records = [make_record(i, label=i % 2) for i in range(2)]
    seq = incontext.assemble(make_query(), records, include_cot=True)
    assert len(seq) == 7
    assert seq.kinds == ["R", "C", "L", "R", "C", "L", "R"]
    assert seq.records == records
    assert seq.k_prime == 2
    assert seq.example_positions == [0, 3]
    assert seq.query_position == 6


def test_assemble_no_cot_kinds():
    records = [make_record(i) for i in range(3)]
    seq = incontext.assemble(make_query(), records, include_cot=False)
    assert seq.kinds == ["R", "L", "R", "L", "R", "L", "R"]
    assert len(seq) == 7


def test_assemble_empty_context():
    seq = incontext.assemble(make_query(), [], include_cot=True)
    assert seq.kinds == ["R"]
    assert seq.example_positions == []


def test_query_payload_masking():
    ex = make_example("u", "i", 9, 1)
    rng = np.random.default_rng(0)
    open_q = incontext.query_payload(ex, rng.normal(size=TEXT_DIM))
    assert open_q.target_item_index == ex.target_item_index
    masked = incontext.query_payload(ex, rng.normal(size=TEXT_DIM),
                                     mask_target=True)
    assert masked.target_item_index == 0
    assert masked.target_attr_indices == [0]
    assert masked.mask_target


def test_collate_shapes_and_contents():
    records = [make_record(i, label=1) for i in range(2)]
    seqs = [incontext.assemble(make_query(), records) for _ in range(3)]
    batch = incontext.collate(seqs)
    assert batch.batch_size == 3
    assert batch.k_prime == 2
    assert batch.seq_len == 7
    assert batch.user_idx.shape == (3, 3)
    assert batch.cot.shape == (3, 2, TEXT_DIM)
    assert batch.labels.shape == (3, 2)
    assert (batch.labels == 1).all()
    np.testing.assert_array_equal(batch.text[0, 0],
                                  records[0].key_embedding)
    assert batch.field_mask.min() == 1.0  # nothing masked


def test_collate_zeroes_masked_query_fields():
    records = [make_record(i) for i in range(1)]
    seq = incontext.assemble(make_query(mask_target=True), records)
    batch = incontext.collate([seq])
    # fields: user_id, 1 user attr, item_id, 1 item attr
    np.testing.assert_array_equal(batch.field_mask[0, 1], [1, 1, 0, 0])
    np.testing.assert_array_equal(batch.field_mask[0, 0], [1, 1, 1, 1])
    assert batch.item_idx[0, 1] == 0


def test_collate_rejects_mixed_groups():
    a = incontext.assemble(make_query(), [make_record(0)])
    b = incontext.assemble(make_query(), [make_record(0), make_record(1)])
    with pytest.raises(ValueError):
        incontext.collate([a, b])
    c = incontext.assemble(make_query(), [make_record(0)], include_cot=False)
    with pytest.raises(ValueError):
        incontext.collate([a, c])
    with pytest.raises(ValueError):
        incontext.collate([])


def test_cf_feature_takes_last_position():
    hidden = np.arange(24, dtype=float).reshape(2, 3, 4)
    got = incontext.cf_feature(hidden)
    np.testing.assert_array_equal(got, hidden[:, -1])


def test_mean_pool_feature_averages_tokens():
    embedded = np.stack([np.zeros((3, 4)), np.ones((3, 4))])
    got = incontext.mean_pool_feature(embedded)
    np.testing.assert_allclose(got[0], 0.0)
    np.testing.assert_allclose(got[1], 1.0)


def recon_fixture_seq(k):
    records = [make_record(i) for i in range(k)]
    return incontext.assemble(make_query(), records)


def test_recon_loss_aligned_is_zero():
    seq = recon_fixture_seq(2)
    hidden = np.zeros((7, DIM))
    targets = np.zeros((2, DIM))
    hidden[0] = targets[0] = [1, 0, 0, 0]
    hidden[3] = [0, 2, 0, 0]
    targets[1] = [0, 5, 0, 0]  # same direction, different norm
    hidden[[1, 2, 4, 5, 6]] = 1.0
    assert incontext.recon_loss(hidden, seq, targets) == pytest.approx(0.0)


def test_recon_loss_orthogonal_is_one():
    seq = recon_fixture_seq(1)
    hidden = np.ones((4, DIM))
    hidden[0] = [1, 0, 0, 0]
    targets = np.array([[0.0, 1.0, 0.0, 0.0]])
    assert incontext.recon_loss(hidden, seq, targets) == pytest.approx(1.0)


def test_recon_loss_mixed_alignment():
    seq = recon_fixture_seq(2)
    hidden = np.ones((7, DIM))
    hidden[0] = [1, 0, 0, 0]
    hidden[3] = [0, 1, 0, 0]
    targets = np.array([[1.0, 0, 0, 0], [0.0, -1.0, 0, 0]])
    # aligned (0) plus antipodal (2), averaged
    assert incontext.recon_loss(hidden, seq, targets) == pytest.approx(1.0)


def test_recon_loss_empty_context_is_zero():
    seq = recon_fixture_seq(0)
    assert incontext.recon_loss(np.ones((1, DIM)), seq,
                                np.zeros((0, DIM))) == 0.0


def test_recon_loss_zero_norm_raises():
    seq = recon_fixture_seq(1)
    hidden = np.ones((4, DIM))
    hidden[0] = 0.0
    with pytest.raises(NumericalError):
        incontext.recon_loss(hidden, seq, np.ones((1, DIM)))


def make_group(k, batch=3, mask_target=False, seed=0):
    rng = np.random.default_rng(seed)
    seqs = []
    for b in range(batch):
        records = [make_record(k * b + i, label=(b + i) % 2, rng=rng)
                   for i in range(k)]
        seqs.append(incontext.assemble(make_query(mask_target=mask_target,
                                                  rng=rng), records))
    return incontext.collate(seqs)


def test_encoder_forward_shapes():
    _, enc = make_encoder(k_max=2)
    batch = make_group(2)
    w, recon = enc.forward(batch)
    assert w.shape == (3, DIM)
    assert recon.shape == (3,)
    assert (recon >= 0).all() and (recon <= 2).all()


def test_encoder_hidden_length_matches_pattern():
    _, enc = make_encoder(k_max=4)
    batch = make_group(4)
    embedded = enc.embed_tokens(batch)
    assert embedded.shape == (3, 13, DIM)


def test_encoder_rejects_oversized_context():
    _, enc = make_encoder(k_max=1)
    batch = make_group(2)
    with pytest.raises(ValueError):
        enc.forward(batch)


def test_encoder_mean_pool_skips_decoder():
    _, enc = make_encoder(k_max=2)
    batch = make_group(2)
    w, recon = enc.forward(batch, mean_pool=True)
    np.testing.assert_array_equal(recon, 0.0)
    want = incontext.mean_pool_feature(enc.embed_tokens(batch))
    np.testing.assert_allclose(w, want)


def test_encoder_is_causal_across_records():
    _, enc = make_encoder(k_max=2)
    batch = make_group(2)
    base = enc.decoder.forward(enc.embed_tokens(batch))
    batch.text[:, 1] += 3.0  # second record's R token (position 3)
    bumped = enc.decoder.forward(enc.embed_tokens(batch))
    np.testing.assert_allclose(bumped[:, :3], base[:, :3], atol=1e-12)
    assert not np.allclose(bumped[:, 3:], base[:, 3:])


def test_encoder_dropout_deterministic_and_optional():
    _, enc = make_encoder(k_max=2)
    enc.config.dropout = 0.5
    batch = make_group(2)
    w1, _ = enc.forward(batch, dropout_rng=np.random.default_rng(42))
    w2, _ = enc.forward(batch, dropout_rng=np.random.default_rng(42))
    np.testing.assert_array_equal(w1, w2)
    w3, _ = enc.forward(batch, dropout_rng=np.random.default_rng(43))
    assert not np.allclose(w1, w3)
    w4, _ = enc.forward(batch, dropout_rng=None)  # inference: no dropout
    enc.config.dropout = 0.0
    w5, _ = enc.forward(batch, dropout_rng=np.random.default_rng(42))
    np.testing.assert_allclose(w4, w5)


def encoder_loss_and_grads(store, enc, batch, weights, alpha):
    """Analytic pass; returns frozen targets for the FD loss."""
    store.zero_grads()
    w, recon = enc.forward(batch)
    frozen = enc.recon_targets.copy()
    enc.backward(weights, np.full(batch.batch_size, alpha))
    loss = float((w * weights).sum() + alpha * recon.sum())
    return loss, frozen


def encoder_fd_loss(enc, batch, weights, alpha, frozen):
    embedded = enc.embed_tokens(batch)
    hidden = enc.decoder.forward(embedded)
    w = hidden[:, -1]
    r_slots = incontext.token_layout(batch.k_prime, True)[0][:-1]
    h = hidden[:, r_slots]
    cos = (h * frozen).sum(-1) / (np.linalg.norm(h, axis=-1)
                                  * np.linalg.norm(frozen, axis=-1))
    recon = (1.0 - cos).mean(axis=-1)
    return float((w * weights).sum() + alpha * recon.sum())


def test_encoder_gradients_match_finite_differences():
    store, enc = make_encoder(k_max=2, layers=1, rng_seed=3)
    batch = make_group(2, batch=2, seed=5)
    rng = np.random.default_rng(7)
    weights = rng.normal(size=(2, DIM))
    alpha = 0.7
    _, frozen = encoder_loss_and_grads(store, enc, batch, weights, alpha)
    h = 1e-5
    for name in store.names():
        arr = store[name]
        flat = arr.reshape(-1)
        gflat = store.grad(name).reshape(-1)
        picks = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            lp = encoder_fd_loss(enc, batch, weights, alpha, frozen)
            flat[i] = orig - h
            lm = encoder_fd_loss(enc, batch, weights, alpha, frozen)
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            a = gflat[i]
            rel = abs(a - fd) / max(1e-6, abs(a), abs(fd))
            assert rel <= 1e-3, f"{name}[{i}]: analytic {a}, fd {fd}"


def test_encoder_gradient_flows_only_from_query_when_alpha_unused():
    """With d_recon = 0 the trace projection still feeds the decoder path."""
    store, enc = make_encoder(k_max=2, layers=1, rng_seed=3)
    batch = make_group(2, batch=2, seed=5)
    store.zero_grads()
    w, _ = enc.forward(batch)
    enc.backward(np.ones((2, DIM)), np.zeros(2))
    assert np.abs(store.grad("ict.cot1.W")).sum() > 0
