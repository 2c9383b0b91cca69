import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cotrec import textenc


def test_tokenize_splits_on_punctuation_and_case():
    got = textenc.tokenize("Liked: Shea-Butter Lotion, 2oz!")
    assert got == ["liked", "shea", "butter", "lotion", "2oz"]


def test_tokenize_empty_text():
    assert textenc.tokenize("  ...  ") == []


def test_normalize_unit_length():
    v = textenc.normalize(np.array([3.0, 4.0]))
    assert np.linalg.norm(v) == pytest.approx(1.0)
    assert v == pytest.approx(np.array([0.6, 0.8]))


def test_normalize_rejects_zero():
    with pytest.raises(ValueError):
        textenc.normalize(np.zeros(3))


def test_cosine_fixtures():
    assert textenc.cosine([1, 0], [0, 1]) == pytest.approx(0.0)
    assert textenc.cosine([1, 1], [2, 2]) == pytest.approx(1.0)
    assert textenc.cosine([1, 0], [-1, 0]) == pytest.approx(-1.0)


def test_cosine_rejects_mismatch_and_zero():
    with pytest.raises(ValueError):
        textenc.cosine([1, 0], [1, 0, 0])
    with pytest.raises(ValueError):
        textenc.cosine([0, 0], [1, 0])


def test_synthetic_encoder_is_deterministic():
    enc = textenc.SyntheticEncoder(seed=5, dim=32)
    a = enc.encode("great shampoo for dry hair")
    b = textenc.SyntheticEncoder(seed=5, dim=32).encode(
        "great shampoo for dry hair")
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0)


def test_synthetic_encoder_seed_changes_space():
    text = "great shampoo for dry hair"
    a = textenc.SyntheticEncoder(seed=5, dim=32).encode(text)
    b = textenc.SyntheticEncoder(seed=6, dim=32).encode(text)
    assert not np.allclose(a, b)


def test_synthetic_encoder_token_overlap_raises_cosine():
    enc = textenc.SyntheticEncoder(seed=0, dim=64)
    close = textenc.cosine(enc.encode("rose water facial toner"),
                           enc.encode("rose water toner spray"))
    far = textenc.cosine(enc.encode("rose water facial toner"),
                         enc.encode("mechanical keyboard switch kit"))
    assert close > far


def test_synthetic_encoder_handles_empty_text():
    enc = textenc.SyntheticEncoder(seed=0, dim=16)
    v = enc.encode("")
    assert np.linalg.norm(v) == pytest.approx(1.0)
    assert np.array_equal(v, enc.encode("!!!"))


@given(st.text(max_size=40))
@settings(max_examples=60, deadline=None)
def test_synthetic_encoder_always_unit_norm(text):
    v = textenc.SyntheticEncoder(seed=1, dim=24).encode(text)
    assert np.linalg.norm(v) == pytest.approx(1.0)
    assert v.shape == (24,)


def test_file_encoder_lookup_and_missing_key():
    enc = textenc.FileEncoder({"a": np.array([1.0, 0.0]),
                               "b": np.array([3.0, 4.0])})
    assert enc.encode("b") == pytest.approx(np.array([0.6, 0.8]))
    with pytest.raises(textenc.EncoderKeyError):
        enc.encode("missing")


def test_file_encoder_rejects_ragged_vectors():
    with pytest.raises(ValueError):
        textenc.FileEncoder({"a": np.ones(2), "b": np.ones(3)})


def test_pack_binary_round_trip(tmp_path):
    vectors = {"u1 item": np.array([1.0, 2.0, 3.0]),
               "u2 item": np.array([-1.0, 0.5, 0.25])}
    path = tmp_path / "vecs.lcfe"
    textenc.write_pack(path, vectors, dim=3)
    dim, back = textenc.read_pack(path)
    assert dim == 3
    assert set(back) == set(vectors)
    for key in vectors:
        np.testing.assert_allclose(back[key], vectors[key], atol=1e-6)


def test_pack_textual_variant(tmp_path):
    path = tmp_path / "vecs.txt"
    path.write_text("LCFE1 2 2\nfirst\t1.0 0.0\nsecond\t0.5 -0.5\n")
    dim, back = textenc.read_pack(path)
    assert dim == 2
    assert back["second"] == pytest.approx(np.array([0.5, -0.5]))


def test_pack_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.lcfe"
    path.write_text("NOPE 2 1\nkey\t1.0 0.0\n")
    with pytest.raises(ValueError):
        textenc.read_pack(path)


def test_pack_rejects_truncation(tmp_path):
    vectors = {"k": np.ones(4)}
    path = tmp_path / "trunc.lcfe"
    textenc.write_pack(path, vectors, dim=4)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(ValueError):
        textenc.read_pack(path)


def test_pack_rejects_newline_keys(tmp_path):
    with pytest.raises(ValueError):
        textenc.write_pack(tmp_path / "x.lcfe", {"a\nb": np.ones(2)}, dim=2)


def test_make_encoder_factory():
    enc = textenc.make_encoder("synthetic", seed=2, dim=16)
    assert isinstance(enc, textenc.SyntheticEncoder)
    with pytest.raises(ValueError):
        textenc.make_encoder("file")
    with pytest.raises(ValueError):
        textenc.make_encoder("bert")


def test_from_pack_round_trips_through_factory(tmp_path):
    path = tmp_path / "vecs.lcfe"
    textenc.write_pack(path, {"k": np.array([0.0, 2.0])}, dim=2)
    enc = textenc.make_encoder("file", pack_path=path)
    assert enc.encode("k") == pytest.approx(np.array([0.0, 1.0]))
