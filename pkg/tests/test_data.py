import json

import pytest

from cotrec import data
from cotrec.errors import DataError


def make_log(tmp_path, rows):
    path = tmp_path / "log.ndjson"
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(row if isinstance(row, str) else json.dumps(row))
            fh.write("\n")
    return path


def interaction_rows():
    rows = []
    for u, items in (("u1", ["a", "b", "c", "d"]),
                     ("u2", ["b", "e", "a"]),
                     ("u3", ["d", "f", "c", "b"])):
        for t, item in enumerate(items):
            rows.append({"user_id": u, "item_id": item,
                         "timestamp": 100 * t + 10,
                         "user_attrs": {"segment": "s" + u[-1]},
                         "item_attrs": {"title": item.upper() + " thing",
                                        "category": "cat" + item}})
    return rows


def test_load_counts_malformed_lines(tmp_path):
    rows = interaction_rows()
    rows.insert(2, "{not json")
    rows.insert(5, json.dumps({"user_id": "ux", "item_id": "a"}))  # no ts
    rows.insert(7, json.dumps({"user_id": "", "item_id": "a",
                               "timestamp": 5}))
    path = make_log(tmp_path, rows)
    result = data.load_interactions(path)
    assert result.malformed == 3
    assert len(result.interactions) == 11


def test_load_orders_by_user_then_time(tmp_path):
    rows = [{"user_id": "u2", "item_id": "x", "timestamp": 30},
            {"user_id": "u1", "item_id": "y", "timestamp": 20},
            {"user_id": "u1", "item_id": "z", "timestamp": 10}]
    result = data.load_interactions(make_log(tmp_path, rows))
    got = [(it.user_id, it.timestamp) for it in result.interactions]
    assert got == [("u1", 10), ("u1", 20), ("u2", 30)]


def test_load_applies_time_range(tmp_path):
    path = make_log(tmp_path, interaction_rows())
    result = data.load_interactions(path, time_range=(110, 210))
    assert all(110 <= it.timestamp <= 210 for it in result.interactions)
    assert len(result.interactions) == 6


def test_load_missing_file_raises():
    with pytest.raises(DataError):
        data.load_interactions("/nonexistent/log.ndjson")


def test_load_empty_log_raises(tmp_path):
    path = make_log(tmp_path, ["{broken"])
    with pytest.raises(DataError):
        data.load_interactions(path)


def test_log_stats_fields(tmp_path):
    result = data.load_interactions(make_log(tmp_path, interaction_rows()))
    stats = data.log_stats(result.interactions)
    assert stats["n_users"] == 3
    assert stats["n_items"] == 6
    assert stats["n_reviews"] == 11
    assert stats["sparsity_pct"] == pytest.approx(100.0 * 11 / 18)


def test_vocab_reserves_zero_for_oov(tmp_path):
    result = data.load_interactions(make_log(tmp_path, interaction_rows()))
    vocab = data.Vocab.build(result.interactions)
    assert vocab.lookup("item_id", "never-seen") == 0
    assert vocab.token("item_id", 0) == "<oov>"
    idx = vocab.lookup("item_id", "a")
    assert idx > 0
    assert vocab.token("item_id", idx) == "a"
    assert vocab.size("item_id") == 7  # 6 items + oov


def test_vocab_round_trip(tmp_path):
    result = data.load_interactions(make_log(tmp_path, interaction_rows()))
    vocab = data.Vocab.build(result.interactions)
    back = data.Vocab.from_dict(json.loads(json.dumps(vocab.to_dict())))
    assert back.field_sizes() == vocab.field_sizes()
    assert back.lookup("user:segment", "s2") == vocab.lookup("user:segment", "s2")
    assert back.item_meta == vocab.item_meta


def test_build_splits_leave_one_out(tmp_path):
    result = data.load_interactions(make_log(tmp_path, interaction_rows()))
    split, vocab, dropped = data.build_splits(result.interactions)
    assert dropped == 0
    assert len(split.test) == 3 and len(split.valid) == 3
    assert len(split.train) == 11 - 6
    for exs, offset in ((split.test, 1), (split.valid, 2)):
        for ex in exs:
            # held-out examples are each user's latest timestamps
            user_rows = [it for it in result.interactions
                         if it.user_id == ex.user_id]
            assert ex.timestamp == user_rows[-offset].timestamp


def test_build_splits_drops_short_users(tmp_path):
    rows = interaction_rows() + [{"user_id": "u9", "item_id": "a",
                                  "timestamp": 1}]
    result = data.load_interactions(make_log(tmp_path, rows))
    split, _, dropped = data.build_splits(result.interactions)
    assert dropped == 1
    assert all(ex.user_id != "u9" for part in ("train", "valid", "test")
               for ex in split[part])


def test_build_splits_deduplicates_replayed_lines(tmp_path):
    rows = interaction_rows()
    rows += rows[:3]  # exact replays
    result = data.load_interactions(make_log(tmp_path, rows))
    split, _, _ = data.build_splits(result.interactions)
    total = len(split.train) + len(split.valid) + len(split.test)
    assert total == 11


def test_history_strictly_precedes_example(tmp_path):
    result = data.load_interactions(make_log(tmp_path, interaction_rows()))
    split, vocab, _ = data.build_splits(result.interactions)
    ts_of = {}
    for it in result.interactions:
        key = (it.user_id, vocab.lookup("item_id", it.item_id))
        ts_of.setdefault(key, it.timestamp)
    for part in ("train", "valid", "test"):
        for ex in split[part]:
            for idx in ex.history:
                assert ts_of[(ex.user_id, idx)] < ex.timestamp


def test_history_is_bounded(tmp_path):
    rows = [{"user_id": "u", "item_id": f"i{t}", "timestamp": t}
            for t in range(30)]
    result = data.load_interactions(make_log(tmp_path, rows))
    split, _, _ = data.build_splits(result.interactions)
    longest = max(len(ex.history)
                  for part in ("train", "valid", "test")
                  for ex in split[part])
    assert longest == data.MAX_HISTORY


def test_render_text_mentions_history_and_target(tmp_path):
    result = data.load_interactions(make_log(tmp_path, interaction_rows()))
    split, vocab, _ = data.build_splits(result.interactions)
    ex = split.test[0]
    text = data.render_text(ex, vocab)
    assert "History:" in text and "Target:" in text
    assert "\n" not in text
    masked = data.render_text(ex, vocab, include_target=False)
    assert "Target:" not in masked


def test_render_text_never_leaks_label(tmp_path):
    result = data.load_interactions(make_log(tmp_path, interaction_rows()))
    split, vocab, _ = data.build_splits(result.interactions)
    split = data.sample_negatives(split, vocab, seed=3)
    pairs = {}
    for ex in split.train:
        pairs.setdefault((ex.user_id, ex.timestamp), []).append(ex)
    for group in pairs.values():
        texts = {data.render_text(ex, vocab, include_target=False)
                 for ex in group}
        assert len(texts) == 1  # label and target invisible when masked


def test_sample_negatives_pairs_and_avoids_seen(tmp_path):
    result = data.load_interactions(make_log(tmp_path, interaction_rows()))
    split, vocab, _ = data.build_splits(result.interactions)
    out = data.sample_negatives(split, vocab, seed=3)
    for part in ("train", "valid", "test"):
        labels = [ex.label for ex in out[part]]
        assert labels.count(1) == labels.count(0)
    seen = {}
    for it in result.interactions:
        seen.setdefault(it.user_id, set()).add(
            vocab.lookup("item_id", it.item_id))
    for part in ("train", "valid", "test"):
        for ex in out[part]:
            if ex.label == 0:
                assert ex.target_item_index not in seen[ex.user_id]
                assert ex.target_item_index != 0


def test_sample_negatives_is_deterministic(tmp_path):
    result = data.load_interactions(make_log(tmp_path, interaction_rows()))
    split, vocab, _ = data.build_splits(result.interactions)
    a = data.sample_negatives(split, vocab, seed=3)
    b = data.sample_negatives(split, vocab, seed=3)
    got_a = [(ex.item_id, ex.label) for ex in a.train]
    got_b = [(ex.item_id, ex.label) for ex in b.train]
    assert got_a == got_b
    c = data.sample_negatives(split, vocab, seed=4)
    got_c = [(ex.item_id, ex.label) for ex in c.train]
    assert got_a != got_c


def test_sample_negatives_exhausted_catalog_raises(tmp_path):
    rows = [{"user_id": "u", "item_id": f"i{t}", "timestamp": t}
            for t in range(3)]
    result = data.load_interactions(make_log(tmp_path, rows))
    split, vocab, _ = data.build_splits(result.interactions)
    with pytest.raises(DataError):
        data.sample_negatives(split, vocab, seed=0)


def test_split_dir_round_trip(tmp_path, tiny_world):
    _, split, vocab, _ = tiny_world
    outdir = tmp_path / "splits"
    data.write_split_dir(split, vocab, outdir)
    split2, vocab2 = data.read_split_dir(outdir)
    assert vocab2.field_sizes() == vocab.field_sizes()
    for part in ("train", "valid", "test"):
        assert len(split2[part]) == len(split[part])
        for a, b in zip(split[part], split2[part]):
            assert (a.user_id, a.item_id, a.timestamp, a.label) == \
                   (b.user_id, b.item_id, b.timestamp, b.label)
            assert a.history == b.history
            assert a.text == b.text


def test_read_split_dir_missing_vocab(tmp_path):
    with pytest.raises(DataError):
        data.read_split_dir(tmp_path)
