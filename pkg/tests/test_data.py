import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adarec import data
from adarec.data import PAD, DataError, Interaction, InteractionLog


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def log_from(histories: dict) -> InteractionLog:
    return InteractionLog([Interaction(u, ts, item) for u, items in histories.items()
                           for ts, item in enumerate(items)])


class TestIngest:
    def test_tsv_single_user(self, tmp_path):
        p = write(tmp_path, "a.tsv", "u1\tx\t3\nu1\ty\t1\nu1\tz\t2\n")
        log = data.ingest(p, "tsv")
        assert [r.item for r in log.records] == ["y", "z", "x"]

    def test_header_skipped(self, tmp_path):
        p = write(tmp_path, "a.tsv", "user\titem\ttimestamp\nu1\tx\t1\n")
        assert len(data.ingest(p)) == 1

    def test_equal_timestamps_tie_break_on_item(self, tmp_path):
        p = write(tmp_path, "a.tsv", "u\tb\t5\nu\ta\t5\n")
        assert [r.item for r in data.ingest(p).records] == ["a", "b"]

    def test_missing_timestamp_reports_line(self, tmp_path):
        p = write(tmp_path, "a.tsv", "u\ta\t1\nu\tb\n")
        with pytest.raises(DataError) as exc:
            data.ingest(p)
        assert exc.value.line == 2

    def test_bad_timestamp(self, tmp_path):
        p = write(tmp_path, "a.tsv", "u\ta\tnoon\n")
        with pytest.raises(DataError, match="line 1"):
            data.ingest(p)

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataError):
            data.ingest(write(tmp_path, "a.tsv", ""))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            data.ingest(tmp_path / "nope.tsv")

    def test_jsonl(self, tmp_path):
        lines = [{"user": "u", "item": "b", "ts": 2}, {"user": "u", "item": "a", "ts": 1}]
        p = write(tmp_path, "a.jsonl", "\n".join(json.dumps(x) for x in lines))
        assert [r.item for r in data.ingest(p, "jsonl").records] == ["a", "b"]

    def test_jsonl_missing_key(self, tmp_path):
        p = write(tmp_path, "a.jsonl", '{"user": "u", "item": "a"}\n')
        with pytest.raises(DataError, match="line 1"):
            data.ingest(p, "jsonl")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(DataError):
            data.ingest(write(tmp_path, "a.csv", "x"), "csv")


class TestBuildSequences:
    def test_short_user_left_padded(self):
        seqs, vocab = data.build_sequences(log_from({"u": list("abcdefg")}), 10)
        row = seqs.items[0]
        assert list(row[:3]) == [0, 0, 0]
        assert [vocab.decode(int(i)) for i in row[3:]] == list("abcdefg")

    def test_long_user_chunked_from_recent_end(self):
        items = [f"i{k:02d}" for k in range(23)]
        seqs, vocab = data.build_sequences(log_from({"u": items}), 10)
        assert seqs.items.shape == (3, 10)
        decoded = [[vocab.decode(int(i)) for i in r if i != PAD] for r in seqs.items]
        assert decoded == [items[:3], items[3:13], items[13:]]
        assert (seqs.items[0][:7] == PAD).all()

    def test_single_item_user_dropped(self):
        seqs, _ = data.build_sequences(log_from({"a": ["x"], "b": ["x", "y"]}), 5)
        assert seqs.users == ["b"]

    def test_vocabulary_dense(self):
        _, vocab = data.build_sequences(log_from({"u": ["q", "p", "q", "r"]}), 5)
        assert [vocab.encode(x) for x in vocab.items] == [1, 2, 3]

    def test_min_count_filter(self):
        seqs, vocab = data.build_sequences(log_from({"u": ["a", "b", "a", "c", "a", "b"]}), 10, min_count=2)
        assert set(vocab.items) == {"a", "b"}

    def test_rejects_short_t(self):
        with pytest.raises(ValueError):
            data.build_sequences(log_from({"u": ["a", "b"]}), 1)

    @settings(max_examples=50, deadline=None)
    @given(st.dictionaries(st.sampled_from(["u1", "u2", "u3"]),
                           st.lists(st.sampled_from("abcdefgh"), min_size=0, max_size=30), min_size=1),
           st.integers(2, 9))
    def test_round_trip(self, histories, t):
        log = log_from(histories)
        seqs, vocab = data.build_sequences(log, t)
        assert (seqs.items[:, -1] != PAD).all()
        per_user: dict = {}
        for user, row in zip(seqs.users, seqs.items):
            real = row[row != PAD]
            # padding only as a contiguous prefix
            assert (row[len(row) - len(real):] != PAD).all()
            assert len(real) >= 2
            per_user.setdefault(user, []).extend(vocab.decode(int(i)) for i in real)
        for user, items in histories.items():
            kept = [w for w in data.chunk(items, t) if len(w) >= 2]
            assert per_user.get(user, []) == [x for w in kept for x in w]


class TestSplit:
    def test_leave_one_out(self):
        a, b, c, d, e = 1, 2, 3, 4, 5
        s = data.leave_one_out_split(np.array([0, 0, a, b, c, d, e]))
        assert list(s.train) == [0, 0, 0, 0, a, b, c]
        assert (s.val_target, s.test_target) == (d, e)

    def test_two_items_train_only(self):
        s = data.leave_one_out_split(np.array([0, 0, 0, 7, 8]))
        assert s.val_target is None and s.test_target is None
        assert list(s.train) == [0, 0, 0, 7, 8]

    def test_full_length(self):
        s = data.leave_one_out_split(np.arange(1, 11))
        assert (s.train != PAD).sum() == 8 and (s.train == PAD).sum() == 2

    def test_dataset_views(self):
        seqs = data.SequenceSet(np.array([[0, 1, 2, 3, 4], [0, 0, 0, 5, 6]]), ["a", "b"])
        ds = data.split_dataset(seqs, 6)
        assert ds.train.tolist() == [[0, 0, 0, 1, 2], [0, 0, 0, 5, 6]]
        assert ds.val.inputs.tolist() == [[0, 0, 0, 1, 2]] and ds.val.targets.tolist() == [3]
        assert ds.test.inputs.tolist() == [[0, 0, 1, 2, 3]] and ds.test.targets.tolist() == [4]

    def test_next_item_cases(self):
        cases = data.next_item_cases(np.array([[0, 1, 2, 3], [0, 0, 0, 4]]))
        assert cases.inputs.tolist() == [[0, 0, 1, 2]] and cases.targets.tolist() == [3]


class TestSerialization:
    def test_sequences_round_trip(self, tmp_path):
        seqs = data.SequenceSet(np.array([[0, 1, 2], [3, 4, 5]]), ["a", "b"])
        data.write_sequences(tmp_path / "s.jsonl", seqs)
        first = (tmp_path / "s.jsonl").read_text().splitlines()[0]
        assert json.loads(first) == [0, 1, 2]
        back = data.read_sequences(tmp_path / "s.jsonl")
        np.testing.assert_array_equal(back.items, seqs.items)

    def test_ragged_rejected(self, tmp_path):
        p = write(tmp_path, "s.jsonl", "[0, 1]\n[1, 2, 3]\n")
        with pytest.raises(DataError):
            data.read_sequences(p)

    def test_vocab_round_trip(self, tmp_path):
        v = data.Vocabulary(["a", "b"])
        data.write_vocab(tmp_path / "v.json", v)
        assert data.read_vocab(tmp_path / "v.json").items == ["a", "b"]

    def test_vocab_rejects_pad_lookup(self):
        with pytest.raises(KeyError):
            data.Vocabulary(["a"]).decode(0)


class TestMarkovScene:
    def test_deterministic(self):
        a = data.markov_scene(n_users=5, n_items=10, length=6, order=2, seed=3)
        b = data.markov_scene(n_users=5, n_items=10, length=6, order=2, seed=3)
        assert a.records == b.records

    def test_order_one_is_a_function_of_previous_item(self):
        log = data.markov_scene(n_users=30, n_items=12, length=10, seed=1)
        succ: dict = {}
        for items in log.by_user().values():
            for x, y in zip(items, items[1:]):
                assert succ.setdefault(x, y) == y

    def test_bad_order(self):
        with pytest.raises(ValueError):
            data.markov_scene(order=0)
