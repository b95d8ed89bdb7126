"""Ingestion, filtering, leave-one-out splitting and corpus statistics."""

from collections import Counter

import numpy as np
import pytest

from errors import EmptyAfterFilter, MalformedRecord, MissingProducer
from ugc_dataset import (
    NO_ITEM,
    corpus_stats,
    filter_inactive,
    format_stats_table,
    ingest,
    load_prepared,
    read_interactions,
    read_producers,
    role_partition,
    save_prepared,
    split_leave_one_out,
)


def _toy():
    interactions = [("alice", "x"), ("bob", "y"), ("alice", "y")]
    producers = [("x", "carol"), ("y", "alice")]
    return ingest(interactions, producers)


def _random_events(seed: int, n_users: int = 30, n_items: int = 20, n_events: int = 200):
    rng = np.random.default_rng(seed)
    events = [(f"u{rng.integers(n_users)}", f"i{rng.integers(n_items)}") for _ in range(n_events)]
    producers = [(f"i{i}", f"u{rng.integers(n_users)}") for i in range(n_items)]
    return events, producers


def _pairs(d):
    return {(d.user_tokens[u], d.item_tokens[i]) for u, pos in enumerate(d.positives) for i in pos}


def _repeat_until_stable(events, min_actions):
    kept = set(events)
    while True:
        users = Counter(u for u, _ in kept)
        survivors = {(u, i) for u, i in kept if users[u] >= min_actions}
        items = Counter(i for _, i in survivors)
        survivors = {(u, i) for u, i in survivors if items[i] >= min_actions}
        if survivors == kept:
            return kept
        kept = survivors


class TestIngest:

    def test_first_seen_ids(self):
        d = _toy()
        assert d.user_tokens == ("alice", "bob", "carol")
        assert d.item_tokens == ("x", "y")
        np.testing.assert_array_equal(d.producer_of, [2, 0])
        np.testing.assert_array_equal(d.positives[0], [0, 1])
        np.testing.assert_array_equal(d.positives[1], [1])
        assert len(d.positives[2]) == 0

    def test_shared_item(self):
        d = ingest([("a", "x"), ("b", "x"), ("a", "y")], [("x", "b"), ("y", "a")])
        assert (d.n_users, d.n_items) == (2, 2)
        np.testing.assert_array_equal(d.positives[d.user_index["a"]], [0, 1])
        np.testing.assert_array_equal(d.positives[d.user_index["b"]], [0])
        assert d.producer_of[d.item_index["x"]] == d.user_index["b"]
        assert d.producer_of[d.item_index["y"]] == d.user_index["a"]

    def test_empty_stream(self):
        d = ingest([], [])
        assert (d.n_users, d.n_items, d.n_actions) == (0, 0, 0)

    def test_duplicates_collapse(self):
        d = ingest([("a", "x"), ("a", "x"), ("a", "x")], [("x", "a")])
        assert d.n_actions == 1

    def test_missing_producer(self):
        with pytest.raises(MissingProducer) as exc:
            ingest([("a", "x"), ("a", "y")], [("x", "a")])
        assert exc.value.item_token == "y"
        assert exc.value.exit_code == 2

    def test_conflicting_producer(self):
        with pytest.raises(MalformedRecord):
            ingest([("a", "x")], [("x", "a"), ("x", "b")])

    def test_empty_token(self):
        with pytest.raises(MalformedRecord):
            ingest([("a", "")], [("x", "a")])

    @pytest.mark.parametrize("user", [" ", "\t ", "  "])
    def test_blank_token(self, user):
        with pytest.raises(MalformedRecord):
            ingest([(user, "x"), ("a", "y")], [("x", "a"), ("y", user)])

    def test_token_id_round_trip(self):
        d = ingest([("b", "x"), ("a", "y"), ("c", "x")], [("x", "d"), ("y", "a")])
        for tok in ("a", "b", "c", "d"):
            assert d.user_tokens[d.user_index[tok]] == tok
        for tok in ("x", "y"):
            assert d.item_tokens[d.item_index[tok]] == tok
        assert [d.user_index[t] for t in d.user_tokens] == list(range(d.n_users))

    def test_arrays_are_read_only(self):
        d = _toy()
        with pytest.raises(ValueError):
            d.producer_of[0] = 1


class TestReadFiles:

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "interactions.tsv"
        path.write_text("u1\ti1\n\nu2\ti2\textra\n", encoding="utf-8")
        rows = read_interactions(str(path))
        assert [(r.user_token, r.item_token) for r in rows] == [("u1", "i1"), ("u2", "i2")]

    def test_malformed_line_number(self, tmp_path):
        path = tmp_path / "interactions.tsv"
        path.write_text("u1\ti1\nonly_one_column\n", encoding="utf-8")
        with pytest.raises(MalformedRecord) as exc:
            read_interactions(str(path))
        assert exc.value.line_no == 2

    def test_undecodable_bytes(self, tmp_path):
        path = tmp_path / "producers.tsv"
        path.write_bytes(b"i1\tu1\n\xff\xfe\tu2\n")
        with pytest.raises(MalformedRecord):
            read_producers(str(path))

    def test_blank_token_on_a_line(self, tmp_path):
        path = tmp_path / "interactions.tsv"
        path.write_text("u1\ti1\n  \ti2\n", encoding="utf-8")
        with pytest.raises(MalformedRecord) as exc:
            read_interactions(str(path))
        assert exc.value.line_no == 2

    def test_tokens_read_literally(self, tmp_path):
        path = tmp_path / "interactions.tsv"
        path.write_text('"u1"\t007\nNA\tnull\n', encoding="utf-8")
        rows = read_interactions(str(path))
        assert [(r.user_token, r.item_token) for r in rows] == [('"u1"', "007"), ("NA", "null")]


class TestFilterInactive:

    def test_producers_of_kept_items_survive(self):
        interactions = [("u0", "a"), ("u0", "b"), ("u0", "c"), ("u1", "a"), ("u1", "b"), ("u2", "a")]
        producers = [("a", "u2"), ("b", "u3"), ("c", "u0")]
        d = filter_inactive(ingest(interactions, producers), min_actions=2)

        assert d.user_tokens == ("u0", "u1", "u2", "u3")
        assert d.item_tokens == ("a", "b")
        assert d.n_actions == 4
        assert len(d.positives[2]) == 0
        np.testing.assert_array_equal(d.producer_of, [2, 3])

    def test_single_pass_versus_fixpoint(self):
        interactions = [("u0", "a"), ("u0", "b"), ("u1", "a"), ("u1", "c"), ("u2", "b"), ("u2", "d")]
        producers = [(i, "p") for i in "abcd"]
        d = ingest(interactions, producers)

        once = filter_inactive(d, min_actions=2)
        assert once.n_actions == 4
        assert once.item_tokens == ("a", "b")
        with pytest.raises(EmptyAfterFilter):
            filter_inactive(d, min_actions=2, iterate_to_fixpoint=True)

    def test_fixpoint_meets_threshold(self, small_corpus):
        dataset, _ = small_corpus
        try:
            d = filter_inactive(dataset, min_actions=4, iterate_to_fixpoint=True)
        except EmptyAfterFilter:
            pytest.skip("corpus too sparse for this threshold")
        users, items = d.interaction_arrays()
        user_counts = np.bincount(users, minlength=d.n_users)
        assert np.all(user_counts[user_counts > 0] >= 4)
        assert np.all(np.bincount(items, minlength=d.n_items) >= 4)

    def test_everything_filtered(self):
        with pytest.raises(EmptyAfterFilter):
            filter_inactive(_toy(), min_actions=100)

    def test_active_user_on_singleton_items(self):
        d = ingest([("a", f"i{n}") for n in range(12)], [(f"i{n}", "a") for n in range(12)])
        with pytest.raises(EmptyAfterFilter):
            filter_inactive(d, min_actions=10)

    @pytest.mark.parametrize("seed", range(15))
    @pytest.mark.parametrize("min_actions", [2, 3])
    def test_fixpoint_matches_repeated_filtering(self, seed, min_actions):
        events, producers = _random_events(seed)
        expected = _repeat_until_stable(events, min_actions)
        d = ingest(events, producers)
        if not expected:
            with pytest.raises(EmptyAfterFilter):
                filter_inactive(d, min_actions, iterate_to_fixpoint=True)
            return
        filtered = filter_inactive(d, min_actions, iterate_to_fixpoint=True)
        assert _pairs(filtered) == expected

        again = filter_inactive(filtered, min_actions, iterate_to_fixpoint=True)
        assert _pairs(again) == expected
        assert again.user_tokens == filtered.user_tokens
        assert again.item_tokens == filtered.item_tokens

    def test_threshold_one_is_identity(self, small_corpus):
        dataset, _ = small_corpus
        d = filter_inactive(dataset, min_actions=1)
        consumed = np.unique(np.concatenate(dataset.positives))
        assert d.n_actions == dataset.n_actions
        assert d.item_tokens == tuple(dataset.item_tokens[i] for i in consumed)


class TestRoles:

    def test_partition(self):
        roles = role_partition(_toy())
        assert roles.consumers == {0, 1}
        assert roles.producers == {0, 2}
        assert roles.prosumers == {0}

    def test_disjoint_roles(self):
        stats = corpus_stats(ingest([("a", "x")], [("x", "b")]))
        assert stats.prosumer_ratio == 0.0
        assert stats.consumer_ratio == stats.producer_ratio == 0.5

    def test_ratios(self):
        stats = corpus_stats(_toy())
        assert stats.consumer_ratio == pytest.approx(2 / 3)
        assert stats.producer_ratio == pytest.approx(2 / 3)
        assert stats.prosumer_ratio == pytest.approx(1 / 3)

    def test_follow_ratio(self):
        # alice reads two items by carol, bob reads one by dave
        d = ingest([("alice", "x"), ("alice", "y"), ("bob", "z")], [("x", "carol"), ("y", "carol"), ("z", "dave")])
        stats = corpus_stats(d)
        np.testing.assert_array_equal(stats.distinct_producers, [1, 1])
        np.testing.assert_array_equal(stats.items_consumed, [2, 1])
        assert stats.mean_follow_ratio == pytest.approx(0.75)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_set_oracle(self, seed):
        rng = np.random.default_rng(seed)
        events, producers = _random_events(seed, n_users=int(rng.integers(2, 50)),
                                           n_items=int(rng.integers(1, 40)), n_events=int(rng.integers(1, 150)))
        owner = dict(producers)
        consumed = {}
        for u, i in events:
            consumed.setdefault(u, set()).add(i)
        makers = {owner[i] for items in consumed.values() for i in items}
        everyone = set(consumed) | makers
        assert len(everyone) <= 100

        stats = corpus_stats(ingest(events, producers))
        assert stats.n_users == len(everyone)
        assert stats.n_actions == sum(len(items) for items in consumed.values())
        assert stats.consumer_ratio == len(consumed) / len(everyone)
        assert stats.producer_ratio == len(makers) / len(everyone)
        assert stats.prosumer_ratio == len(makers & set(consumed)) / len(everyone)
        follow = [len({owner[i] for i in items}) / len(items) for items in consumed.values()]
        assert stats.mean_follow_ratio == pytest.approx(np.mean(follow), abs=1e-12)

    def test_stats_table(self):
        table = format_stats_table(corpus_stats(_toy()), "toy")
        assert "toy" in table.splitlines()[0]
        assert "#users (|U|)" in table


class TestLeaveOneOut:

    def test_partition_of_positives(self, small_corpus):
        dataset, split = small_corpus
        for u, pos in enumerate(dataset.positives):
            if len(pos) < 3:
                assert split.val[u] == NO_ITEM and split.test[u] == NO_ITEM
                np.testing.assert_array_equal(split.train[u], pos)
                continue
            assert split.val[u] != split.test[u]
            assert split.val[u] not in split.train[u]
            assert split.test[u] not in split.train[u]
            rebuilt = np.sort(np.concatenate([split.train[u], [split.val[u], split.test[u]]]))
            np.testing.assert_array_equal(rebuilt, pos)

    def test_seeded(self, small_corpus):
        dataset, split = small_corpus
        again = split_leave_one_out(dataset, seed=7)
        np.testing.assert_array_equal(split.test, again.test)
        np.testing.assert_array_equal(split.val, again.val)
        other = split_leave_one_out(dataset, seed=8)
        assert not np.array_equal(split.test, other.test)

    def test_train_counts(self, small_corpus):
        _, split = small_corpus
        assert split.n_train_actions == sum(len(t) for t in split.train)


class TestPreparedFiles:

    def test_reload_preserves_ids(self, tmp_path, small_corpus):
        dataset, split = small_corpus
        written = save_prepared(str(tmp_path), dataset, split, {"min_actions": 1})
        assert len(written) == 6

        d2, s2 = load_prepared(str(tmp_path))
        assert d2.user_tokens == dataset.user_tokens
        assert d2.item_tokens == dataset.item_tokens
        np.testing.assert_array_equal(d2.producer_of, dataset.producer_of)
        for u in range(dataset.n_users):
            np.testing.assert_array_equal(d2.positives[u], dataset.positives[u])
            np.testing.assert_array_equal(s2.train[u], split.train[u])
        np.testing.assert_array_equal(s2.val, split.val)
        np.testing.assert_array_equal(s2.test, split.test)
        assert s2.seed == split.seed

    def test_awkward_tokens_round_trip(self, tmp_path):
        interactions = [('say "hi"', "007"), ("NA", "007"), ("NA", "a b"), ("x,y", "a b"), ('say "hi"', "1e5")]
        producers = [("007", "NA"), ("a b", 'say "hi"'), ("1e5", "null")]
        dataset = ingest(interactions, producers)
        split = split_leave_one_out(dataset, seed=0)
        save_prepared(str(tmp_path), dataset, split, {})

        d2, s2 = load_prepared(str(tmp_path))
        assert d2.user_tokens == dataset.user_tokens
        assert d2.item_tokens == dataset.item_tokens
        assert _pairs(d2) == _pairs(dataset)
        np.testing.assert_array_equal(d2.producer_of, dataset.producer_of)
        np.testing.assert_array_equal(s2.test, split.test)

    def test_empty_split_files(self, tmp_path):
        dataset = ingest([("a", "x")], [("x", "b")])
        split = split_leave_one_out(dataset, seed=0)
        save_prepared(str(tmp_path), dataset, split, {})
        assert (tmp_path / "test.tsv").read_text(encoding="utf-8") == ""
        d2, s2 = load_prepared(str(tmp_path))
        assert _pairs(d2) == {("a", "x")}
        assert np.all(s2.test == NO_ITEM)

    def test_unknown_user_in_split(self, tmp_path, small_corpus):
        dataset, split = small_corpus
        save_prepared(str(tmp_path), dataset, split, {})
        with open(tmp_path / "train.tsv", "a", encoding="utf-8") as file:
            file.write(f"ghost\t{dataset.item_tokens[0]}\n")
        with pytest.raises(MalformedRecord) as exc:
            load_prepared(str(tmp_path))
        assert "ghost" in str(exc.value)
        assert exc.value.exit_code == 2

    def test_unknown_producer(self, tmp_path, small_corpus):
        dataset, split = small_corpus
        save_prepared(str(tmp_path), dataset, split, {})
        (tmp_path / "users.txt").write_text("\n".join(dataset.user_tokens[1:]) + "\n", encoding="utf-8")
        with pytest.raises(MalformedRecord):
            load_prepared(str(tmp_path))
