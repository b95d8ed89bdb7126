# UGC dataset
# Reads raw consumption logs and producer attributions, filters inactive
# users/items, maps tokens to dense ids, splits leave-one-out and computes
# the corpus statistics (role ratios, followed-producer counts).

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import pandas as pd

from errors import EmptyAfterFilter, MalformedRecord, MissingProducer

logger = logging.getLogger(__name__)

NO_ITEM = -1

USERS_FILE = "users.txt"
ITEMS_FILE = "items.tsv"
SPLIT_FILES = {"train": "train.tsv", "val": "val.tsv", "test": "test.tsv"}
SPLIT_MANIFEST = "split_manifest.json"


class RawInteraction(NamedTuple):
    user_token: str
    item_token: str


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _group_positives(users: np.ndarray, items: np.ndarray, n_users: int, n_items: int) -> tuple:
    """Collapse (user, item) pairs into per-user sorted, duplicate-free item arrays."""
    keys = np.unique(users.astype(np.int64) * max(n_items, 1) + items.astype(np.int64))
    owners = keys // max(n_items, 1)
    bounds = np.searchsorted(owners, np.arange(n_users + 1))
    flat = keys % max(n_items, 1)
    return tuple(_frozen(flat[bounds[u]:bounds[u + 1]].copy()) for u in range(n_users))


# ----------------------------------------------------
# Dataset
# ----------------------------------------------------
@dataclass(frozen=True, eq=False)
class Dataset:
    """Id-mapped interaction store. Immutable once built; arrays are read-only."""

    user_tokens: tuple
    item_tokens: tuple
    positives: tuple  # per user: sorted int64 item ids
    producer_of: np.ndarray  # per item: user id

    @property
    def n_users(self) -> int:
        return len(self.user_tokens)

    @property
    def n_items(self) -> int:
        return len(self.item_tokens)

    @property
    def n_actions(self) -> int:
        return int(sum(len(p) for p in self.positives))

    @cached_property
    def user_index(self) -> dict:
        return {tok: uid for uid, tok in enumerate(self.user_tokens)}

    @cached_property
    def item_index(self) -> dict:
        return {tok: iid for iid, tok in enumerate(self.item_tokens)}

    def interaction_arrays(self) -> tuple:
        """Flattened (users, items) arrays in user-id, then item-id order."""
        lengths = np.array([len(p) for p in self.positives], dtype=np.int64)
        users = np.repeat(np.arange(self.n_users, dtype=np.int64), lengths)
        items = np.concatenate(self.positives) if self.positives else np.empty(0, dtype=np.int64)
        return users, items.astype(np.int64)

    @classmethod
    def from_pairs(cls, user_tokens, item_tokens, users, items, producer_of) -> "Dataset":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        positives = _group_positives(users, items, len(user_tokens), len(item_tokens))
        return cls(
            user_tokens=tuple(user_tokens),
            item_tokens=tuple(item_tokens),
            positives=positives,
            producer_of=_frozen(np.asarray(producer_of, dtype=np.int64).copy()),
        )


def _check_tokens(line_no: int, user: str, item: str) -> None:
    if not user.strip() or not item.strip():
        raise MalformedRecord(line_no, f"{user}\t{item}", "empty or blank token")


def ingest(interactions: Iterable, producer_map: Iterable) -> Dataset:
    """
    Build a Dataset from (user_token, item_token) events and (item_token, user_token)
    producer attributions. Ids follow first-seen order: interaction users, then
    producers not seen as consumers (in item-id order).
    """
    user_index: dict = {}
    item_index: dict = {}
    users, items = [], []
    for line_no, (user, item) in enumerate(interactions, 1):
        _check_tokens(line_no, user, item)
        users.append(user_index.setdefault(user, len(user_index)))
        items.append(item_index.setdefault(item, len(item_index)))

    producers: dict = {}
    for line_no, (item, user) in enumerate(producer_map, 1):
        _check_tokens(line_no, user, item)
        if producers.setdefault(item, user) != user:
            raise MalformedRecord(line_no, f"{item}\t{user}", f"conflicting producer for {item!r}")

    producer_of = np.empty(len(item_index), dtype=np.int64)
    for item, iid in item_index.items():
        if item not in producers:
            raise MissingProducer(item)
        producer_of[iid] = user_index.setdefault(producers[item], len(user_index))

    return Dataset.from_pairs(list(user_index), list(item_index), users, items, producer_of)


# ----------------------------------------------------
# Filtering
# ----------------------------------------------------
def filter_inactive(d: Dataset, min_actions: int = 10, iterate_to_fixpoint: bool = False) -> Dataset:
    """
    Drop users with fewer than min_actions positives, then items with fewer than
    min_actions interactions (single pass, or repeated until stable).
    Producers of surviving items stay as users even without positives.
    """
    if min_actions < 1:
        raise ValueError(f"min_actions must be >= 1, got {min_actions}")

    users, items = d.interaction_arrays()
    keep = np.ones(len(users), dtype=bool)
    rounds = 0
    while True:
        rounds += 1
        user_counts = np.bincount(users[keep], minlength=d.n_users)
        weak_users = keep & (user_counts[users] < min_actions)
        keep &= ~weak_users
        item_counts = np.bincount(items[keep], minlength=d.n_items)
        weak_items = keep & (item_counts[items] < min_actions)
        keep &= ~weak_items
        if not iterate_to_fixpoint or not (weak_users.any() or weak_items.any()):
            break

    users, items = users[keep], items[keep]
    if len(items) == 0:
        raise EmptyAfterFilter(min_actions)

    kept_items = np.unique(items)
    kept_users = np.union1d(np.unique(users), d.producer_of[kept_items])
    new_user = np.full(d.n_users, -1, dtype=np.int64)
    new_user[kept_users] = np.arange(len(kept_users))
    new_item = np.full(d.n_items, -1, dtype=np.int64)
    new_item[kept_items] = np.arange(len(kept_items))

    logger.info(
        "filter(min_actions=%d, fixpoint=%s): %d rounds, users %d -> %d, items %d -> %d, actions %d -> %d",
        min_actions, iterate_to_fixpoint, rounds, d.n_users, len(kept_users),
        d.n_items, len(kept_items), d.n_actions, len(items),
    )
    return Dataset.from_pairs(
        [d.user_tokens[u] for u in kept_users],
        [d.item_tokens[i] for i in kept_items],
        new_user[users],
        new_item[items],
        new_user[d.producer_of[kept_items]],
    )


# ----------------------------------------------------
# Roles
# ----------------------------------------------------
@dataclass(frozen=True)
class RolePartition:
    consumers: frozenset
    producers: frozenset
    prosumers: frozenset


def role_partition(d: Dataset) -> RolePartition:
    consumers = frozenset(u for u, pos in enumerate(d.positives) if len(pos))
    producers = frozenset(int(p) for p in np.unique(d.producer_of))
    return RolePartition(consumers, producers, consumers & producers)


# ----------------------------------------------------
# Leave-one-out split
# ----------------------------------------------------
@dataclass(frozen=True, eq=False)
class Split:
    """Per-user train items plus at most one validation and one test item (NO_ITEM when absent)."""

    train: tuple
    val: np.ndarray
    test: np.ndarray
    seed: int

    @cached_property
    def train_counts(self) -> np.ndarray:
        return np.array([len(t) for t in self.train], dtype=np.int64)

    @property
    def n_train_actions(self) -> int:
        return int(self.train_counts.sum())


def split_leave_one_out(d: Dataset, seed: int) -> Split:
    """Withhold one random positive for validation and one for test, for users with >= 3 positives."""
    rng = np.random.default_rng(seed)
    train = []
    val = np.full(d.n_users, NO_ITEM, dtype=np.int64)
    test = np.full(d.n_users, NO_ITEM, dtype=np.int64)
    for u, pos in enumerate(d.positives):
        if len(pos) < 3:
            train.append(pos)
            continue
        picks = rng.choice(len(pos), size=2, replace=False)
        val[u], test[u] = pos[picks[0]], pos[picks[1]]
        train.append(_frozen(np.delete(pos, picks)))
    return Split(tuple(train), _frozen(val), _frozen(test), seed)


# ----------------------------------------------------
# Statistics
# ----------------------------------------------------
@dataclass(frozen=True, eq=False)
class CorpusStats:
    n_users: int
    n_items: int
    n_actions: int
    consumer_ratio: float
    producer_ratio: float
    prosumer_ratio: float
    # one entry per consumer
    follow_users: np.ndarray = field(repr=False)
    distinct_producers: np.ndarray = field(repr=False)
    items_consumed: np.ndarray = field(repr=False)

    @property
    def mean_follow_ratio(self) -> float:
        if len(self.items_consumed) == 0:
            return float("nan")
        return float(np.mean(self.distinct_producers / self.items_consumed))


def follow_counts(positives: Sequence, producer_of: np.ndarray) -> tuple:
    """Per consumer: (user ids, distinct producers consumed, items consumed)."""
    users = np.array([u for u, pos in enumerate(positives) if len(pos)], dtype=np.int64)
    distinct = np.array([len(np.unique(producer_of[positives[u]])) for u in users], dtype=np.int64)
    consumed = np.array([len(positives[u]) for u in users], dtype=np.int64)
    return users, distinct, consumed


def corpus_stats(d: Dataset) -> CorpusStats:
    roles = role_partition(d)
    n = d.n_users

    def ratio(group) -> float:
        return len(group) / n if n else 0.0

    users, distinct, consumed = follow_counts(d.positives, d.producer_of)
    return CorpusStats(
        n_users=n,
        n_items=d.n_items,
        n_actions=d.n_actions,
        consumer_ratio=ratio(roles.consumers),
        producer_ratio=ratio(roles.producers),
        prosumer_ratio=ratio(roles.prosumers),
        follow_users=users,
        distinct_producers=distinct,
        items_consumed=consumed,
    )


def format_stats_table(stats: CorpusStats, name: str = "dataset") -> str:
    rows = [
        ("#users (|U|)", f"{stats.n_users:,}"),
        ("#items (|I|)", f"{stats.n_items:,}"),
        ("#actions", f"{stats.n_actions:,}"),
        ("consumer ratio (|C|/|U|)", repr(stats.consumer_ratio)),
        ("producer ratio (|P|/|U|)", repr(stats.producer_ratio)),
        ("prosumer ratio (|PS|/|U|)", repr(stats.prosumer_ratio)),
        ("mean followed-producer ratio", repr(stats.mean_follow_ratio)),
    ]
    width = max(len(label) for label, _ in rows)
    lines = [f"{'':<{width}}  {name}"]
    lines += [f"{label:<{width}}  {value}" for label, value in rows]
    return "\n".join(lines)


# ----------------------------------------------------
# File formats
# ----------------------------------------------------
# Raw logs are taken literally; prepared files escape quotes and backslashes
# so every token survives a save/load cycle.
RAW_DIALECT = {"sep": "\t", "quoting": csv.QUOTE_NONE}
PREPARED_DIALECT = {"sep": "\t", "quoting": csv.QUOTE_NONE, "escapechar": "\\"}


def _read_tsv(path: str, columns: list, dialect: dict) -> pd.DataFrame:
    """Leading tab-separated columns as strings, indexed by 1-based line number."""
    try:
        frame = pd.read_csv(
            path,
            header=None,
            usecols=list(range(len(columns))),
            dtype=str,
            na_filter=False,
            skip_blank_lines=False,
            encoding="utf-8",
            **dialect,
        )
    except pd.errors.EmptyDataError:
        return pd.DataFrame({c: pd.Series(dtype=object) for c in columns})
    except UnicodeDecodeError as e:
        raise MalformedRecord(0, "<undecodable bytes>", f"not UTF-8 ({e.reason})") from e
    except ValueError as e:
        # usecols beyond the first line's width, or a tokenizer failure
        raise MalformedRecord(1, os.path.basename(path), str(e).strip()) from e
    frame.columns = columns
    frame.index = pd.RangeIndex(1, len(frame) + 1, name="line_no")
    return frame.fillna("")


def _read_pairs(path: str, dialect: dict = RAW_DIALECT) -> pd.DataFrame:
    frame = _read_tsv(path, ["left", "right"], dialect)
    blank_left = frame["left"].str.strip() == ""
    blank_right = frame["right"].str.strip() == ""
    bad = blank_left ^ blank_right
    if bad.any():
        line_no = int(bad.idxmax())
        raise MalformedRecord(line_no, "\t".join(frame.loc[line_no]).strip("\t"))
    return frame[~blank_left]


def read_interactions(path: str) -> list:
    """`user_token<TAB>item_token` per line; trailing columns ignored."""
    frame = _read_pairs(path)
    return [RawInteraction(u, i) for u, i in zip(frame["left"], frame["right"])]


def read_producers(path: str) -> list:
    """`item_token<TAB>user_token` per line."""
    frame = _read_pairs(path)
    return list(zip(frame["left"], frame["right"]))


def write_tsv(path: str, frame: pd.DataFrame, dialect: dict = PREPARED_DIALECT) -> None:
    frame.to_csv(path, header=False, index=False, encoding="utf-8", lineterminator="\n", **dialect)


def _split_pairs(split: Split, part: str, n_users: int) -> tuple:
    if part == "train":
        users = np.repeat(np.arange(n_users, dtype=np.int64),
                          np.array([len(t) for t in split.train], dtype=np.int64))
        items = np.concatenate([np.asarray(t, dtype=np.int64) for t in split.train] + [np.empty(0, np.int64)])
        return users, items
    held = getattr(split, part)
    users = np.flatnonzero(held != NO_ITEM)
    return users, held[users]


def save_prepared(out_dir: str, d: Dataset, split: Split, settings: dict) -> list:
    """Write the filtered dataset and its split; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    user_tokens = np.asarray(d.user_tokens, dtype=object)
    item_tokens = np.asarray(d.item_tokens, dtype=object)
    written = []

    path = os.path.join(out_dir, USERS_FILE)
    write_tsv(path, pd.DataFrame({"user": user_tokens}))
    written.append(path)

    path = os.path.join(out_dir, ITEMS_FILE)
    write_tsv(path, pd.DataFrame({"item": item_tokens, "producer": user_tokens[d.producer_of]}))
    written.append(path)

    for part, filename in SPLIT_FILES.items():
        users, items = _split_pairs(split, part, d.n_users)
        path = os.path.join(out_dir, filename)
        write_tsv(path, pd.DataFrame({"user": user_tokens[users], "item": item_tokens[items]}))
        written.append(path)

    path = os.path.join(out_dir, SPLIT_MANIFEST)
    with open(path, "w", encoding="utf-8") as file:
        json.dump({"seed": split.seed, **settings}, file, indent=2, sort_keys=True)
        file.write("\n")
    written.append(path)
    return written


def _vocabulary(tokens: pd.Series, filename: str) -> pd.Index:
    index = pd.Index(tokens)
    if not index.is_unique:
        dup = tokens[tokens.duplicated()]
        raise MalformedRecord(int(dup.index[0]), dup.iloc[0], f"duplicate token in {filename}")
    return index


def _lookup(vocab: pd.Index, tokens: pd.Series, filename: str) -> np.ndarray:
    ids = vocab.get_indexer(tokens)
    unknown = np.flatnonzero(ids < 0)
    if len(unknown):
        first = unknown[0]
        raise MalformedRecord(int(tokens.index[first]), tokens.iloc[first], f"unknown token in {filename}")
    return ids.astype(np.int64)


def load_prepared(data_dir: str) -> tuple:
    """Reload (Dataset, Split) written by save_prepared with identical ids."""
    users_file = _read_tsv(os.path.join(data_dir, USERS_FILE), ["user"], PREPARED_DIALECT)["user"]
    user_vocab = _vocabulary(users_file, USERS_FILE)

    items_file = _read_pairs(os.path.join(data_dir, ITEMS_FILE), PREPARED_DIALECT)
    item_vocab = _vocabulary(items_file["left"], ITEMS_FILE)
    producer_of = _lookup(user_vocab, items_file["right"], ITEMS_FILE)

    parts = {}
    for part, filename in SPLIT_FILES.items():
        pairs = _read_pairs(os.path.join(data_dir, filename), PREPARED_DIALECT)
        parts[part] = (_lookup(user_vocab, pairs["left"], filename), _lookup(item_vocab, pairs["right"], filename))

    user_tokens, item_tokens = list(user_vocab), list(item_vocab)
    users = np.concatenate([parts[p][0] for p in SPLIT_FILES])
    items = np.concatenate([parts[p][1] for p in SPLIT_FILES])
    dataset = Dataset.from_pairs(user_tokens, item_tokens, users, items, producer_of)

    n_users = len(user_tokens)
    train = _group_positives(parts["train"][0], parts["train"][1], n_users, len(item_tokens))
    held = {}
    for part in ("val", "test"):
        arr = np.full(n_users, NO_ITEM, dtype=np.int64)
        arr[parts[part][0]] = parts[part][1]
        held[part] = _frozen(arr)

    try:
        with open(os.path.join(data_dir, SPLIT_MANIFEST), "r", encoding="utf-8") as file:
            seed = int(json.load(file)["seed"])
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedRecord(0, SPLIT_MANIFEST, f"no usable split seed ({e})") from e
    return dataset, Split(train, held["val"], held["test"], seed)
