import numpy as np
import pytest

from ranking_eval import SynthConfig, generate_synthetic
from ugc_dataset import Dataset, split_leave_one_out


class TableScorer:
    """Scores read from a fixed users x items table."""

    def __init__(self, table: np.ndarray):
        self.table = np.asarray(table, dtype=np.float64)

    def score_block(self, users):
        return self.table[users]


def random_corpus(rng: np.random.Generator, n_users: int, n_items: int, density: float = 0.3) -> Dataset:
    mask = rng.random((n_users, n_items)) < density
    users, items = np.nonzero(mask)
    return Dataset.from_pairs(
        [f"u{u}" for u in range(n_users)],
        [f"i{i}" for i in range(n_items)],
        users,
        items,
        rng.integers(0, n_users, size=n_items),
    )


@pytest.fixture
def small_corpus():
    """60 users x 180 items, every user also a producer."""
    dataset = generate_synthetic(SynthConfig(n_users=60, n_items_per_producer=3, k_true=4, mean_actions=10.0, seed=7))
    return dataset, split_leave_one_out(dataset, seed=7)
