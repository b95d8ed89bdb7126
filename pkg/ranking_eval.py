# Ranking evaluation
# Per-user AUC of the held-out item against every unobserved item (exact) or
# a uniform sample of them, macro-averaged over all users and over cold users.
# Also hosts the K sweep and the synthetic UGC corpus generator used to check
# the models at desk scale.

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import CPRecError, EmptyCandidateSet
from ugc_dataset import NO_ITEM, Dataset, follow_counts, write_tsv

logger = logging.getLogger(__name__)

COLD_THRESHOLD = 5
CHUNK_USERS = 256


# ----------------------------------------------------
# AUC
# ----------------------------------------------------
@dataclass
class EvalReport:
    auc_all: float
    auc_cold: float
    n_eval_users: int
    n_cold_users: int
    n_skipped: int
    mode: str
    target: str = "test"
    users: np.ndarray = field(default=None, repr=False)
    per_user_auc: np.ndarray = field(default=None, repr=False)
    cold: np.ndarray = field(default=None, repr=False)

    def write(self, path: str) -> None:
        table = pd.DataFrame({
            "slice": ["all", "cold"],
            "auc": [self.auc_all, self.auc_cold],
            "n_users": [self.n_eval_users, self.n_cold_users],
        })
        with open(path, "w", encoding="utf-8", newline="") as file:
            file.write(f"# target={self.target} mode={self.mode} skipped={self.n_skipped}\n")
            table.to_csv(file, index=False, na_rep="nan", lineterminator="\n")

    def write_per_user(self, path: str, user_tokens) -> None:
        tokens = np.asarray(user_tokens, dtype=object)
        write_tsv(path, pd.DataFrame({
            "user": tokens[self.users],
            "auc": self.per_user_auc,
            "cold": self.cold.astype(np.int64),
        }))


def _mean(values) -> float:
    return math.fsum(values) / len(values) if len(values) else float("nan")


def evaluate_auc(model, split, dataset: Dataset, cold_threshold: int = COLD_THRESHOLD,
                 mode: str = "exact", n_negatives: int = 100, target: str = "test",
                 tie_value: float = 0.0, seed: int = 0, threads: int = 1) -> EvalReport:
    """
    Per user u with a held-out item t: fraction of unobserved items j
    (outside train, val and test) with score(u, t) > score(u, j). Ties count
    tie_value (0 by default: the indicator is strict). Users without a held-out
    item are skipped. Cold users have fewer than cold_threshold train items.
    """
    if mode not in ("exact", "sampled"):
        raise ValueError(f"mode must be 'exact' or 'sampled', got {mode!r}")
    if target not in ("test", "val"):
        raise ValueError(f"target must be 'test' or 'val', got {target!r}")

    held = split.test if target == "test" else split.val
    users = np.flatnonzero(held != NO_ITEM)
    consumers = sum(1 for pos in dataset.positives if len(pos))
    skipped = consumers - len(users)
    if skipped and target == "test":
        logger.warning("%d consumers have no %s item and are skipped", skipped, target)

    def chunk_aucs(chunk: np.ndarray) -> list:
        scores = model.score_block(chunk)
        out = []
        for row, u in zip(scores, chunk):
            candidates = np.ones(dataset.n_items, dtype=bool)
            candidates[dataset.positives[u]] = False
            if mode == "exact":
                others = row[candidates]
            else:
                rng = np.random.default_rng([seed, int(u)])
                ids = np.flatnonzero(candidates)
                others = row[rng.choice(ids, size=min(n_negatives, len(ids)), replace=False)]
            if len(others) == 0:
                raise EmptyCandidateSet(int(u))
            mine = row[held[u]]
            wins = np.count_nonzero(others < mine) + tie_value * np.count_nonzero(others == mine)
            out.append(wins / len(others))
        return out

    chunks = [users[s:s + CHUNK_USERS] for s in range(0, len(users), CHUNK_USERS)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(chunk_aucs, chunks))
    else:
        parts = [chunk_aucs(c) for c in chunks]
    aucs = np.array([a for part in parts for a in part], dtype=np.float64)

    cold = split.train_counts[users] < cold_threshold
    return EvalReport(
        auc_all=_mean(aucs),
        auc_cold=_mean(aucs[cold]),
        n_eval_users=len(users),
        n_cold_users=int(cold.sum()),
        n_skipped=skipped,
        mode="exact" if mode == "exact" else f"sampled({n_negatives})",
        target=target,
        users=users,
        per_user_auc=aucs,
        cold=cold,
    )


# ----------------------------------------------------
# K sweep
# ----------------------------------------------------
@dataclass
class SweepRow:
    model: str
    k: int
    auc_all: float
    auc_cold: float
    lambda_: float = float("nan")
    status: str = "ok"


def k_sweep(dataset: Dataset, split, kinds, k_list, base_config, lambda_grid=None,
            cold_threshold: int = COLD_THRESHOLD, threads: int = 1) -> list:
    """
    Train and test every (model, K) cell with shared seeds. With a lambda grid,
    each cell first picks its regularizer on validation AUC.
    """
    from bpr_trainer import grid_search, train

    k_list = list(k_list)
    if not k_list:
        raise ValueError("K list is empty")

    rows = []
    for kind in kinds:
        for k in k_list:
            config = dataclasses.replace(base_config, k=k)
            try:
                if lambda_grid:
                    result = grid_search(dataset, split, kind, config, lambda_grid, threads=threads)
                    if result.best_model is None:
                        raise CPRecError("; ".join(f"lambda={lam!r}: {msg}" for lam, msg in result.failures.items()))
                    model, lam = result.best_model, result.best_lambda
                else:
                    model, _ = train(dataset, split, kind, config, threads=threads)
                    lam = config.lambda_
                report = evaluate_auc(model, split, dataset, cold_threshold, threads=threads)
            except CPRecError as e:
                logger.warning("sweep cell %s K=%d failed: %s", kind, k, e)
                rows.append(SweepRow(kind, k, float("nan"), float("nan"), status=f"failed: {e}"))
                continue
            logger.info("sweep %s K=%d: auc_all=%.6f auc_cold=%.6f", kind, k, report.auc_all, report.auc_cold)
            rows.append(SweepRow(kind, k, report.auc_all, report.auc_cold, lam))
    return rows


def write_sweep_table(rows, path: str) -> None:
    table = pd.DataFrame(
        [(r.model, r.k, r.auc_all, r.auc_cold, r.lambda_, r.status) for r in rows],
        columns=["model", "K", "auc_all", "auc_cold", "lambda", "status"],
    )
    table.to_csv(path, index=False, na_rep="nan", lineterminator="\n", encoding="utf-8")


# ----------------------------------------------------
# Synthetic UGC corpus
# ----------------------------------------------------
@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 2000
    n_items_per_producer: int = 10
    k_true: int = 8
    appreciation_weight: float = 0.7
    noise: float = 0.1
    seed: int = 0
    mean_actions: float = 30.0
    temperature: float = 1.0

    def __post_init__(self):
        if min(self.n_users, self.n_items_per_producer, self.k_true) < 1:
            raise ValueError("n_users, n_items_per_producer and k_true must be positive")
        if not 0.0 <= self.appreciation_weight <= 1.0:
            raise ValueError(f"appreciation_weight must lie in [0, 1], got {self.appreciation_weight}")
        if self.noise < 0 or self.mean_actions <= 0 or self.temperature <= 0:
            raise ValueError("noise must be >= 0; mean_actions and temperature must be > 0")


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """
    Every user owns n_items_per_producer items. Users carry a taste vector (as
    consumers) and a style vector (as producers); items carry their own vector.
    User u consumes Poisson(mean_actions) distinct items drawn without
    replacement from softmax((1-w)<taste_u, item_i> + w<taste_u, style_{p_i}> + noise),
    via Gumbel top-k.
    """
    rng = np.random.default_rng(cfg.seed)
    n_users, k = cfg.n_users, cfg.k_true
    n_items = n_users * cfg.n_items_per_producer
    producer_of = np.repeat(np.arange(n_users, dtype=np.int64), cfg.n_items_per_producer)

    taste = rng.normal(0.0, 1.0, (n_users, k))
    style = rng.normal(0.0, 1.0, (n_users, k))
    item_vecs = rng.normal(0.0, 1.0, (n_items, k))
    style_of_item = style[producer_of]
    counts = np.minimum(rng.poisson(cfg.mean_actions, n_users), n_items)

    w = cfg.appreciation_weight
    users, items = [], []
    for u in range(n_users):
        n = int(counts[u])
        if n == 0:
            continue
        logits = (1.0 - w) * (item_vecs @ taste[u]) + w * (style_of_item @ taste[u])
        logits = (logits + cfg.noise * rng.standard_normal(n_items)) / cfg.temperature
        keys = logits + rng.gumbel(size=n_items)
        chosen = np.argpartition(-keys, n - 1)[:n]
        users.append(np.full(n, u, dtype=np.int64))
        items.append(chosen.astype(np.int64))

    users = np.concatenate(users) if users else np.empty(0, dtype=np.int64)
    items = np.concatenate(items) if items else np.empty(0, dtype=np.int64)
    return Dataset.from_pairs(
        [f"u{u}" for u in range(n_users)],
        [f"i{i}" for i in range(n_items)],
        users,
        items,
        producer_of,
    )


def follow_ratio_null(d: Dataset, seed: int = 0) -> float:
    """Mean distinct-producers/items ratio after shuffling the item -> producer map."""
    shuffled = np.random.default_rng(seed).permutation(d.producer_of)
    _, distinct, consumed = follow_counts(d.positives, shuffled)
    return float(np.mean(distinct / consumed)) if len(consumed) else float("nan")


def write_raw(d: Dataset, interactions_path: str, producers_path: str) -> None:
    """Emit the raw tab-separated formats that ingest() reads back."""
    tokens = np.asarray(d.user_tokens, dtype=object)
    items = np.asarray(d.item_tokens, dtype=object)
    users, consumed = d.interaction_arrays()
    write_tsv(interactions_path, pd.DataFrame({"user": tokens[users], "item": items[consumed]}))
    write_tsv(producers_path, pd.DataFrame({"item": items, "producer": tokens[d.producer_of]}))
