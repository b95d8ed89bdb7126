# BPR trainer
# Samples (user, positive, negative) triples, evaluates the BPR loss and its
# analytic gradients for any trainable model, and runs Adam with early
# stopping on validation AUC.

import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd
from scipy.special import expit, log_expit
from tqdm import tqdm

from errors import CPRecError, ConfigError, NonFiniteLoss, SamplerStarved
from model_zoo import PopRec, Recommender, check_kind, init_params
from ranking_eval import evaluate_auc

logger = logging.getLogger(__name__)

REJECTION_LIMIT = 100
DEFAULT_LAMBDA_GRID = (0.001, 0.01, 0.1, 1.0)
ENV_PREFIX = "CPREC_"


# ----------------------------------------------------
# Configuration
# ----------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    k: int = 20
    lambda_: float = 0.01
    learning_rate: float = 0.01
    batch_size: int = 10000
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.k < 1:
            problems.append("k must be >= 1")
        if self.lambda_ < 0:
            problems.append("lambda must be >= 0")
        if self.learning_rate <= 0:
            problems.append("learning_rate must be > 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.max_epochs < 0:
            problems.append("max_epochs must be >= 0")
        if self.patience < 1:
            problems.append("patience must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    @staticmethod
    def key(f: dataclasses.Field) -> str:
        """Config-file / env key of a field: lowercase name without trailing underscore."""
        return f.name.rstrip("_")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string-or-typed values keyed by config key (unknown keys rejected)."""
        by_key = {cls.key(f): f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(by_key))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            f = by_key[key]
            kind = int if f.type in (int, "int") else float
            try:
                kwargs[f.name] = kind(raw)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from e
        return cls(**kwargs)

    @classmethod
    def resolve(cls, config_path: Optional[str] = None, environ: Optional[dict] = None,
                overrides: Optional[dict] = None) -> "TrainConfig":
        """defaults < config file < CPREC_* environment < explicit overrides (CLI flags)."""
        values = {}
        if config_path:
            values.update(read_config_file(config_path))
        environ = os.environ if environ is None else environ
        for f in dataclasses.fields(cls):
            env_value = environ.get(ENV_PREFIX + cls.key(f).upper())
            if env_value is not None:
                values[cls.key(f)] = env_value
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(values)

    def as_dict(self) -> dict:
        return {self.key(f): getattr(self, f.name) for f in dataclasses.fields(self)}


def read_config_file(path: str) -> dict:
    """Flat `key = value` lines; `#` starts a comment."""
    values = {}
    with open(path, "r", encoding="utf-8") as file:
        for line_no, line in enumerate(file, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ConfigError(f"{path}:{line_no}: expected key = value")
            values[key.strip().lower()] = value.strip()
    return values


# ----------------------------------------------------
# Triple sampling
# ----------------------------------------------------
class TripleBatch(NamedTuple):
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray


class TripleSampler:
    """
    u uniform over users with training positives, i uniform over u's training
    positives, j uniform over items outside u's full positive set (rejection).
    """

    def __init__(self, train: tuple, positives: tuple, n_items: int):
        self.n_items = n_items
        counts = np.array([len(t) for t in train], dtype=np.int64)
        self.eligible = np.flatnonzero(counts > 0)
        self.train_counts = counts
        self.train_start = np.concatenate([[0], np.cumsum(counts)[:-1]]) if len(counts) else counts
        self.train_flat = np.concatenate(train).astype(np.int64) if len(train) else counts
        users = np.repeat(np.arange(len(positives), dtype=np.int64), [len(p) for p in positives])
        items = np.concatenate(positives).astype(np.int64) if len(positives) else users
        self.observed_keys = np.sort(users * n_items + items)

    def is_observed(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        if len(self.observed_keys) == 0:
            return np.zeros(len(users), dtype=bool)
        keys = users * self.n_items + items
        at = np.minimum(np.searchsorted(self.observed_keys, keys), len(self.observed_keys) - 1)
        return self.observed_keys[at] == keys

    def sample(self, n: int, rng: np.random.Generator) -> TripleBatch:
        if len(self.eligible) == 0:
            raise ValueError("no user has training positives")
        users = self.eligible[rng.integers(len(self.eligible), size=n)]
        pos = self.train_flat[self.train_start[users] + rng.integers(self.train_counts[users])]
        neg = rng.integers(self.n_items, size=n)
        bad = np.flatnonzero(self.is_observed(users, neg))
        attempts = 1
        while len(bad):
            if attempts >= REJECTION_LIMIT:
                raise SamplerStarved(int(users[bad[0]]), attempts)
            neg[bad] = rng.integers(self.n_items, size=len(bad))
            bad = bad[self.is_observed(users[bad], neg[bad])]
            attempts += 1
        return TripleBatch(users, pos, neg)


def sample_triples(split, positives: tuple, n_items: int, n: int,
                   rng: np.random.Generator) -> TripleBatch:
    return TripleSampler(split.train, positives, n_items).sample(n, rng)


# ----------------------------------------------------
# Loss and gradients
# ----------------------------------------------------
def _touched_rows(model: Recommender, batch: TripleBatch) -> dict:
    items = np.concatenate([batch.pos, batch.neg])
    rows = model.regularized_rows(batch.users, items)
    return {name: (None if r is None else np.unique(r)) for name, r in rows.items()}


def _objective(model: Recommender, batch: TripleBatch, lam: float, with_grad: bool) -> tuple:
    size = len(batch.users)
    if size == 0:
        raise ValueError("empty batch")
    x = model.score_pairs(batch.users, batch.pos) - model.score_pairs(batch.users, batch.neg)
    touched = _touched_rows(model, batch)

    penalty = 0.0
    for name, rows in touched.items():
        theta = model.tensors[name] if rows is None else model.tensors[name][rows]
        penalty += float(np.sum(theta * theta))
    loss = (float(-np.sum(log_expit(x))) + lam * penalty) / size
    if not with_grad:
        return loss, None

    # d/dx of -ln sigma(x) is -sigma(-x)
    coeff = -expit(-x) / size
    grads = model.backward(batch.users, batch.pos, coeff)
    for name, g in model.backward(batch.users, batch.neg, -coeff).items():
        grads[name] += g
    scale = 2.0 * lam / size
    for name, rows in touched.items():
        if rows is None:
            grads[name] += scale * model.tensors[name]
        else:
            grads[name][rows] += scale * model.tensors[name][rows]
    return loss, grads


def bpr_loss(model: Recommender, batch: TripleBatch, lam: float) -> float:
    """Mean over the batch of -ln sigma(x_ui - x_uj), plus lam * ||touched non-bias params||^2 / batch."""
    return _objective(model, batch, lam, with_grad=False)[0]


def bpr_gradients(model: Recommender, batch: TripleBatch, lam: float) -> dict:
    """Dense gradients of bpr_loss per tensor; untouched rows stay zero."""
    return _objective(model, batch, lam, with_grad=True)[1]


# ----------------------------------------------------
# Adam
# ----------------------------------------------------
@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_tensors(cls, tensors: dict, **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in tensors.items()},
            v={k: np.zeros_like(v) for k, v in tensors.items()},
            **hyper,
        )


def adam_step(tensors: dict, grads: dict, state: AdamState, learning_rate: float) -> tuple:
    """One bias-corrected Adam update, in place; returns (tensors, state)."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        if g.shape != tensors[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {tensors[name].shape}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        tensors[name] -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return tensors, state


# ----------------------------------------------------
# Training loop
# ----------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_auc: float
    seconds: float


@dataclass
class TrainReport:
    model: str
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")

    def write_csv(self, path: str) -> None:
        table = pd.DataFrame([dataclasses.astuple(r) for r in self.epochs],
                             columns=[f.name for f in dataclasses.fields(EpochRecord)])
        table.to_csv(path, index=False, na_rep="nan", lineterminator="\n", encoding="utf-8")


def train(dataset, split, kind: str, config: TrainConfig, threads: int = 1,
          progress: bool = False) -> tuple:
    """
    Adam on the BPR objective; one epoch = as many sampled triples as training
    actions. Returns the parameters of the best validation epoch.
    """
    check_kind(kind)
    report = TrainReport(kind)

    if kind == "poprec":
        model = PopRec.fit(split.train, dataset.producer_of, dataset.n_users)
        report.best_val_auc = evaluate_auc(model, split, dataset, target="val", threads=threads).auc_all
        return model, report

    model = init_params(kind, dataset.n_users, dataset.n_items, config.k, config.seed, dataset.producer_of)
    if config.max_epochs == 0:
        return model, report

    sampler = TripleSampler(split.train, dataset.positives, dataset.n_items)
    rng = np.random.default_rng([config.seed, 1])
    n_actions = split.n_train_actions
    batch_size = min(config.batch_size, n_actions)
    n_batches = math.ceil(n_actions / batch_size)
    if batch_size < config.batch_size:
        logger.info("batch size scaled down to %d (%d training actions)", batch_size, n_actions)

    state = AdamState.for_tensors(model.tensors)
    best, best_score, stale = model.copy(), -math.inf, 0
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        losses = []
        for _ in tqdm(range(n_batches), desc=f"{kind} epoch {epoch}", leave=False, disable=not progress):
            batch = sampler.sample(batch_size, rng)
            loss, grads = _objective(model, batch, config.lambda_, with_grad=True)
            losses.append(loss)
            adam_step(model.tensors, grads, state, config.learning_rate)
        mean_loss = math.fsum(losses) / len(losses)
        if not math.isfinite(mean_loss):
            raise NonFiniteLoss(epoch, mean_loss)

        val_auc = evaluate_auc(model, split, dataset, target="val", threads=threads).auc_all
        seconds = time.perf_counter() - start
        report.epochs.append(EpochRecord(epoch, mean_loss, val_auc, seconds))
        logger.info("%s epoch %d: loss=%.6f val_auc=%.6f (%.2fs)", kind, epoch, mean_loss, val_auc, seconds)

        score = val_auc if math.isfinite(val_auc) else -math.inf
        if report.best_epoch < 0 or score > best_score:
            best, best_score, stale = model.copy(), score, 0
            report.best_epoch, report.best_val_auc = epoch, val_auc
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("%s: early stop at epoch %d (best %d)", kind, epoch, report.best_epoch)
                break
    return best, report


# ----------------------------------------------------
# Grid search over the regularizer
# ----------------------------------------------------
@dataclass
class GridResult:
    best_lambda: Optional[float]
    best_model: Optional[Recommender]
    reports: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)


def grid_search(dataset, split, kind: str, base_config: TrainConfig, lambda_grid,
                threads: int = 1, tie_tolerance: float = 1e-9) -> GridResult:
    """Train once per lambda, keep the best validation AUC; near-ties go to the larger lambda."""
    lambda_grid = list(lambda_grid)
    if not lambda_grid:
        raise ValueError("lambda grid is empty")

    result = GridResult(None, None)
    best_score = -math.inf
    for lam in lambda_grid:
        try:
            model, report = train(dataset, split, kind, dataclasses.replace(base_config, lambda_=lam), threads)
        except CPRecError as e:
            logger.warning("%s lambda=%r failed: %s", kind, lam, e)
            result.failures[lam] = str(e)
            continue
        result.reports[lam] = report
        score = report.best_val_auc if math.isfinite(report.best_val_auc) else -math.inf
        if result.best_lambda is None or score > best_score + tie_tolerance:
            take = True
        else:
            take = abs(score - best_score) <= tie_tolerance and lam > result.best_lambda
        if take:
            result.best_lambda, result.best_model, best_score = lam, model, score
    return result
