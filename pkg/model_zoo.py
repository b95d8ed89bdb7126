# Model zoo
# Parameter stores and score predictors for CPRec and its baselines
# (PopRec, BPR-MF, FM with a one-hot producer feature, reduced Vista).
#
# Every model answers the same scoring contract:
#   score(u, i)           one score
#   score_items(u, items) score(u, items[k]) for every k
#   score_block(users)    users x all items, for evaluation
# and trainable models also provide backward(), the partials of
# sum_k upstream[k] * score(users[k], items[k]) w.r.t. each tensor.

import json
import logging
import os

import numpy as np

from errors import DimensionMismatch

logger = logging.getLogger(__name__)

INIT_SCALE = 0.1
CHECKPOINT_MANIFEST = "checkpoint.json"
CHECKPOINT_BLOCKS = "checkpoint.bin"


def _dot_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b).sum(axis=1)


def _project(vectors: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Row-wise matrix @ vector, computed per element so results do not depend on batch size."""
    return (vectors[:, None, :] * matrix[None, :, :]).sum(axis=2)


class Recommender:
    """Base class: a named set of tensors plus the item -> producer map."""

    kind = ""
    fields: tuple = ()
    bias_fields: frozenset = frozenset()
    trainable = True

    def __init__(self, tensors: dict, producer_of: np.ndarray, n_users: int):
        missing = [name for name in self.fields if name not in tensors]
        if missing:
            raise ValueError(f"{self.kind}: missing tensors {missing}")
        self.tensors = {name: tensors[name] for name in self.fields}
        self.producer_of = np.asarray(producer_of, dtype=np.int64)
        self.n_users = int(n_users)

    @property
    def n_items(self) -> int:
        return len(self.producer_of)

    @property
    def k(self) -> int:
        for name in self.fields:
            if self.tensors[name].ndim == 2:
                return self.tensors[name].shape[1]
        return 0

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "Recommender":
        return type(self)({k: v.copy() for k, v in self.tensors.items()}, self.producer_of, self.n_users)

    # -- scoring contract -------------------------------------------------
    def score_pairs(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def score_block(self, users: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def score(self, u: int, i: int) -> float:
        return float(self.score_pairs(np.array([u]), np.array([i]))[0])

    def score_items(self, u: int, items) -> np.ndarray:
        items = np.asarray(items, dtype=np.int64)
        return self.score_pairs(np.full(len(items), u, dtype=np.int64), items)

    # -- training hooks ---------------------------------------------------
    def backward(self, users: np.ndarray, items: np.ndarray, upstream: np.ndarray) -> dict:
        raise NotImplementedError(f"{self.kind} is not trained by gradient descent")

    def regularized_rows(self, users: np.ndarray, items: np.ndarray) -> dict:
        """Rows of each non-bias tensor touched by (users, items); None means the whole tensor."""
        raise NotImplementedError

    def _zeros(self) -> dict:
        return {name: np.zeros_like(t) for name, t in self.tensors.items()}


# ----------------------------------------------------
# PopRec
# ----------------------------------------------------
class PopRec(Recommender):
    """Ranks items by their training-split interaction count, for every user alike."""

    kind = "poprec"
    fields = ("popularity",)
    trainable = False

    @classmethod
    def fit(cls, train: tuple, producer_of: np.ndarray, n_users: int) -> "PopRec":
        n_items = len(producer_of)
        flat = np.concatenate(train) if len(train) else np.empty(0, dtype=np.int64)
        counts = np.bincount(flat.astype(np.int64), minlength=n_items).astype(np.float64)
        return cls({"popularity": counts}, producer_of, n_users)

    def score_pairs(self, users, items):
        return self.tensors["popularity"][items].astype(np.float64)

    def score_block(self, users):
        return np.tile(self.tensors["popularity"], (len(users), 1))


# ----------------------------------------------------
# BPR-MF
# ----------------------------------------------------
class BprMf(Recommender):
    """Biased MF: beta_i + <gamma_u, gamma_i>."""

    kind = "bpr"
    fields = ("user_emb", "item_emb", "item_bias")
    bias_fields = frozenset({"item_bias"})

    def score_pairs(self, users, items):
        t = self.tensors
        return t["item_bias"][items] + _dot_rows(t["user_emb"][users], t["item_emb"][items])

    def score_block(self, users):
        t = self.tensors
        return t["item_bias"][None, :] + t["user_emb"][users] @ t["item_emb"].T

    def backward(self, users, items, upstream):
        t, g = self.tensors, self._zeros()
        w = upstream[:, None]
        np.add.at(g["item_bias"], items, upstream)
        np.add.at(g["user_emb"], users, w * t["item_emb"][items])
        np.add.at(g["item_emb"], items, w * t["user_emb"][users])
        return g

    def regularized_rows(self, users, items):
        return {"user_emb": users, "item_emb": items}


# ----------------------------------------------------
# FM with one-hot producer feature
# ----------------------------------------------------
class FactorizationMachine(Recommender):
    """
    Second-order FM over (user, item, producer-of-item):
    beta_u + beta_i + beta_p + <g1_u, g_i> + <g1_u, g2_p> + <g_i, g2_p>.
    beta_u is kept for fidelity; it never changes a user's ranking.
    """

    kind = "fm"
    fields = ("user_emb", "item_emb", "producer_emb", "item_bias", "producer_bias", "user_bias")
    bias_fields = frozenset({"item_bias", "producer_bias", "user_bias"})

    def score_pairs(self, users, items):
        t = self.tensors
        p = self.producer_of[items]
        gu, gi, gp = t["user_emb"][users], t["item_emb"][items], t["producer_emb"][p]
        return (
            t["user_bias"][users] + t["item_bias"][items] + t["producer_bias"][p]
            + _dot_rows(gu, gi) + _dot_rows(gu, gp) + _dot_rows(gi, gp)
        )

    def score_block(self, users):
        t = self.tensors
        gp = t["producer_emb"][self.producer_of]
        item_side = t["item_bias"] + t["producer_bias"][self.producer_of] + _dot_rows(t["item_emb"], gp)
        return (
            t["user_bias"][users][:, None] + item_side[None, :]
            + t["user_emb"][users] @ (t["item_emb"] + gp).T
        )

    def backward(self, users, items, upstream):
        t, g = self.tensors, self._zeros()
        p = self.producer_of[items]
        gu, gi, gp = t["user_emb"][users], t["item_emb"][items], t["producer_emb"][p]
        w = upstream[:, None]
        np.add.at(g["user_bias"], users, upstream)
        np.add.at(g["item_bias"], items, upstream)
        np.add.at(g["producer_bias"], p, upstream)
        np.add.at(g["user_emb"], users, w * (gi + gp))
        np.add.at(g["item_emb"], items, w * (gu + gp))
        np.add.at(g["producer_emb"], p, w * (gu + gi))
        return g

    def regularized_rows(self, users, items):
        return {"user_emb": users, "item_emb": items, "producer_emb": self.producer_of[items]}


# ----------------------------------------------------
# Vista (ownership only)
# ----------------------------------------------------
class Vista(Recommender):
    """
    beta_i + <g1_u, g_i> + <g2_u, g2_p>, one g2 table shared by consumer and
    producer sides, so the user-user term is symmetric. beta_i is an addition
    to the published reduced form, for parity with the other models.
    """

    kind = "vista"
    fields = ("user_emb1", "user_emb2", "item_emb", "item_bias")
    bias_fields = frozenset({"item_bias"})

    def score_pairs(self, users, items):
        t = self.tensors
        p = self.producer_of[items]
        return (
            t["item_bias"][items]
            + _dot_rows(t["user_emb1"][users], t["item_emb"][items])
            + _dot_rows(t["user_emb2"][users], t["user_emb2"][p])
        )

    def score_block(self, users):
        t = self.tensors
        return (
            t["item_bias"][None, :]
            + t["user_emb1"][users] @ t["item_emb"].T
            + t["user_emb2"][users] @ t["user_emb2"][self.producer_of].T
        )

    def backward(self, users, items, upstream):
        t, g = self.tensors, self._zeros()
        p = self.producer_of[items]
        w = upstream[:, None]
        np.add.at(g["item_bias"], items, upstream)
        np.add.at(g["user_emb1"], users, w * t["item_emb"][items])
        np.add.at(g["item_emb"], items, w * t["user_emb1"][users])
        np.add.at(g["user_emb2"], users, w * t["user_emb2"][p])
        np.add.at(g["user_emb2"], p, w * t["user_emb2"][users])
        return g

    def regularized_rows(self, users, items):
        return {
            "user_emb1": users,
            "user_emb2": np.concatenate([users, self.producer_of[items]]),
            "item_emb": items,
        }


# ----------------------------------------------------
# CPRec
# ----------------------------------------------------
class CPRec(Recommender):
    """
    One core embedding per user, projected into a consumer role (W_c) and a
    producer role (W_p):
        beta_i + <W_c g_u, g_i> + <W_c g_u, W_p g_{p_i}>
    """

    kind = "cprec"
    fields = ("core_emb", "item_emb", "item_bias", "w_c", "w_p")
    bias_fields = frozenset({"item_bias"})

    def role_embeddings(self, u: int) -> tuple:
        """(consumer vector, producer vector) of user u."""
        core = self.tensors["core_emb"][u]
        return (self.tensors["w_c"] * core).sum(axis=1), (self.tensors["w_p"] * core).sum(axis=1)

    def score_pairs(self, users, items):
        t = self.tensors
        consumer = _project(t["core_emb"][users], t["w_c"])
        producer = _project(t["core_emb"][self.producer_of[items]], t["w_p"])
        return (
            t["item_bias"][items]
            + _dot_rows(consumer, t["item_emb"][items])
            + _dot_rows(consumer, producer)
        )

    def score_block(self, users):
        t = self.tensors
        consumer = t["core_emb"][users] @ t["w_c"].T
        item_side = t["item_emb"] + t["core_emb"][self.producer_of] @ t["w_p"].T
        return t["item_bias"][None, :] + consumer @ item_side.T

    def backward(self, users, items, upstream):
        t, g = self.tensors, self._zeros()
        p = self.producer_of[items]
        core_u, core_p = t["core_emb"][users], t["core_emb"][p]
        consumer = _project(core_u, t["w_c"])
        producer = _project(core_p, t["w_p"])
        w = upstream[:, None]

        np.add.at(g["item_bias"], items, upstream)
        np.add.at(g["item_emb"], items, w * consumer)

        # consumer role feeds both the item term and the appreciation term
        d_consumer = w * (t["item_emb"][items] + producer)
        g["w_c"] += d_consumer.T @ core_u
        np.add.at(g["core_emb"], users, d_consumer @ t["w_c"])

        d_producer = w * consumer
        g["w_p"] += d_producer.T @ core_p
        np.add.at(g["core_emb"], p, d_producer @ t["w_p"])
        return g

    def regularized_rows(self, users, items):
        return {
            "core_emb": np.concatenate([users, self.producer_of[items]]),
            "item_emb": items,
            "w_c": None,
            "w_p": None,
        }


MODELS = {cls.kind: cls for cls in (PopRec, BprMf, FactorizationMachine, Vista, CPRec)}
MODEL_KINDS = tuple(MODELS)


def check_kind(kind: str) -> None:
    if kind not in MODELS:
        raise ValueError(f"unknown model {kind!r}, try one of {', '.join(MODEL_KINDS)}")


def _shapes(kind: str, n_users: int, n_items: int, k: int) -> dict:
    return {
        "poprec": {"popularity": (n_items,)},
        "bpr": {"user_emb": (n_users, k), "item_emb": (n_items, k), "item_bias": (n_items,)},
        "fm": {
            "user_emb": (n_users, k), "item_emb": (n_items, k), "producer_emb": (n_users, k),
            "item_bias": (n_items,), "producer_bias": (n_users,), "user_bias": (n_users,),
        },
        "vista": {
            "user_emb1": (n_users, k), "user_emb2": (n_users, k),
            "item_emb": (n_items, k), "item_bias": (n_items,),
        },
        "cprec": {
            "core_emb": (n_users, k), "item_emb": (n_items, k), "item_bias": (n_items,),
            "w_c": (k, k), "w_p": (k, k),
        },
    }[kind]


def init_params(kind: str, n_users: int, n_items: int, k: int, seed: int, producer_of,
                projection_init: str = "identity", projection_noise: float = INIT_SCALE,
                dtype=np.float64) -> Recommender:
    """
    Embeddings ~ Normal(0, 0.1^2), biases zero; W_c, W_p = I + Normal(0, noise^2)
    (exactly I when noise is 0), or pure Normal(0, 0.1^2) with projection_init="noise".
    Draws happen in declared field order, so a seed fixes every tensor.
    """
    check_kind(kind)
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if projection_init not in ("identity", "noise"):
        raise ValueError(f"projection_init must be 'identity' or 'noise', got {projection_init!r}")

    cls = MODELS[kind]
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _shapes(kind, n_users, n_items, k).items():
        if name in ("w_c", "w_p"):
            if projection_init == "noise":
                value = rng.normal(0.0, INIT_SCALE, shape)
            elif projection_noise > 0:
                value = np.eye(k) + rng.normal(0.0, projection_noise, shape)
            else:
                value = np.eye(k)
        elif len(shape) == 2:
            value = rng.normal(0.0, INIT_SCALE, shape)
        else:
            value = np.zeros(shape)
        tensors[name] = value.astype(dtype)
    return cls(tensors, producer_of, n_users)


# ----------------------------------------------------
# Checkpoints
# ----------------------------------------------------
def save_checkpoint(out_dir: str, model: Recommender, seed: int) -> list:
    """JSON manifest plus little-endian float64 blocks, one per tensor in declared order."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "model": model.kind,
        "k": model.k,
        "n_users": model.n_users,
        "n_items": model.n_items,
        "seed": seed,
        "dtype": "<f8",
        "tensors": [{"name": name, "shape": list(model.tensors[name].shape)} for name in model.fields],
    }
    manifest_path = os.path.join(out_dir, CHECKPOINT_MANIFEST)
    with open(manifest_path, "w", encoding="utf-8") as file:
        json.dump(manifest, file, indent=2)
        file.write("\n")
    blocks_path = os.path.join(out_dir, CHECKPOINT_BLOCKS)
    with open(blocks_path, "wb") as file:
        for name in model.fields:
            file.write(np.ascontiguousarray(model.tensors[name], dtype="<f8").tobytes())
    return [manifest_path, blocks_path]


def load_checkpoint(ckpt_dir: str, producer_of, n_users: int) -> Recommender:
    with open(os.path.join(ckpt_dir, CHECKPOINT_MANIFEST), "r", encoding="utf-8") as file:
        manifest = json.load(file)
    kind = manifest["model"]
    check_kind(kind)
    if manifest["n_users"] != n_users or manifest["n_items"] != len(producer_of):
        raise DimensionMismatch(
            f"checkpoint is {manifest['n_users']} users x {manifest['n_items']} items, "
            f"data is {n_users} x {len(producer_of)}"
        )

    with open(os.path.join(ckpt_dir, CHECKPOINT_BLOCKS), "rb") as file:
        raw = file.read()
    counts = [int(np.prod(entry["shape"], dtype=np.int64)) for entry in manifest["tensors"]]
    if 8 * sum(counts) != len(raw):
        raise DimensionMismatch(f"checkpoint blocks hold {len(raw)} bytes, manifest declares {8 * sum(counts)}")
    tensors, offset = {}, 0
    for entry, count in zip(manifest["tensors"], counts):
        block = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        tensors[entry["name"]] = block.reshape(entry["shape"]).astype(np.float64)
        offset += 8 * count
    logger.info("loaded %s checkpoint (K=%d) from %s", kind, manifest["k"], ckpt_dir)
    return MODELS[kind](tensors, producer_of, n_users)
