# CPRec command line
# Wires ingestion, training, evaluation, sweeps, statistics and synthetic
# corpora into reproducible runs. Every command leaves a manifest with the
# digests of what it read and wrote, so a run can be replayed and checked.
#
#   python cprec_cli.py synth   --out data/raw
#   python cprec_cli.py prepare --interactions data/raw/interactions.tsv --producers data/raw/producers.tsv --out data/prep
#   python cprec_cli.py train   --data data/prep --model cprec --out runs/cprec
#   python cprec_cli.py eval    --data data/prep --checkpoint runs/cprec --out runs/cprec

import argparse
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import sys
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
import pandas as pd

from bpr_trainer import DEFAULT_LAMBDA_GRID, TrainConfig, train
from errors import ConfigError, CPRecError, NotReproducible
from model_zoo import MODEL_KINDS, load_checkpoint, save_checkpoint
from ranking_eval import (
    COLD_THRESHOLD,
    SynthConfig,
    evaluate_auc,
    follow_ratio_null,
    generate_synthetic,
    k_sweep,
    write_raw,
    write_sweep_table,
)
from ugc_dataset import (
    ITEMS_FILE,
    SPLIT_FILES,
    SPLIT_MANIFEST,
    USERS_FILE,
    corpus_stats,
    filter_inactive,
    format_stats_table,
    ingest,
    load_prepared,
    read_interactions,
    read_producers,
    save_prepared,
    split_leave_one_out,
)

__version__ = "0.1.0"

logger = logging.getLogger("cprec")

DATA_FILES = (USERS_FILE, ITEMS_FILE, *SPLIT_FILES.values(), SPLIT_MANIFEST)
DEFAULT_KS = (10, 20, 30, 40)


# ----------------------------------------------------
# Spinner
# ----------------------------------------------------
def _spinner(msg: str, stop_event: threading.Event):
    """Small terminal spinner that runs until stop_event is set."""
    for ch in itertools.cycle("|/-\\"):
        if stop_event.is_set():
            break
        sys.stdout.write(f"\r{msg}...{ch}")
        sys.stdout.flush()
        time.sleep(0.12)

    # Clear the line after done
    sys.stdout.write("\r" + " " * (len(msg) + 8) + "\r")
    sys.stdout.flush()


@contextmanager
def spinning(msg: str):
    """Show the spinner around a blocking step, only on an interactive terminal."""
    if not sys.stdout.isatty():
        yield
        return
    stop_event = threading.Event()
    t = threading.Thread(target=_spinner, args=(msg, stop_event), daemon=True)
    t.start()
    try:
        yield
    finally:
        stop_event.set()
        t.join()


# ----------------------------------------------------
# Run manifests
# ----------------------------------------------------
def file_digest(path: str) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as file:
        for block in iter(lambda: file.read(1 << 20), b""):
            sha.update(block)
    return sha.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    args: dict
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    volatile: list = field(default_factory=list)
    tool_version: str = __version__
    started: str = field(default_factory=_now)
    finished: str = ""

    @property
    def filename(self) -> str:
        return f"{self.command}_manifest.json"

    def record_inputs(self, paths) -> None:
        for path in paths:
            self.inputs[os.path.abspath(path)] = file_digest(path)

    def record_outputs(self, out_dir: str, paths) -> None:
        for path in paths:
            name = os.path.relpath(path, out_dir)
            if name not in self.volatile:
                self.outputs[name] = file_digest(path)

    def write(self, out_dir: str) -> str:
        self.finished = _now()
        path = os.path.join(out_dir, self.filename)
        with open(path, "w", encoding="utf-8") as file:
            json.dump(dataclasses.asdict(self), file, indent=2, sort_keys=True)
            file.write("\n")
        return path

    @classmethod
    def read(cls, path: str) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as file:
            return cls(**json.load(file))


def _recorded_args(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _data_paths(data_dir: str) -> list:
    return [os.path.join(data_dir, name) for name in DATA_FILES]


def _seed(args) -> int:
    return args.seed if args.seed is not None else int(os.getenv("CPREC_SEED", "0"))


# ----------------------------------------------------
# prepare
# ----------------------------------------------------
def cmd_prepare(args) -> int:
    seed = _seed(args)
    manifest = RunManifest("prepare", _recorded_args(args), seeds={"split": seed})
    manifest.record_inputs([args.interactions, args.producers])

    with spinning("Reading interaction logs"):
        dataset = ingest(read_interactions(args.interactions), read_producers(args.producers))
    logger.info("ingested %d users, %d items, %d actions", dataset.n_users, dataset.n_items, dataset.n_actions)

    dataset = filter_inactive(dataset, args.min_actions, args.fixpoint)
    split = split_leave_one_out(dataset, seed)
    settings = {"min_actions": args.min_actions, "iterate_to_fixpoint": args.fixpoint}
    manifest.config = settings
    written = save_prepared(args.out, dataset, split, settings)

    stats = corpus_stats(dataset)
    print(format_stats_table(stats, os.path.basename(os.path.normpath(args.out))))
    manifest.record_outputs(args.out, written)
    manifest.write(args.out)
    return 0


# ----------------------------------------------------
# train
# ----------------------------------------------------
def _train_config(args) -> TrainConfig:
    overrides = {
        "k": getattr(args, "k", None),
        "lambda": args.lam,
        "learning_rate": args.lr,
        "batch_size": args.batch,
        "max_epochs": args.epochs,
        "patience": args.patience,
        "seed": args.seed,
    }
    return TrainConfig.resolve(args.config, overrides=overrides)


def cmd_train(args) -> int:
    config = _train_config(args)
    manifest = RunManifest("train", _recorded_args(args), config=config.as_dict(),
                           seeds={"init": config.seed}, volatile=["report.csv"])
    manifest.record_inputs(_data_paths(args.data) + ([args.config] if args.config else []))

    dataset, split = load_prepared(args.data)
    model, report = train(dataset, split, args.model, config, threads=args.threads, progress=args.progress)

    os.makedirs(args.out, exist_ok=True)
    written = save_checkpoint(args.out, model, config.seed)
    report_path = os.path.join(args.out, "report.csv")
    report.write_csv(report_path)
    written.append(report_path)
    logger.info("%s: best epoch %d, val AUC %r", args.model, report.best_epoch, report.best_val_auc)

    manifest.record_outputs(args.out, written)
    manifest.write(args.out)
    return 0


# ----------------------------------------------------
# eval
# ----------------------------------------------------
def cmd_eval(args) -> int:
    seed = _seed(args)
    manifest = RunManifest("eval", _recorded_args(args), seeds={"negatives": seed},
                           config={"cold_threshold": args.cold_threshold, "mode": args.mode,
                                   "negatives": args.negatives, "ties": args.ties})
    ckpt_files = [os.path.join(args.checkpoint, n) for n in ("checkpoint.json", "checkpoint.bin")]
    manifest.record_inputs(_data_paths(args.data) + ckpt_files)

    dataset, split = load_prepared(args.data)
    model = load_checkpoint(args.checkpoint, dataset.producer_of, dataset.n_users)
    with spinning(f"Evaluating {model.kind}"):
        report = evaluate_auc(model, split, dataset, args.cold_threshold, args.mode, args.negatives,
                              tie_value=args.ties, seed=seed, threads=args.threads)

    os.makedirs(args.out, exist_ok=True)
    written = [os.path.join(args.out, "eval.txt")]
    report.write(written[0])
    if args.per_user:
        written.append(os.path.join(args.out, "per_user_auc.tsv"))
        report.write_per_user(written[-1], dataset.user_tokens)

    print(f"{model.kind}: AUC all users {report.auc_all!r} ({report.n_eval_users}), "
          f"cold users {report.auc_cold!r} ({report.n_cold_users})")
    manifest.record_outputs(args.out, written)
    manifest.write(args.out)
    return 0


# ----------------------------------------------------
# sweep
# ----------------------------------------------------
def _csv_list(text: str, kind) -> list:
    try:
        return [kind(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"bad list {text!r}: {e}") from e


def cmd_sweep(args) -> int:
    models = _csv_list(args.models, str)
    unknown = [m for m in models if m not in MODEL_KINDS]
    if unknown:
        raise ConfigError(f"unknown models: {', '.join(unknown)}")
    ks = _csv_list(args.ks, int)
    if not ks or min(ks) < 1:
        raise ConfigError(f"K list must hold positive integers, got {args.ks!r}")
    lambdas = _csv_list(args.lambdas, float)
    config = _train_config(args)
    manifest = RunManifest("sweep", _recorded_args(args), config=config.as_dict(), seeds={"init": config.seed})
    manifest.record_inputs(_data_paths(args.data))

    dataset, split = load_prepared(args.data)
    rows = k_sweep(dataset, split, models, ks, config, lambdas, args.cold_threshold, threads=args.threads)

    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "sweep.csv")
    write_sweep_table(rows, path)
    for r in rows:
        print(f"{r.model:>7} K={r.k:<3} all={r.auc_all!r} cold={r.auc_cold!r} {r.status}")
    manifest.record_outputs(args.out, [path])
    manifest.write(args.out)
    return 0


# ----------------------------------------------------
# stats
# ----------------------------------------------------
def cmd_stats(args) -> int:
    manifest = RunManifest("stats", _recorded_args(args))
    manifest.record_inputs(_data_paths(args.data))
    dataset, _ = load_prepared(args.data)
    stats = corpus_stats(dataset)

    os.makedirs(args.out, exist_ok=True)
    table = format_stats_table(stats, os.path.basename(os.path.normpath(args.data)))
    summary_path = os.path.join(args.out, "stats.txt")
    with open(summary_path, "w", encoding="utf-8") as file:
        file.write(table + "\n")

    scatter_path = os.path.join(args.out, "follow_scatter.csv")
    scatter = pd.DataFrame({
        "user": np.asarray(dataset.user_tokens, dtype=object)[stats.follow_users],
        "distinct_producers": np.asarray(stats.distinct_producers, dtype=np.int64),
        "items_consumed": np.asarray(stats.items_consumed, dtype=np.int64),
    })
    scatter.to_csv(scatter_path, index=False, lineterminator="\n", encoding="utf-8")

    print(table)
    manifest.record_outputs(args.out, [summary_path, scatter_path])
    manifest.write(args.out)
    return 0


# ----------------------------------------------------
# synth
# ----------------------------------------------------
def cmd_synth(args) -> int:
    try:
        cfg = SynthConfig(
            n_users=args.users,
            n_items_per_producer=args.items_per_producer,
            k_true=args.k_true,
            appreciation_weight=args.weight,
            noise=args.noise,
            seed=_seed(args),
            mean_actions=args.mean_actions,
            temperature=args.temperature,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    manifest = RunManifest("synth", _recorded_args(args), config=dataclasses.asdict(cfg), seeds={"synth": cfg.seed})
    dataset = generate_synthetic(cfg)

    os.makedirs(args.out, exist_ok=True)
    paths = [os.path.join(args.out, "interactions.tsv"), os.path.join(args.out, "producers.tsv")]
    write_raw(dataset, *paths)

    stats = corpus_stats(dataset)
    print(format_stats_table(stats, "synthetic"))
    print(f"followed-producer ratio {stats.mean_follow_ratio!r} "
          f"(shuffled producers: {follow_ratio_null(dataset, cfg.seed)!r})")
    manifest.record_outputs(args.out, paths)
    manifest.write(args.out)
    return 0


# ----------------------------------------------------
# replay
# ----------------------------------------------------
COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "stats": cmd_stats,
    "synth": cmd_synth,
}


def cmd_replay(args) -> int:
    """Re-run a recorded command into a fresh directory and compare digests."""
    recorded = RunManifest.read(args.manifest)
    changed = [p for p, digest in recorded.inputs.items()
               if not os.path.exists(p) or file_digest(p) != digest]
    if changed:
        raise NotReproducible(f"inputs changed since the run: {', '.join(changed)}")

    out_dir = args.out
    if os.path.abspath(out_dir) == os.path.abspath(recorded.args["out"]):
        raise ConfigError("replay needs a fresh --out directory, not the recorded one")
    COMMANDS[recorded.command](argparse.Namespace(**{**recorded.args, "out": out_dir}))

    replayed = RunManifest.read(os.path.join(out_dir, recorded.filename))
    differing = sorted(name for name in recorded.outputs if replayed.outputs.get(name) != recorded.outputs[name])
    if differing:
        raise NotReproducible(f"outputs differ on replay: {', '.join(differing)}")
    print(f"reproducible: {len(recorded.outputs)} outputs match")
    return 0


# ----------------------------------------------------
# Argument parsing
# ----------------------------------------------------
def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file; flags win over it")
    p.add_argument("--lambda", dest="lam", type=float, help="L2 regularizer")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 0.01)")
    p.add_argument("--batch", type=int, help="triples per batch (default 10000)")
    p.add_argument("--epochs", type=int, help="max epochs (default 200)")
    p.add_argument("--patience", type=int, help="epochs without validation gain before stopping (default 10)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed (default $CPREC_SEED or 0)")
    common.add_argument("--threads", type=int, default=int(os.getenv("CPREC_THREADS", os.cpu_count() or 1)),
                        help="evaluation worker threads (default: all cores)")
    common.add_argument("--out", default=os.getenv("CPREC_OUT", "cprec_out"), help="output directory")
    common.add_argument("--log-level", default=os.getenv("CPREC_LOG_LEVEL", "INFO"))

    parser = argparse.ArgumentParser(prog="cprec", description="Consumer/producer recommendation for UGC platforms")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="ingest, filter, split")
    p.add_argument("--interactions", required=True, help="user<TAB>item per line")
    p.add_argument("--producers", required=True, help="item<TAB>producer per line")
    p.add_argument("--min-actions", type=int, default=10)
    p.add_argument("--fixpoint", action="store_true", help="repeat the filter until nothing changes")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, choices=MODEL_KINDS)
    p.add_argument("--k", type=int, help="latent dimensionality (default 20)")
    p.add_argument("--progress", action="store_true", help="per-batch progress bar")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="AUC on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="directory holding checkpoint.json/.bin")
    p.add_argument("--cold-threshold", type=int, default=COLD_THRESHOLD)
    p.add_argument("--mode", choices=("exact", "sampled"), default="exact")
    p.add_argument("--negatives", type=int, default=100, help="negatives per user in sampled mode")
    p.add_argument("--ties", type=float, choices=(0.0, 0.5), default=0.0, help="credit for tied scores")
    p.add_argument("--per-user", action="store_true", help="also write per-user AUCs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="grid-search lambda per (model, K), report test AUC")
    p.add_argument("--data", required=True)
    p.add_argument("--models", default=",".join(MODEL_KINDS))
    p.add_argument("--ks", default=",".join(map(str, DEFAULT_KS)))
    p.add_argument("--lambdas", default=",".join(map(repr, DEFAULT_LAMBDA_GRID)))
    p.add_argument("--cold-threshold", type=int, default=COLD_THRESHOLD)
    _add_training_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", parents=[common], help="corpus statistics and followed-producer scatter")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic UGC corpus")
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items-per-producer", type=int, default=10)
    p.add_argument("--k-true", type=int, default=8)
    p.add_argument("--weight", type=float, default=0.7, help="appreciation weight in [0, 1]")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--mean-actions", type=float, default=30.0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("replay", parents=[common], help="re-run a manifest and check outputs match")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        format="%(asctime)s [%(levelname)s] %(name)s - %(message)s",
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        datefmt="%Y-%m-%d %H:%M:%S",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CPRecError as e:
        logger.error("%s", e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
