"""Command-line entry point wiring data generation, training, indexing,
ad-hoc retrieval, and evaluation.

Every subcommand reads the shared JSON config (``--config``) with flags
overriding file values, writes outputs atomically, and is replayable:
identical inputs produce identical outputs. Exit codes: 0 success,
2 invalid config/argument, 3 missing file, 4 numeric failure, 1 other.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import ann
from .config import load_run_config
from .data import generate_synthetic, load_dataset, save_dataset
from .errors import (
    CondretError,
    DataFormatError,
    InvalidConfigError,
    NumericsError,
)
from .evaluate import run_experiment
from .model import load_checkpoint, save_checkpoint, user_tower_forward
from .retrieval import (
    build_ann,
    build_index,
    exact_topk,
    load_index,
    postfilter_oracle,
    save_index,
    streaming_filtered_search,
)
from .train import save_loss_curve, train

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_INVALID = 2
EXIT_MISSING_FILE = 3
EXIT_NUMERIC = 4

log = logging.getLogger("condret")


def _setup_logging():
    level = os.environ.get("CONDRET_LOG_LEVEL", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def cmd_gen(args):
    cfg = load_run_config(args.config, {"gen.seed": args.seed})
    out = args.out or cfg.path("dataset")
    dataset = generate_synthetic(cfg.gen_config())
    save_dataset(dataset, out)
    print(f"wrote {out}: {dataset.num_users} users, {dataset.num_items} items, "
          f"{dataset.num_events} events ({dataset.num_train_events} train)")
    return EXIT_OK


def cmd_train(args):
    overrides = {"train.seed": args.seed, "tower.conditional": args.conditional}
    cfg = load_run_config(args.config, overrides)
    dataset = load_dataset(args.dataset or cfg.path("dataset"))
    tower_cfg = cfg.tower_config(dataset.num_users, dataset.num_items, dataset.topic_count)
    train_cfg = cfg.train_config()
    report = train(dataset, tower_cfg, train_cfg)
    out = args.out or cfg.path("checkpoint")
    save_checkpoint(out, report.params, train_cfg.seed)
    curve = args.loss_curve or cfg.path("loss_curve", required=False)
    if curve:
        save_loss_curve(curve, report.epoch_losses)
    print(f"wrote {out}: {len(report.epoch_losses)} epochs, "
          f"final mean loss {report.epoch_losses[-1]:.4f}, {report.wall_clock_s:.1f}s")
    return EXIT_OK


def cmd_index(args):
    cfg = load_run_config(args.config)
    dataset = load_dataset(args.dataset or cfg.path("dataset"))
    params, _ = load_checkpoint(args.checkpoint or cfg.path("checkpoint"))
    index = build_index(params, dataset)
    if not args.no_graph:
        build_ann(index, cfg.ann_config())
    out = args.out or cfg.path("index")
    save_index(out, index)
    graph_note = f", graph layers={index.graph.num_layers}" if index.graph else ", no graph"
    print(f"wrote {out}: {index.num_items} items, d={index.dim}{graph_note} "
          f"[ann backend: {ann.backend_name()}]")
    return EXIT_OK


def cmd_retrieve(args):
    cfg = load_run_config(args.config)
    index = load_index(args.index or cfg.path("index"))
    params, _ = load_checkpoint(args.checkpoint or cfg.path("checkpoint"))
    if not 0 <= args.user < params.config.num_users:
        raise InvalidConfigError(f"user id {args.user} out of range [0, {params.config.num_users})")
    topic = args.topic
    if topic is not None and not 0 <= topic < index.topic_count:
        raise InvalidConfigError(f"topic {topic} out of range [0, {index.topic_count})")
    if params.config.conditional:
        cond = topic if topic is not None else params.config.num_topics
        emb, _ = user_tower_forward(args.user, cond, params)
    else:
        emb, _ = user_tower_forward(args.user, None, params)

    if args.mode == "none":
        result = exact_topk(index, emb, args.k, condition=topic)
    elif args.mode == "streaming":
        if topic is None:
            raise InvalidConfigError("streaming mode requires --topic")
        result = streaming_filtered_search(index, emb, topic, args.k,
                                           args.batch_size, args.budget)
    else:
        if topic is None:
            raise InvalidConfigError("postfilter mode requires --topic")
        result = postfilter_oracle(index, emb, topic, args.k, args.overfetch_factor)

    for rank, (iid, s) in enumerate(zip(result.item_ids, result.scores), start=1):
        flag = ""
        if result.match_flags is not None:
            flag = "\tmatch" if result.match_flags[rank - 1] else "\tmiss"
        print(f"{rank}\t{iid}\t{s:.6f}{flag}")
    print(f"# scanned={result.scanned_count} truncated={str(result.truncated).lower()} "
          f"returned={len(result)}")
    return EXIT_OK


def cmd_eval(args):
    cfg = load_run_config(args.config)
    settings = cfg.eval_settings()
    if args.k is not None:
        settings["k"] = args.k
    methods = args.methods.split(",") if args.methods else settings["methods"]
    modes = args.modes.split(",") if args.modes else settings["modes"]
    dataset = load_dataset(args.dataset or cfg.path("dataset"))
    checkpoints = {}
    if "LR" in methods:
        checkpoints["LR"], _ = load_checkpoint(args.checkpoint_lr or cfg.path("checkpoint_lr"))
    if "CR" in methods:
        checkpoints["CR"], _ = load_checkpoint(args.checkpoint_cr or cfg.path("checkpoint_cr"))
    indexes = {}
    if any(m in ("streaming",) for m in modes):
        for name, params in checkpoints.items():
            idx = build_index(params, dataset)
            build_ann(idx, cfg.ann_config())
            indexes[name] = idx
    report = run_experiment(
        dataset, checkpoints, methods, settings["k"], modes,
        indexes=indexes, seed=settings["seed"], max_queries=settings["max_queries"],
        streaming_batch_size=settings["streaming_batch_size"],
        streaming_budget=settings["streaming_budget"],
        overfetch_factor=settings["overfetch_factor"],
    )
    out = args.out or cfg.path("report", required=False)
    if out:
        from .arrayio import atomic_write_text

        atomic_write_text(out, report.to_tsv())
        print(f"wrote {out}")
    print(report.format_table())
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="condret",
        description="Conditional user-to-item retrieval: generate data, train towers, "
                    "build indexes, retrieve, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="dataset path (overrides config)")
    p.add_argument("--seed", type=int, help="generator seed (overrides config)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a two-tower checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset")
    p.add_argument("--out", help="checkpoint path (overrides config)")
    p.add_argument("--loss-curve", help="epoch<TAB>mean_loss output path")
    p.add_argument("--seed", type=int)
    p.add_argument("--conditional", type=lambda v: v.lower() in ("1", "true", "yes"),
                   help="true for the conditional (CR) tower, false for plain (LR)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-index", help="materialize item embeddings + ANN graph")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--no-graph", action="store_true", help="skip the ANN graph build")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="ad-hoc query against an index")
    p.add_argument("--config", required=True)
    p.add_argument("--index")
    p.add_argument("--checkpoint")
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--topic", type=int)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--mode", choices=["none", "streaming", "postfilter"], default="none")
    p.add_argument("--budget", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--overfetch-factor", type=int, default=10)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="run the INDEX/LR/CR comparison")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset")
    p.add_argument("--checkpoint-lr")
    p.add_argument("--checkpoint-cr")
    p.add_argument("--methods", help="comma list from INDEX,LR,CR")
    p.add_argument("--modes", help="comma list from none,streaming,postfilter")
    p.add_argument("--k", type=int)
    p.add_argument("--out", help="report TSV path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing-file: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (InvalidConfigError, DataFormatError, IndexError) as exc:
        print(f"error: invalid-config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericsError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CondretError as exc:
        print(f"error: failed: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
