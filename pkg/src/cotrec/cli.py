"""Command-line surface: data prep, store build, training, evaluation, sweeps.

Every command resolves its configuration, writes a snapshot of it into the
output directory before any computation, and emits byte-stable artifacts
(rerunning with identical inputs and flags reproduces identical files).
Exit codes: 0 success, 1 usage, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import textenc
from .cotstore import (CoTStore, FileCoTProvider, SyntheticCoTProvider,
                       build_cot_records, read_store, sample_subset, write_store)
from .data import (build_splits, load_interactions, log_stats, read_split_dir,
                   sample_negatives, write_split_dir)
from .errors import DataError, NumericalError
from .metrics import relaimpr
from .training import (Model, TrainConfig, evaluate_model, monitored_metric,
                       run_length_sweep, train)
from .util import canonical_json, subseed

log = logging.getLogger(__name__)

TOP_KEYS = {"train", "encoder", "provider", "store"}
ENCODER_KEYS = {"kind", "dim", "seed", "pack_path"}
PROVIDER_KEYS = {"kind", "signal", "noise_scale", "dim", "texts_path", "pack_path"}
STORE_KEYS = {"sample_ratio", "approx_seed"}


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _check_keys(section: str, raw: dict, allowed: set[str]) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise DataError(f"unknown {section} config keys: {', '.join(unknown)}")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataError(f"{path}: config must be a JSON object")
    _check_keys("top-level", raw, TOP_KEYS)
    _check_keys("encoder", raw.get("encoder", {}), ENCODER_KEYS)
    _check_keys("provider", raw.get("provider", {}), PROVIDER_KEYS)
    _check_keys("store", raw.get("store", {}), STORE_KEYS)
    return raw


def _train_config(cfg: dict, args) -> TrainConfig:
    raw = dict(cfg.get("train", {}))
    raw.setdefault("seed", args.seed)
    try:
        tc = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise DataError(f"config: {exc}") from exc
    overrides = {}
    for name in ("task", "backbone", "variant", "alpha", "k", "epochs", "batch_size"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        tc = dataclasses.replace(tc, **overrides)  # flag errors surface as usage
    return tc


def _build_encoder(cfg: dict):
    enc = cfg.get("encoder", {})
    return textenc.make_encoder(
        kind=enc.get("kind", "synthetic"),
        seed=int(enc.get("seed", 0)),
        dim=int(enc.get("dim", 64)),
        pack_path=enc.get("pack_path"),
    )


def _build_provider(cfg: dict, seed: int, encoder):
    prov = cfg.get("provider", {})
    kind = prov.get("kind", "synthetic")
    if kind == "synthetic":
        return SyntheticCoTProvider(
            seed=subseed(seed, "provider"),
            signal=float(prov.get("signal", 0.7)),
            dim=int(prov.get("dim", encoder.dim)),
            noise_scale=float(prov.get("noise_scale", 0.05)),
        )
    if kind == "file":
        texts_path = prov.get("texts_path")
        if not texts_path:
            raise DataError("file provider needs provider.texts_path")
        return FileCoTProvider.from_file(texts_path, encoder=encoder,
                                         pack_path=prov.get("pack_path"))
    raise DataError(f"unknown provider kind: {kind!r}")


def _snapshot(outdir: str, payload: dict) -> None:
    """Write the resolved configuration before any computation starts."""
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_json(payload) + "\n")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(payload) + "\n")


def _require(path: str | None, what: str) -> str:
    if not path or not os.path.exists(path):
        raise DataError(f"{what} not found: {path}")
    return path


def _load_store(store_dir: str, vocab, cfg: dict) -> CoTStore:
    records = read_store(store_dir, vocab)
    return CoTStore(records, approx_seed=int(cfg.get("store", {}).get("approx_seed", 0)))


def _time_range(text: str):
    try:
        start, end = text.split(":", 1)
        return int(start), int(end)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"time range must be START:END epoch seconds, got {text!r}")


def _int_list(text: str):
    try:
        return [int(tok) for tok in text.split(",") if tok != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def cmd_prepare_data(args) -> int:
    cfg = _load_config(args.config)
    _require(args.input, "interaction log")
    _snapshot(args.output, {
        "command": "prepare-data",
        "input": args.input,
        "seed": args.seed,
        "time_range": list(args.time_range) if args.time_range else None,
        "config": cfg,
    })
    result = load_interactions(args.input, time_range=args.time_range)
    if result.malformed:
        log.warning("skipped %d malformed lines", result.malformed)
    stats = log_stats(result.interactions)
    split, vocab, dropped = build_splits(result.interactions)
    split = sample_negatives(split, vocab, args.seed)
    write_split_dir(split, vocab, args.output)
    stats.update({
        "malformed_lines": result.malformed,
        "dropped_users": dropped,
        "examples": {part: len(split[part]) for part in ("train", "valid", "test")},
    })
    _write_json(os.path.join(args.output, "stats.json"), stats)
    print(f"users: {stats['n_users']}")
    print(f"items: {stats['n_items']}")
    print(f"reviews: {stats['n_reviews']}")
    print(f"sparsity_pct: {stats['sparsity_pct']:.6f}")
    print(f"examples: train={stats['examples']['train']} "
          f"valid={stats['examples']['valid']} test={stats['examples']['test']}")
    return 0


def cmd_build_cot_store(args) -> int:
    cfg = _load_config(args.config)
    _require(args.splits, "splits directory")
    ratio = float(cfg.get("store", {}).get("sample_ratio", 0.1))
    _snapshot(args.output, {
        "command": "build-cot-store",
        "splits": args.splits,
        "seed": args.seed,
        "sample_ratio": ratio,
        "config": cfg,
    })
    split, vocab = read_split_dir(args.splits)
    encoder = _build_encoder(cfg)
    provider = _build_provider(cfg, args.seed, encoder)
    sampled = sample_subset(split.train, ratio, args.seed)
    records = build_cot_records(sampled, provider, encoder)
    write_store(args.output, records, vocab)
    n_pos = sum(1 for r in records if r.label == 1)
    summary = {"n_records": len(records), "n_pos": n_pos,
               "n_neg": len(records) - n_pos, "sample_ratio": ratio}
    _write_json(os.path.join(args.output, "store_summary.json"), summary)
    print(f"records: {summary['n_records']} "
          f"(pos {summary['n_pos']}, neg {summary['n_neg']})")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    _require(args.splits, "splits directory")
    tc = _train_config(cfg, args)
    if tc.variant != "base":
        _require(args.store, "reasoning-trace store")
    _snapshot(args.output, {
        "command": "train",
        "splits": args.splits,
        "store": args.store,
        "train": tc.to_dict(),
        "config": cfg,
    })
    split, vocab = read_split_dir(args.splits)
    store = _load_store(args.store, vocab, cfg) if tc.variant != "base" and args.store else None
    encoder = _build_encoder(cfg)
    model, result = train(tc, split, vocab, store, encoder, outdir=args.output)
    report = evaluate_model(model, split, "valid", vocab, store, encoder)
    _write_json(os.path.join(args.output, "report.json"),
                json.loads(report.to_json()))
    monitor = monitored_metric(tc.task)
    print(f"best epoch: {result.best_epoch}")
    print(f"valid {monitor}: {result.best_metric:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    _require(args.checkpoint, "checkpoint")
    _require(args.splits, "splits directory")
    model = Model.load(args.checkpoint)
    split, vocab = read_split_dir(args.splits)
    store = None
    if model.config.variant != "base":
        _require(args.store, "reasoning-trace store")
        store = _load_store(args.store, vocab, cfg)
    encoder = _build_encoder(cfg)
    report = evaluate_model(model, split, args.split, vocab, store, encoder)
    if args.base_auc is not None:
        if model.config.task == "ranking":
            report.metrics["relaimpr"] = relaimpr(report.metrics["auc"], args.base_auc)
        else:
            log.warning("--base-auc ignored for the retrieval task")
    print(report.to_json())
    if args.output:
        os.makedirs(args.output, exist_ok=True)
        _write_json(os.path.join(args.output, "report.json"),
                    json.loads(report.to_json()))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    _require(args.splits, "splits directory")
    _require(args.store, "reasoning-trace store")
    tc = _train_config(cfg, args)
    _snapshot(args.output, {
        "command": "ablate",
        "splits": args.splits,
        "store": args.store,
        "ks": args.ks,
        "with_unbalanced": args.with_unbalanced,
        "train": tc.to_dict(),
        "config": cfg,
    })
    split, vocab = read_split_dir(args.splits)
    store = _load_store(args.store, vocab, cfg)
    encoder = _build_encoder(cfg)
    rows = run_length_sweep(tc, split, vocab, store, encoder, ks=args.ks,
                            include_unbalanced=args.with_unbalanced)
    _write_json(os.path.join(args.output, "sweep.json"), {"rows": rows})
    monitor = monitored_metric(tc.task)
    print(f"{'k':>3} {'balance':>8} {monitor:>10} {'':>5}")
    for row in rows:
        mark = "*" if row.get("best") else ""
        if "metrics" in row:
            value = f"{row['metrics'][monitor]:.6f}"
        else:
            value = f"failed: {row['error']}"
        print(f"{row['k']:>3} {str(row['balance']):>8} {value:>10} {mark:>5}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cotrec",
                     description="Retrieval-grounded reasoning features "
                                 "for recommendation models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file (documented keys only)")
        p.add_argument("--seed", type=int, default=0, help="root seed for this command")

    p = sub.add_parser("prepare-data", help="split an interaction log")
    common(p)
    p.add_argument("--input", required=True, help="interaction NDJSON log")
    p.add_argument("--output", required=True, help="split output directory")
    p.add_argument("--time-range", type=_time_range, default=None,
                   help="inclusive START:END filter, epoch seconds")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("build-cot-store", help="sample and embed reasoning traces")
    common(p)
    p.add_argument("--splits", required=True, help="prepare-data output directory")
    p.add_argument("--output", required=True, help="store output directory")
    p.set_defaults(func=cmd_build_cot_store)

    p = sub.add_parser("train", help="train a fused model")
    common(p)
    p.add_argument("--splits", required=True)
    p.add_argument("--store", help="reasoning-trace store directory")
    p.add_argument("--output", required=True, help="run directory")
    p.add_argument("--task", choices=("ranking", "retrieval"))
    p.add_argument("--backbone", choices=("fm_deep", "target_attention", "two_tower"))
    p.add_argument("--variant", choices=("full", "base", "no_cot", "mean_pool", "no_balance"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--store")
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--base-auc", dest="base_auc", type=float,
                   help="baseline AUC; adds RelaImpr to a ranking report")
    p.add_argument("--output", help="optional directory for report.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep retrieved-context length")
    common(p)
    p.add_argument("--splits", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--ks", type=_int_list, default=[0, 2, 4, 6, 8],
                   help="comma-separated context lengths")
    p.add_argument("--with-unbalanced", action="store_true",
                   help="add an unbalanced k=4 cell")
    p.add_argument("--task", choices=("ranking", "retrieval"))
    p.add_argument("--backbone", choices=("fm_deep", "target_attention", "two_tower"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
