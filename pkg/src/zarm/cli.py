"""Command-line entry point: ``zarm {train,eval,gradcheck,explain}``.

Exit codes: 0 success, 1 configuration or checkpoint error, 2 data error,
3 numerical failure (non-finite values, failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ABLATIONS, Config, ConfigError, load_config
from .corpus import (CorpusError, ReviewData, SamplingError, SplitError, build_review_data, collate,
                     load_embeddings, parse_corpus, sample_negative)
from .model import ZARM
from .numerics import DimensionError, NumericalError, grad_check, inject_fault, no_record
from .synthetic import templated_records
from .trainer import EvaluationError, TrainingAborted, evaluate, train, write_metrics

log = logging.getLogger("zarm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_CAPS = {"N": 3, "T": 3, "L": 6, "M": 6}
GRADCHECK_DIM_CAP = 8
GRADCHECK_BATCH = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key = value config file")
    shared.add_argument("--corpus", help="JSON-lines review file (overrides the config)")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--workers", type=int)
    shared.add_argument("--ablation", action="append", default=[], choices=sorted(ABLATIONS))
    shared.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="zarm", description="Zero-attentive relevance matching rating model")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[shared], help="train and write checkpoints + metrics")

    ev = sub.add_parser("eval", parents=[shared], help="print the MSE of a checkpoint on a split")
    ev.add_argument("--checkpoint", help="defaults to OUT/best.ckpt")
    ev.add_argument("--split", default="test", choices=("train", "valid", "test"))

    gc = sub.add_parser("gradcheck", parents=[shared], help="finite-difference check on a tiny model")
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--max-entries", type=int, default=64)
    gc.add_argument("--inject-fault", help=argparse.SUPPRESS)

    ex = sub.add_parser("explain", parents=[shared], help="dump per-review relevance weights for a pair")
    ex.add_argument("--checkpoint", help="defaults to OUT/best.ckpt")
    ex.add_argument("--user", required=True)
    ex.add_argument("--item", required=True)
    ex.add_argument("--csv", help="output file (default: stdout)")
    return p


def resolve_config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    if args.corpus is not None:
        cfg.corpus = args.corpus
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.workers is not None:
        cfg.workers = args.workers
    for name in args.ablation:
        cfg.apply_ablation(name)
    return cfg.validate()


def load_data(cfg: Config, synthetic_fallback: bool = False) -> ReviewData:
    if cfg.corpus:
        records = parse_corpus(cfg.corpus)
    elif synthetic_fallback:
        records = templated_records()
    else:
        raise ConfigError("no corpus given (use --corpus or corpus = PATH)")
    return build_review_data(records, T=cfg.T, L=cfg.L, M=cfg.M, N=cfg.N, coverage=cfg.coverage,
                             min_count=cfg.min_count, seed=cfg.seed, ratios=cfg.ratios())


def build_model(cfg: Config, data: ReviewData) -> tuple[ZARM, np.random.Generator]:
    rng = np.random.default_rng(cfg.seed)
    model = ZARM.for_data(cfg, data, rng)
    if cfg.embeddings:
        hits = load_embeddings(cfg.embeddings, data.vocab, model.embedding.data)
        log.info("pretrained vectors for %d of %d vocabulary entries", hits, len(data.vocab))
    return model, rng


def _restore(cfg: Config, data: ReviewData, checkpoint: str | None) -> ZARM:
    model, _ = build_model(cfg, data)
    path = checkpoint or str(Path(cfg.out) / "best.ckpt")
    load_checkpoint(path, model.store, cfg.arch_hash())
    return model


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data = load_data(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.dumps())
    model, rng = build_model(cfg, data)

    state = None

    def keep(s):
        nonlocal state
        state = s

    try:
        state = train(cfg, data, model=model, rng=rng, on_epoch=keep)
    except TrainingAborted as exc:
        save_checkpoint(out / "last_good.ckpt", model.store, cfg.arch_hash())
        if state is not None:
            write_metrics(state.metrics, out / "metrics.csv", cfg.record_seconds)
        raise CliError(EXIT_NUMERIC, f"training aborted: {exc}; wrote {out / 'last_good.ckpt'}")
    write_metrics(state.metrics if state else [], out / "metrics.csv", cfg.record_seconds)
    save_checkpoint(out / "last.ckpt", model.store, cfg.arch_hash())
    best = state.best_params if state and state.best_params else None
    save_checkpoint(out / "best.ckpt", model.store, cfg.arch_hash(), values=best)
    if state and state.metrics:
        print(f"epochs={state.epoch} best_epoch={state.best_epoch} best_valid_mse={state.best_valid:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    data = load_data(cfg)
    model = _restore(cfg, data, args.checkpoint)
    examples = data.split(args.split)
    mse = evaluate(model, data, examples)
    print(f"mse={mse:.6f}")
    print(f"pairs={len(examples)}")
    return EXIT_OK


def tiny_config(cfg: Config) -> Config:
    """Clamp sizes for the finite-difference check; double precision, no dropout."""
    tiny = cfg.replace(precision="float64", dropout_embed=0.0, dropout_ffn=0.0, dropout_pred=0.0)
    tiny.N = min(tiny.N, GRADCHECK_CAPS["N"]) if tiny.N else GRADCHECK_CAPS["N"]
    for key in ("T", "L", "M"):
        setattr(tiny, key, min(getattr(tiny, key), GRADCHECK_CAPS[key]))
    for key in ("d_w", "d_s", "d_r", "d_latent", "match_hidden"):
        setattr(tiny, key, min(getattr(tiny, key), GRADCHECK_DIM_CAP))
    tiny.heads = min(tiny.heads, 2)
    return tiny.validate()


def run_gradcheck(cfg: Config, tol: float = 1e-4, h: float = 1e-5, max_entries: int = 64):
    """Gradient check of the whole model loss on a few training examples."""
    cfg = tiny_config(cfg)
    data = load_data(cfg, synthetic_fallback=True)
    model, rng = build_model(cfg, data)
    examples = data.train[:GRADCHECK_BATCH]
    train_records = [data.records[k] for k in data.train_records]
    negatives = [data.train_records[sample_negative(e.user_id, e.item_id, train_records, rng)]
                 for e in examples]
    batch = collate(examples, data, negatives)

    def loss_fn():
        total, _, _ = model.loss(batch, training=False)
        return total

    return grad_check(model.store, loss_fn, h=h, tol=tol, max_entries=max_entries,
                      rng=np.random.default_rng(cfg.seed))


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    if args.inject_fault:
        with inject_fault(args.inject_fault):
            report = run_gradcheck(cfg, args.tol, args.h, args.max_entries)
    else:
        report = run_gradcheck(cfg, args.tol, args.h, args.max_entries)
    for t in report.tensors:
        print(f"{t.path}\t{t.max_rel_error:.3e}\tabs={t.max_abs_error:.1e}\tchecked={t.checked}\tskipped_kinks={t.skipped_kinks}")
    worst = report.worst
    print(f"relative error floor {report.floor:.2e} (round-off scale of the loss)")
    if report.passed:
        print(f"PASS worst={worst.path if worst else '-'} {worst.max_rel_error if worst else 0.0:.3e}")
        return EXIT_OK
    print(f"FAIL worst={worst.path} max_rel_error={worst.max_rel_error:.3e} tol={report.tol:g}")
    return EXIT_NUMERIC


def explain_rows(model: ZARM, data: ReviewData, user: str, item: str) -> list[tuple]:
    """``(review_index, alpha, alpha_hat)`` per real profile review, then ``("ZERO", 0, alpha_hat_0)``."""
    if user not in data.users and not any(e.user_id == user for e in data.train + data.valid + data.test):
        raise CorpusError(f"unknown user id {user!r}")
    if item not in data.items and not any(e.item_id == item for e in data.train + data.valid + data.test):
        raise CorpusError(f"unknown item id {item!r}")
    found = [e for e in data.train + data.valid + data.test if e.user_id == user and e.item_id == item]
    if not found:
        raise CorpusError(f"pair ({user!r}, {item!r}) is not in the corpus")
    with no_record():
        _, trace = model.forward(collate(found[:1], data), training=False)
    rows: list[tuple] = []
    for n in np.flatnonzero(trace.review_mask[0]):
        rows.append((int(n), float(trace.alpha[0, n]), float(trace.alpha_hat[0, n])))
    rows.append(("ZERO", 0, float(trace.alpha_hat_0[0])))
    return rows


def cmd_explain(args) -> int:
    cfg = resolve_config(args)
    data = load_data(cfg)
    model = _restore(cfg, data, args.checkpoint)
    rows = explain_rows(model, data, args.user, args.item)
    fh = open(args.csv, "w", newline="") if args.csv else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("review_index", "alpha", "alpha_hat"))
        w.writerows(rows)
    finally:
        if args.csv:
            fh.close()
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "explain": cmd_explain}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, CheckpointError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, SplitError, SamplingError, EvaluationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
