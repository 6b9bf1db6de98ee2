"""Adam optimisation loop, model selection on validation MSE, and evaluation."""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import Config
from .corpus import RatingExample, ReviewData, collate, sample_negative
from .model import ZARM
from .numerics import NumericalError, ParamStore, Tape, no_record, ops

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "valid_mse", "seconds")


class TrainingAborted(RuntimeError):
    """A non-finite value appeared; parameters were rolled back to the last good epoch."""


class EvaluationError(ValueError):
    pass


class Adam:
    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in store.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in store.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, t in self.store.items():
            g = t.grad
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data = t.data - (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(t.dtype)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    valid_mse: float
    seconds: float


@dataclass
class TrainState:
    model: ZARM
    optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0
    best_valid: float = math.inf
    best_epoch: int = 0
    best_params: dict[str, np.ndarray] = field(default_factory=dict)
    metrics: list[EpochMetrics] = field(default_factory=list)


def predict_examples(model: ZARM, data: ReviewData, examples: Sequence[RatingExample],
                     batch_size: int = 64) -> np.ndarray:
    """Eval-mode predictions, one per example."""
    out = []
    with no_record():
        for start in range(0, len(examples), batch_size):
            y, _ = model.forward(collate(examples[start:start + batch_size], data), training=False)
            out.append(y.data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model: ZARM, data: ReviewData, examples: Sequence[RatingExample], batch_size: int = 64) -> float:
    """Mean squared rating error with dropout disabled."""
    if not examples:
        raise EvaluationError("cannot evaluate an empty dataset")
    pred = predict_examples(model, data, examples, batch_size)
    y = np.array([e.rating for e in examples], dtype=np.float64)
    return math.fsum((y - pred) ** 2) / len(examples)


def _first_nonfinite(store: ParamStore, grads: bool = False) -> str | None:
    for k, t in store.items():
        arr = t.grad if grads else t.data
        if arr is not None and not np.isfinite(arr).all():
            return k
    return None


def _accumulate(model: ZARM, data: ReviewData, examples: list[RatingExample], negatives: list[int],
                seed: int, workers: int) -> float:
    """Backpropagate the batch-mean loss into ``.grad``; returns the summed loss."""
    B = len(examples)
    k = max(1, min(workers, B))
    chunks = [list(range(i, B, k)) for i in range(k)] if k > 1 else [list(range(B))]

    def run(ci: int):
        idx = chunks[ci]
        batch = collate([examples[i] for i in idx], data, [negatives[i] for i in idx])
        rng = np.random.default_rng([seed, ci])
        with Tape() as tape:
            total, _, _ = model.loss(batch, training=True, rng=rng)
            scaled = ops.scale(total, 1.0 / B)
        return float(total.data), tape.backward(scaled, sink={})

    if k == 1:
        results = [run(0)]
    else:
        with ThreadPoolExecutor(max_workers=k) as pool:
            results = list(pool.map(run, range(k)))

    by_id = {id(t): t for _, t in model.store.items()}
    for _, sink in results:  # merged in chunk order for determinism
        for key, g in sink.items():
            t = by_id[key]
            t.grad = t.grad + g
    return math.fsum(r[0] for r in results)


def train(cfg: Config, data: ReviewData, *, model: ZARM | None = None,
          rng: np.random.Generator | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run ``cfg.epochs`` epochs of Adam on the training split.

    Random draws come from one generator seeded with ``cfg.seed``: parameter
    initialisation first, then per epoch the shuffle and, per batch, a dropout
    seed followed by the negative-query draws.
    """
    if not data.train or not data.valid:
        raise EvaluationError("training and validation splits must be non-empty")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    model = model if model is not None else ZARM.for_data(cfg, data, rng)
    opt = Adam(model.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    state = TrainState(model=model, optimizer=opt, rng=rng, best_params=model.store.snapshot())
    train_records = [data.records[k] for k in data.train_records]
    last_good = model.store.snapshot()

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(data.train))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            exs = [data.train[i] for i in order[start:start + cfg.batch_size]]
            dropout_seed = int(rng.integers(2**63 - 1))
            negs = [data.train_records[sample_negative(e.user_id, e.item_id, train_records, rng)] for e in exs]
            model.store.zero_grad()
            try:
                total += _accumulate(model, data, exs, negs, dropout_seed, cfg.workers)
            except NumericalError as exc:
                bad = _first_nonfinite(model.store)
                where = f" (first non-finite parameter: {bad})" if bad else ""
                model.store.restore(last_good)
                raise TrainingAborted(f"epoch {epoch}: {exc}{where}; "
                                      f"parameters restored to epoch {epoch - 1}") from exc
            bad = _first_nonfinite(model.store, grads=True)
            if bad is None:
                opt.step()
                bad = _first_nonfinite(model.store)
            if bad is not None:
                model.store.restore(last_good)
                raise TrainingAborted(f"epoch {epoch}: non-finite values in {bad}; "
                                      f"parameters restored to epoch {epoch - 1}")
        model.store.zero_grad()

        valid_mse = evaluate(model, data, data.valid)
        state.epoch = epoch
        state.metrics.append(EpochMetrics(epoch, total / len(order), valid_mse, time.perf_counter() - t0))
        if valid_mse < state.best_valid:
            state.best_valid, state.best_epoch = valid_mse, epoch
            state.best_params = model.store.snapshot()
        last_good = model.store.snapshot()
        log.info("epoch %d train_loss %.6f valid_mse %.6f", epoch, state.metrics[-1].train_loss, valid_mse)
        if on_epoch is not None:
            on_epoch(state)
    return state


def write_metrics(metrics: Sequence[EpochMetrics], path: str | Path, record_seconds: bool = True) -> None:
    """CSV with header ``epoch,train_loss,valid_mse,seconds``.

    Losses are written with ``repr`` so identical runs give identical bytes;
    with ``record_seconds`` off the wall-clock column is left empty.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for m in metrics:
            w.writerow([m.epoch, repr(m.train_loss), repr(m.valid_mse),
                        f"{m.seconds:.3f}" if record_seconds else ""])
