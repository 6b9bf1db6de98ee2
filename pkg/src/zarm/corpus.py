"""Review ingestion, tokenisation, vocabulary, padding and example construction."""
from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD = 0
OOV = 1
PAD_TOKEN = "<pad>"
OOV_TOKEN = "<oov>"

_SENTENCE_END = re.compile(r"(?<=[.!?])(?:\s+|$)")
_PUNCT = re.compile(r"([.,!?;:])")


class CorpusError(ValueError):
    """The corpus cannot be used (unreadable, mostly malformed, or empty where data is required)."""


class SplitError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class ReviewRecord:
    user_id: str
    item_id: str
    rating: float
    text: str


def parse_corpus(path: str | Path) -> list[ReviewRecord]:
    """Read a JSON-lines review file.

    Malformed lines are skipped and counted; more than 10% malformed is fatal.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc

    records: list[ReviewRecord] = []
    bad = 0
    total = 0
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        total += 1
        try:
            obj = json.loads(line)
            rec = ReviewRecord(str(obj["user_id"]), str(obj["item_id"]), float(obj["rating"]), str(obj["text"]))
            if not rec.user_id or not rec.item_id or not math.isfinite(rec.rating):
                raise ValueError("empty id or non-finite rating")
        except (ValueError, KeyError, TypeError) as exc:
            bad += 1
            log.warning("%s:%d: skipping malformed record (%s)", path, lineno, exc)
            continue
        records.append(rec)

    if total == 0:
        log.warning("empty corpus: %s", path)
    elif bad:
        log.warning("%s: %d of %d lines malformed", path, bad, total)
        if bad > 0.1 * total:
            raise CorpusError(f"{path}: {bad} of {total} lines malformed (over 10%)")
    return records


def write_corpus(records: Iterable[ReviewRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"user_id": r.user_id, "item_id": r.item_id,
                                 "rating": r.rating, "text": r.text}) + "\n")


def tokenize(text: str) -> list[list[str]]:
    """Split into sentences on ``. ! ?`` + whitespace, then into lowercase word tokens.

    >>> tokenize("Good toy. Loved it!")
    [['good', 'toy', '.'], ['loved', 'it', '!']]
    """
    sentences = []
    for chunk in _SENTENCE_END.split(text.strip()):
        tokens = _PUNCT.sub(r" \1 ", chunk).lower().split()
        if tokens:
            sentences.append(tokens)
    return sentences


@dataclass
class Vocab:
    index: dict[str, int]
    min_count: int = 1

    def __len__(self) -> int:
        return len(self.index)

    def lookup(self, token: str) -> int:
        return self.index.get(token, OOV)

    def encode(self, sentences: Sequence[Sequence[str]]) -> list[list[int]]:
        return [[self.lookup(t) for t in s] for s in sentences]

    def tokens(self) -> list[str]:
        return sorted(self.index, key=self.index.__getitem__)


def build_vocab(records: Iterable[ReviewRecord], min_count: int = 1) -> Vocab:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    for r in records:
        for sent in tokenize(r.text):
            counts.update(sent)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    index = {PAD_TOKEN: PAD, OOV_TOKEN: OOV}
    for t in kept:
        index.setdefault(t, len(index))
    return Vocab(index, min_count)


def load_embeddings(path: str | Path, vocab: Vocab, table: np.ndarray) -> int:
    """Overwrite rows of ``table`` for vocab tokens found in a text embedding file.

    Returns the number of rows filled. The PAD row is never touched.
    """
    dim = table.shape[1]
    hits = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            idx = vocab.index.get(parts[0])
            if idx is None or idx == PAD:
                continue
            if len(parts) - 1 != dim:
                raise CorpusError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            table[idx] = np.asarray(parts[1:], dtype=np.float64)
            hits += 1
    return hits


@dataclass
class PaddedReview:
    grid: np.ndarray          # (T, L) token ids
    word_mask: np.ndarray     # (T, L) bool
    sentence_mask: np.ndarray  # (T,) bool
    flat: np.ndarray          # (M,) token ids in reading order
    flat_mask: np.ndarray     # (M,) bool

    @property
    def is_empty(self) -> bool:
        return not self.sentence_mask.any()

    def unpad(self) -> list[list[int]]:
        return [list(row[m]) for row, m in zip(self.grid, self.word_mask) if m.any()]


def pad_review(sentences: Sequence[Sequence[int]], T: int, L: int, M: int) -> PaddedReview:
    if min(T, L, M) < 1:
        raise ValueError("T, L and M must be positive")
    grid = np.full((T, L), PAD, dtype=np.int64)
    for i, sent in enumerate(sentences[:T]):
        words = list(sent[:L])
        grid[i, :len(words)] = words
    word_mask = grid != PAD
    reading = [w for s in sentences for w in s][:M]
    flat = np.full(M, PAD, dtype=np.int64)
    flat[:len(reading)] = reading
    return PaddedReview(grid, word_mask, word_mask.any(axis=1), flat, flat != PAD)


def empty_review(T: int, L: int, M: int) -> PaddedReview:
    return pad_review([], T, L, M)


def split_dataset(pairs: Sequence, ratios: Sequence[float] = (8, 1, 1), seed: int = 0):
    """Seeded uniform partition; later parts get floor shares, the first keeps the rest."""
    if any(r <= 0 for r in ratios):
        raise SplitError("ratios must be positive")
    n = len(pairs)
    if n < len(ratios):
        raise SplitError(f"need at least {len(ratios)} pairs to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    total = float(sum(ratios))
    sizes = [int(math.floor(n * r / total)) for r in ratios[1:]]
    sizes.insert(0, n - sum(sizes))
    parts, start = [], 0
    for size in sizes:
        parts.append([pairs[i] for i in order[start:start + size]])
        start += size
    return tuple(parts)


def choose_profile_size(records: Iterable[ReviewRecord], coverage: float = 0.9) -> int:
    """Smallest N such that at least ``coverage`` of users have at most N reviews."""
    if not 0 < coverage <= 1:
        raise ValueError("coverage must be in (0, 1]")
    counts = sorted(Counter(r.user_id for r in records).values())
    if not counts:
        raise CorpusError("no users to size profiles from")
    needed = max(1, math.ceil(coverage * len(counts) - 1e-9))
    return counts[needed - 1]


def sample_negative(user_id: str, item_id: str, records: Sequence[ReviewRecord],
                    rng: np.random.Generator, max_tries: int = 64) -> int:
    """Index of a uniformly drawn record by another user about another item.

    Rejection sampling over all records; after ``max_tries`` misses the
    eligible set is enumerated. Both paths are uniform over eligible records.
    """
    n = len(records)
    if n:
        for _ in range(max_tries):
            k = int(rng.integers(n))
            if records[k].user_id != user_id and records[k].item_id != item_id:
                return k
    eligible = [k for k, r in enumerate(records) if r.user_id != user_id and r.item_id != item_id]
    if not eligible:
        raise SamplingError(f"no review by another user on another item for ({user_id}, {item_id})")
    return eligible[int(rng.integers(len(eligible)))]


# ---------------------------------------------------------------- examples

@dataclass
class RatingExample:
    user_id: str
    item_id: str
    rating: float
    user_profile: list[int]   # record indices into ReviewData.records, at most N
    item_profile: list[int]
    positive: int | None      # ground-truth record index (training only)


@dataclass
class ReviewData:
    """Everything derived from a corpus that the model consumes."""

    records: list[ReviewRecord]
    vocab: Vocab
    reviews: list[PaddedReview]
    users: dict[str, int]
    items: dict[str, int]
    train: list[RatingExample]
    valid: list[RatingExample]
    test: list[RatingExample]
    train_records: list[int]          # indices of records in the training split
    N: int
    T: int
    L: int
    M: int

    def split(self, name: str) -> list[RatingExample]:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def build_review_data(records: list[ReviewRecord], *, T: int, L: int, M: int, N: int = 0,
                      coverage: float = 0.9, min_count: int = 1, seed: int = 0,
                      ratios: Sequence[float] = (8, 1, 1)) -> ReviewData:
    """Split pairs, fit vocabulary and profiles on training data, build examples.

    Profiles take a user's (item's) training reviews in file order, skipping
    the ground-truth review of the example itself, capped at N. ``N=0``
    derives N from the user review-count coverage rule on the training split.
    """
    by_pair: dict[tuple[str, str], int] = {}
    for k, r in enumerate(records):
        by_pair[(r.user_id, r.item_id)] = k  # last review wins on duplicates
    pairs = sorted(by_pair)
    train_pairs, valid_pairs, test_pairs = split_dataset(pairs, ratios, seed)

    train_idx = sorted(by_pair[p] for p in train_pairs)
    train_records = [records[k] for k in train_idx]
    vocab = build_vocab(train_records, min_count)
    if N <= 0:
        N = choose_profile_size(train_records, coverage)

    reviews = [pad_review(vocab.encode(tokenize(r.text)), T, L, M) for r in records]
    users = {u: i for i, u in enumerate(sorted({records[k].user_id for k in train_idx}))}
    items = {v: i for i, v in enumerate(sorted({records[k].item_id for k in train_idx}))}

    by_user: dict[str, list[int]] = defaultdict(list)
    by_item: dict[str, list[int]] = defaultdict(list)
    for k in train_idx:
        if reviews[k].is_empty:
            continue
        by_user[records[k].user_id].append(k)
        by_item[records[k].item_id].append(k)

    def make(pair, is_train):
        k = by_pair[pair]
        u, i = pair
        up = [j for j in by_user.get(u, []) if j != k][:N]
        ip = [j for j in by_item.get(i, []) if j != k][:N]
        if not up:
            raise CorpusError(f"user {u!r} has no profile reviews for pair ({u}, {i})")
        if not ip:
            raise CorpusError(f"item {i!r} has no profile reviews for pair ({u}, {i})")
        return RatingExample(u, i, records[k].rating, up, ip, k if is_train else None)

    return ReviewData(
        records=records, vocab=vocab, reviews=reviews, users=users, items=items,
        train=[make(p, True) for p in train_pairs],
        valid=[make(p, False) for p in valid_pairs],
        test=[make(p, False) for p in test_pairs],
        train_records=train_idx, N=N, T=T, L=L, M=M,
    )


@dataclass
class Batch:
    """Stacked index grids for a list of examples (leading axis = example)."""

    user_grid: np.ndarray        # (B, N, T, L)
    user_word_mask: np.ndarray
    user_sent_mask: np.ndarray   # (B, N, T)
    user_rev_mask: np.ndarray    # (B, N)
    user_flat: np.ndarray        # (B, N, M)
    user_flat_mask: np.ndarray
    item_grid: np.ndarray
    item_word_mask: np.ndarray
    item_sent_mask: np.ndarray
    item_rev_mask: np.ndarray
    item_flat: np.ndarray
    item_flat_mask: np.ndarray
    users: np.ndarray            # (B,) row in the id tables, -1 when unseen
    items: np.ndarray
    ratings: np.ndarray          # (B,)
    pos_flat: np.ndarray | None = None   # (B, M)
    pos_mask: np.ndarray | None = None
    neg_flat: np.ndarray | None = None
    neg_mask: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ratings)


def _stack_profiles(profiles: list[list[int]], reviews: list[PaddedReview], N: int, T: int, L: int, M: int):
    B = len(profiles)
    grid = np.zeros((B, N, T, L), dtype=np.int64)
    flat = np.zeros((B, N, M), dtype=np.int64)
    for b, prof in enumerate(profiles):
        for n, k in enumerate(prof[:N]):
            grid[b, n] = reviews[k].grid
            flat[b, n] = reviews[k].flat
    word_mask = grid != PAD
    sent_mask = word_mask.any(axis=-1)
    return grid, word_mask, sent_mask, sent_mask.any(axis=-1), flat, flat != PAD


def collate(examples: Sequence[RatingExample], data: ReviewData,
            negatives: Sequence[int] | None = None) -> Batch:
    """Build a :class:`Batch`; ``negatives`` are record indices, one per example."""
    N, T, L, M = data.N, data.T, data.L, data.M
    u = _stack_profiles([e.user_profile for e in examples], data.reviews, N, T, L, M)
    i = _stack_profiles([e.item_profile for e in examples], data.reviews, N, T, L, M)
    batch = Batch(*u, *i,
                  users=np.array([data.users.get(e.user_id, -1) for e in examples], dtype=np.int64),
                  items=np.array([data.items.get(e.item_id, -1) for e in examples], dtype=np.int64),
                  ratings=np.array([e.rating for e in examples], dtype=np.float64))
    if negatives is not None:
        pos = np.stack([data.reviews[e.positive].flat for e in examples])
        neg = np.stack([data.reviews[k].flat for k in negatives])
        batch.pos_flat, batch.pos_mask = pos, pos != PAD
        batch.neg_flat, batch.neg_mask = neg, neg != PAD
    return batch
