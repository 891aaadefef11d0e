"""Training-example construction under the two negative-sampling regimes.

The binary regime expands each train positive into a fixed 40-sample block
(20 positive copies, 10 same-item negatives, 10 cross-item negatives) built
once per run.  The pairwise regime draws one fresh negative per positive at
every epoch, so at most one epoch of pairs is ever materialized.
"""

from __future__ import annotations

import logging
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .corpus import Corpus, SplitAssignment, TRAIN

logger = logging.getLogger(__name__)

POSITIVE_COPIES = 20
SAME_ITEM_NEGATIVES = 10
OTHER_ITEM_NEGATIVES = 10
BLOCK = POSITIVE_COPIES + SAME_ITEM_NEGATIVES + OTHER_ITEM_NEGATIVES


class SamplingError(ValueError):
    """No eligible negatives exist for a requested draw."""


class BinarySample(NamedTuple):
    """One labeled authorship example; label 0 photos are never the user's."""

    user: int
    item: int
    photo: int
    label: int


class PairSample(NamedTuple):
    """One ranking pair: the user's own photo against a presumed-bad one."""

    user: int
    item: int
    photo_pos: int
    photo_neg: int


def expand_static(corpus: Corpus, split: SplitAssignment, seed: int) -> list[BinarySample]:
    """Expand train positives into the fixed 40x balanced binary dataset.

    Per positive (u, i, p): 20 copies labeled 1, 10 negatives drawn uniformly
    (with replacement) from photos of item i by other users, and 10 negatives
    drawn uniformly from photos outside item i by other users.  When an item
    offers no same-item negatives, those 10 slots fall back to cross-item
    draws so the 40-sample contract holds; the fallback is logged.
    """
    train_rows = split.indices(TRAIN)
    if train_rows.size == 0:
        raise SamplingError("train split is empty")
    rng = np.random.default_rng(seed)
    photo_author = corpus.photo_author
    photo_item = corpus.photo_item
    out: list[BinarySample] = []
    fallbacks = 0
    for row in train_rows.tolist():
        u = int(corpus.users[row])
        i = int(corpus.items[row])
        p = int(corpus.photos[row])
        out.extend([BinarySample(u, i, p, 1)] * POSITIVE_COPIES)

        pool = corpus.item_photos[i]
        pool = pool[photo_author[pool] != u]
        if pool.size:
            same = pool[rng.integers(0, pool.size, size=SAME_ITEM_NEGATIVES)]
            out.extend(BinarySample(u, i, int(q), 0) for q in same)
        else:
            fallbacks += 1
            extra = _draw_cross_item(rng, corpus, u, i, SAME_ITEM_NEGATIVES)
            out.extend(BinarySample(u, int(photo_item[q]), int(q), 0) for q in extra)

        other = _draw_cross_item(rng, corpus, u, i, OTHER_ITEM_NEGATIVES)
        out.extend(BinarySample(u, int(photo_item[q]), int(q), 0) for q in other)
    if fallbacks:
        logger.warning(
            "%d train positives had no same-item negatives; cross-item draws filled those slots",
            fallbacks,
        )
    return out


def _draw_cross_item(rng: np.random.Generator, corpus: Corpus, user: int, item: int, k: int) -> np.ndarray:
    """Rejection-sample k photos outside `item` and not authored by `user`."""
    pool = corpus.item_photos[item]
    overlap = int(np.count_nonzero(corpus.photo_author[pool] == user))
    excluded = pool.size + corpus.user_photos[user].size - overlap
    if excluded >= corpus.n_photos:
        raise SamplingError(
            f"no negatives exist outside item {item} for user {user}"
        )
    out = np.empty(k, dtype=np.int64)
    filled = 0
    while filled < k:
        cand = rng.integers(0, corpus.n_photos, size=k - filled)
        ok = (corpus.photo_item[cand] != item) & (corpus.photo_author[cand] != user)
        good = cand[ok]
        out[filled : filled + good.size] = good
        filled += good.size
    return out


def sample_pairwise_epoch(corpus: Corpus, split: SplitAssignment, epoch: int, seed: int) -> list[PairSample]:
    """Draw one uniform negative per train positive for this epoch.

    The RNG is seeded by (seed, epoch), so runs reproduce while epochs see
    fresh negatives.  Negatives come from the complement of the user's own
    photos, via per-slot rejection.
    """
    train_rows = split.indices(TRAIN)
    if train_rows.size == 0:
        raise SamplingError("train split is empty")
    users = corpus.users[train_rows]
    owned = np.asarray([corpus.user_photos[u].size for u in range(corpus.n_users)])
    saturated = np.unique(users[owned[users] >= corpus.n_photos])
    if saturated.size:
        raise SamplingError(f"user {int(saturated[0])} owns every photo; no negative exists")

    rng = np.random.default_rng([seed, epoch])
    neg = np.empty(train_rows.size, dtype=np.int64)
    pending = np.arange(train_rows.size)
    while pending.size:
        cand = rng.integers(0, corpus.n_photos, size=pending.size)
        bad = corpus.photo_author[cand] == users[pending]
        neg[pending[~bad]] = cand[~bad]
        pending = pending[bad]
    return [
        PairSample(int(u), int(i), int(p), int(q))
        for u, i, p, q in zip(
            users.tolist(),
            corpus.items[train_rows].tolist(),
            corpus.photos[train_rows].tolist(),
            neg.tolist(),
        )
    ]


def batch_stream(samples: Sequence, batch_size: int, shuffle_seed: int) -> Iterator:
    """Yield a seeded uniform shuffle of `samples` in contiguous batches.

    The final partial batch is emitted.  Arrays are yielded as arrays,
    other sequences as lists.
    """
    if batch_size < 1:
        raise SamplingError("batch_size must be >= 1")
    n = len(samples)
    order = np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        take = order[start : start + batch_size]
        if isinstance(samples, np.ndarray):
            yield samples[take]
        else:
            yield [samples[int(j)] for j in take]


def dump_binary_samples(path, samples: Iterable[BinarySample]) -> None:
    """Debug TSV dump for oracle cross-checks."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user\titem\tphoto\tlabel\n")
        for s in samples:
            fh.write(f"{s.user}\t{s.item}\t{s.photo}\t{s.label}\n")


def dump_pair_samples(path, samples: Iterable[PairSample]) -> None:
    """Debug TSV dump for oracle cross-checks."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user\titem\tphoto_pos\tphoto_neg\n")
        for s in samples:
            fh.write(f"{s.user}\t{s.item}\t{s.photo_pos}\t{s.photo_neg}\n")
