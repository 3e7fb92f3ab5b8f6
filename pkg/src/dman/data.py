"""Behaviour logs: ingestion, segmentation, negative sampling, synthetic generation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import make_rng

logger = logging.getLogger(__name__)

PAD = 0
MIN_INTERACTIONS = 11  # "more than ten items"


class LogFormatError(ValueError):
    """One or more malformed lines; ``problems`` lists ``(line_number, text)``."""

    def __init__(self, problems):
        self.problems = problems
        head = "; ".join(f"line {n}: {msg}" for n, msg in problems[:5])
        more = f" (+{len(problems) - 5} more)" if len(problems) > 5 else ""
        super().__init__(f"malformed behaviour log: {head}{more}")


class ExhaustedVocabularyError(ValueError):
    pass


@dataclass
class BehaviorLog:
    """Parallel integer columns; order is the input order."""

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if not (len(self.users) == len(self.items) == len(self.timestamps)):
            raise ValueError("log columns differ in length")
        if len(self.items) and self.items.min() < 1:
            raise ValueError("item ids must be >= 1 (0 is padding)")

    def __len__(self):
        return len(self.users)

    def __eq__(self, other):
        return (isinstance(other, BehaviorLog)
                and np.array_equal(self.users, other.users)
                and np.array_equal(self.items, other.items)
                and np.array_equal(self.timestamps, other.timestamps))

    @classmethod
    def from_array(cls, rows):
        rows = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
        return cls(rows[:, 0], rows[:, 1], rows[:, 2])

    def to_array(self):
        return np.stack([self.users, self.items, self.timestamps], axis=1)

    @property
    def n_items(self):
        return int(self.items.max()) if len(self.items) else 0

    def sequences(self) -> dict:
        """Per-user item ids in chronological order (stable on timestamp ties)."""
        order = np.lexsort((np.arange(len(self)), self.timestamps, self.users))
        users, items = self.users[order], self.items[order]
        cuts = np.flatnonzero(np.diff(users)) + 1
        return {int(u[0]): it for u, it in zip(np.split(users, cuts), np.split(items, cuts))
                if len(u)}

    def filter_min_interactions(self, min_interactions=MIN_INTERACTIONS) -> "BehaviorLog":
        ids, counts = np.unique(self.users, return_counts=True)
        keep = np.isin(self.users, ids[counts >= min_interactions])
        dropped = int((counts < min_interactions).sum())
        if dropped:
            logger.info("dropped %d users with fewer than %d interactions", dropped, min_interactions)
        return BehaviorLog(self.users[keep], self.items[keep], self.timestamps[keep])


def ingest(path, min_interactions=MIN_INTERACTIONS) -> BehaviorLog:
    """Read ``user<TAB>item<TAB>timestamp`` lines and drop sparse users."""
    rows, problems = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                problems.append((lineno, f"expected 3 tab-separated fields, got {len(parts)}"))
                continue
            try:
                u, i, t = (int(p) for p in parts)
            except ValueError:
                problems.append((lineno, f"non-integer field in {line!r}"))
                continue
            if i < 1:
                problems.append((lineno, f"item id {i} < 1"))
                continue
            rows.append((u, i, t))
    if problems:
        raise LogFormatError(problems)
    log = BehaviorLog.from_array(np.array(rows, dtype=np.int64).reshape(-1, 3))
    return log.filter_min_interactions(min_interactions) if min_interactions else log


def write_log(log: BehaviorLog, path):
    lines = [f"{u}\t{i}\t{t}\n" for u, i, t in log.to_array().tolist()]
    Path(path).write_text("".join(lines), encoding="utf-8")


@dataclass
class SegmentedHistory:
    user: int
    segments: np.ndarray          # (N, T), oldest first, left-padded with 0
    pad_count: int
    valid_item: int | None = None
    test_item: int | None = None

    @property
    def n_segments(self):
        return self.segments.shape[0]

    def items(self) -> np.ndarray:
        return self.segments.reshape(-1)[self.pad_count:]

    def targets(self) -> np.ndarray:
        """Next-item target per position (0 where none): the flattened sequence shifted by one."""
        flat = self.segments.reshape(-1)
        out = np.zeros_like(flat)
        out[:-1] = flat[1:]
        return out.reshape(self.segments.shape)

    def with_appended(self, item) -> "SegmentedHistory":
        """History extended by one observed item, re-segmented."""
        return segment_sequence(self.user, np.append(self.items(), item), self.segments.shape[1])


def segment_sequence(user, items, T) -> SegmentedHistory:
    items = np.asarray(items, dtype=np.int64)
    n = max(1, math.ceil(len(items) / T))
    pad = n * T - len(items)
    flat = np.concatenate([np.zeros(pad, dtype=np.int64), items])
    return SegmentedHistory(int(user), flat.reshape(n, T), pad)


def segment(log: BehaviorLog, T: int, split=True) -> list:
    """Chronological, left-padded segments per user.

    With ``split`` the last item becomes the test target and the second last
    the validation target.
    """
    if T < 2:
        raise ValueError("window T must be >= 2")
    out = []
    for user, items in log.sequences().items():
        if split:
            if len(items) < 3:
                continue
            h = segment_sequence(user, items[:-2], T)
            h.valid_item, h.test_item = int(items[-2]), int(items[-1])
        else:
            h = segment_sequence(user, items, T)
        out.append(h)
    return out


def sample_negatives(rng, vocab, exclude, k) -> np.ndarray:
    """``k`` distinct items from ``1..vocab`` not in ``exclude``, uniformly."""
    excl = {int(e) for e in exclude if 1 <= int(e) <= vocab}
    avail = vocab - len(excl)
    if avail < k:
        raise ExhaustedVocabularyError(f"only {avail} items left for {k} negatives")
    if avail <= 4 * k:
        pool = np.setdiff1d(np.arange(1, vocab + 1), np.fromiter(excl, dtype=np.int64, count=len(excl)))
        return rng.choice(pool, size=k, replace=False)
    picked: list = []
    seen = set(excl)
    while len(picked) < k:
        for c in rng.integers(1, vocab + 1, size=2 * (k - len(picked))).tolist():
            if c not in seen:
                seen.add(c)
                picked.append(c)
                if len(picked) == k:
                    break
    return np.array(picked, dtype=np.int64)


# -- synthetic long-range task ------------------------------------------------

def anchor_target(anchor):
    """Item the long-range rule predicts for a user's anchor: the anchor itself.

    The user comes back to the early interest, so only a model that still
    remembers the first segment can rank it.
    """
    return anchor


@dataclass
class SyntheticSpec:
    users: int
    segments: int
    window: int
    vocab: int
    period_strength: float
    seed: int = 0
    anchor_repeats: int | None = None  # default min(4, window // 2)
    follow_prob: float = 0.3
    echoes: int = 3
    echo_gap: int = 2
    anchor_period: int = 2

    def __post_init__(self):
        if self.users < 1 or self.segments < 1 or self.window < 2:
            raise ValueError("users, segments >= 1 and window >= 2 required")
        if not 0.0 <= self.period_strength <= 1.0:
            raise ValueError(f"period strength must lie in [0, 1], got {self.period_strength}")
        if self.anchor_repeats is None:
            self.anchor_repeats = min(4, self.window // 2)
        if self.vocab <= self.segments * self.window:
            raise ValueError("vocab must exceed segments * window")
        if not 1 <= self.anchor_repeats <= self.window // 2:
            raise ValueError("anchor_repeats must lie in 1..window/2")
        if self.anchor_period < 1:
            raise ValueError("anchor_period must be >= 1")

    def anchor_segments(self):
        """0-based segments holding anchor bursts.

        Segment 0 always does; so do ``N-3, N-3-period, ...``.  The last two
        segments (cached context and final segment at test time) never do,
        and the burst in ``N-3`` is separated from an earlier one by an
        anchor-free gap, so training sees the same memory-only recall the
        test item asks for.
        """
        last = self.segments - 3
        segs = {0} | set(range(last, -1, -self.anchor_period)) if last >= 0 else {0}
        return sorted(segs)


def _burst_slots(rng, users, lo, hi, k):
    """``k`` distinct positions per user drawn from ``lo..hi-1``."""
    keys = rng.random((users, hi - lo))
    return np.argsort(keys, axis=1)[:, :k] + lo


def generate_synthetic(users, segments, window, vocab, period_strength, seed=0, **kw):
    """Plant long-range dependencies in otherwise short-term behaviour.

    Each user has ``segments * window`` interactions (the last two become the
    validation and test items after :func:`segment`).  Background behaviour is
    a first-order chain: with probability ``follow_prob`` the next item is the
    fixed successor of the previous one, otherwise a uniform draw.

    Every user owns a private anchor, repeated ``anchor_repeats`` times in the
    first half of segment 1 and again in each of
    :meth:`SyntheticSpec.anchor_segments` (never in the last two segments,
    which a model sees directly at test time).  With probability
    ``period_strength`` the test item is :func:`anchor_target` of the anchor;
    otherwise it continues the chain from the validation item.

    So that the training portion also carries long-range signal, each user
    gets up to ``echoes`` echo items: echo ``k`` bursts in the first half of
    segment ``k + 1`` and recurs once ``echo_gap`` segments later (skipped
    when that would reach the held-out items).

    Returns ``(log, anchors)`` with ``anchors[u]`` the anchor of user ``u``.
    """
    spec = SyntheticSpec(users, segments, window, vocab, period_strength, seed, **kw)
    rng = make_rng(seed, 1)
    U, T, length = users, window, segments * window
    perm = rng.permutation(vocab) + 1
    successor = np.zeros(vocab + 1, dtype=np.int64)
    successor[perm] = np.roll(perm, -1)

    # private ids: anchors and echo items are distinct within a user
    n_private = 1 + spec.echoes
    private = np.stack([(rng.permutation(vocab)[:U] if U <= vocab else rng.integers(0, vocab, U)) + 1
                        for _ in range(n_private)], axis=1)
    for k in range(1, n_private):
        clash = (private[:, [k]] == private[:, :k]).any(axis=1)
        while clash.any():
            private[clash, k] = rng.integers(1, vocab + 1, clash.sum())
            clash = (private[:, [k]] == private[:, :k]).any(axis=1)
    anchors = private[:, 0].copy()

    planted = np.zeros((U, length), dtype=np.int64)
    half = max(1, T // 2)
    rows = np.arange(U)[:, None]
    for seg in spec.anchor_segments():
        planted[rows, _burst_slots(rng, U, seg * T, seg * T + half, spec.anchor_repeats)] = anchors[:, None]
    for k in range(spec.echoes):
        seg = k
        back = (seg + spec.echo_gap) * T
        if back + T > length - 2 or seg >= segments:
            break
        item = private[:, k + 1]
        slots = _burst_slots(rng, U, seg * T, seg * T + half, spec.anchor_repeats)
        planted[rows, slots] = np.where(planted[rows, slots] == 0, item[:, None], planted[rows, slots])
        planted[np.arange(U), back + rng.integers(0, T, U)] = item

    seqs = np.zeros((U, length), dtype=np.int64)
    prev = np.zeros(U, dtype=np.int64)
    for t in range(length - 1):
        follow = (prev > 0) & (rng.random(U) < spec.follow_prob)
        item = np.where(follow, successor[prev], rng.integers(1, vocab + 1, U))
        bad = (item[:, None] == private).any(axis=1)
        while bad.any():
            item[bad] = rng.integers(1, vocab + 1, bad.sum())
            bad = (item[:, None] == private).any(axis=1)
        item = np.where(planted[:, t] > 0, planted[:, t], item)
        seqs[:, t] = item
        prev = item

    use_anchor = rng.random(U) < period_strength
    chain = successor[seqs[:, -2]]
    bad = (chain[:, None] == private).any(axis=1)
    while bad.any():
        chain[bad] = rng.integers(1, vocab + 1, bad.sum())
        bad = (chain[:, None] == private).any(axis=1)
    seqs[:, -1] = np.where(use_anchor, anchor_target(anchors), chain)

    uid = np.repeat(np.arange(U, dtype=np.int64), length)
    ts = np.tile(np.arange(length, dtype=np.int64), U)
    return BehaviorLog(uid, seqs.reshape(-1), ts), anchors


def histories_by_length(histories):
    """Group indices of histories by segment count (aligned batching)."""
    groups: dict = {}
    for i, h in enumerate(histories):
        groups.setdefault(h.n_segments, []).append(i)
    return groups
