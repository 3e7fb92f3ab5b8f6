"""Ranking metrics and the inference-cost benchmark."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import make_rng
from .model import attention_score_count


class EmptyTestSetError(ValueError):
    pass


@dataclass
class RankingMetrics:
    ks: list
    hit_rate: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    recall: dict = field(default_factory=dict)
    users: int = 0

    def lines(self):
        out = [f"users\t{self.users}"]
        for k in self.ks:
            out.append(f"HR@{k}\t{self.hit_rate[k]:.6f}")
            out.append(f"NDCG@{k}\t{self.ndcg[k]:.6f}")
            out.append(f"Recall@{k}\t{self.recall[k]:.6f}")
        return out

    def as_flat(self, prefix=""):
        d = {f"{prefix}users": self.users}
        for k in self.ks:
            d[f"{prefix}hr@{k}"] = self.hit_rate[k]
            d[f"{prefix}ndcg@{k}"] = self.ndcg[k]
            d[f"{prefix}recall@{k}"] = self.recall[k]
        return d


def target_ranks(scores, targets, exclude=None) -> np.ndarray:
    """1-based rank of each target among candidate columns ``1..n_items``.

    ``scores`` is ``(U, n_items + 1)`` (column 0 = padding, never a candidate).
    ``exclude`` is an optional list of per-user item-id arrays removed from
    the candidate set; the target itself is never removed.  Ties go to the
    smaller item id.
    """
    scores = np.array(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    scores[:, 0] = -np.inf
    if exclude is not None:
        for u, ex in enumerate(exclude):
            ex = np.asarray(ex, dtype=np.int64)
            scores[u, ex[ex != targets[u]]] = -np.inf
    rows = np.arange(len(targets))
    t = scores[rows, targets][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    better = (scores > t) | ((scores == t) & (ids < targets[:, None]))
    return better.sum(axis=1) + 1


def metrics_from_ranks(ranks, ks) -> RankingMetrics:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise EmptyTestSetError("no users to evaluate")
    out = RankingMetrics(list(ks), users=int(ranks.size))
    for k in ks:
        hit = ranks <= k
        out.hit_rate[k] = float(hit.mean())
        out.ndcg[k] = float(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0).mean())
        # one held-out item per user: recall@k is the hit rate
        out.recall[k] = out.hit_rate[k]
    return out


def rank_eval(model, histories, ks=(10, 50, 100), candidate_mode="all", target="test",
              n_sampled=100, seed=0, batch_size=512) -> RankingMetrics:
    """Rank each user's held-out item against candidates by ``embedding . item``.

    ``model`` is a fitted ``DMANRecommender`` (or anything with
    ``user_embeddings(histories)`` and ``item_embeddings()``).  ``target`` is
    ``"test"`` (history = training items + validation item) or ``"valid"``.
    In ``"all"`` mode every item the user has not interacted with is a
    negative; ``"sampled"`` draws ``n_sampled`` such negatives per user.
    """
    if candidate_mode not in ("all", "sampled"):
        raise ValueError(f"unknown candidate mode {candidate_mode!r}")
    if not histories:
        raise EmptyTestSetError("no users to evaluate")
    if target == "test":
        inputs = [h.with_appended(h.valid_item) for h in histories]
        targets = np.array([h.test_item for h in histories])
    elif target == "valid":
        inputs = list(histories)
        targets = np.array([h.valid_item for h in histories])
    else:
        raise ValueError(f"unknown target {target!r}")
    emb = model.user_embeddings(inputs, batch_size=batch_size)
    items = model.item_embeddings()
    seen = [h.items() for h in inputs]
    rng = make_rng(seed, 7)
    ranks = np.empty(len(inputs), dtype=np.int64)
    for lo in range(0, len(inputs), batch_size):
        hi = min(lo + batch_size, len(inputs))
        scores = emb[lo:hi] @ items.T
        if candidate_mode == "all":
            ranks[lo:hi] = target_ranks(scores, targets[lo:hi], seen[lo:hi])
        else:
            for u in range(lo, hi):
                ranks[u] = _sampled_rank(scores[u - lo], targets[u], seen[u], n_sampled, rng)
    return metrics_from_ranks(ranks, ks)


def _sampled_rank(scores, target, seen, n, rng):
    from .data import sample_negatives

    negs = sample_negatives(rng, len(scores) - 1, np.append(seen, target), n)
    cand = np.append(target, negs)
    s = scores[cand]
    better = (s > s[0]) | ((s == s[0]) & (cand < target))
    return int(better.sum()) + 1


@dataclass
class BenchReport:
    variant: str
    history_segments: int
    seconds_per_1024_users: float
    scores_computed: int
    users: int = 1024
    repeats: int = 5

    def line(self):
        return (f"{self.variant}\tN={self.history_segments}\t"
                f"{self.seconds_per_1024_users:.4f}s/1024users\t"
                f"scores/user={self.scores_computed}")


def synthetic_histories(n_users, n_segments, T, n_items, seed):
    rng = make_rng(seed, 11)
    return rng.integers(1, n_items + 1, size=(n_users, n_segments, T))


def efficiency_bench(model, variants=("dman", "full_scan"), history_segments=(4, 16, 64),
                     users=1024, repeats=5, seed=0, chunk=128, score_budget=1 << 24,
                     clock=time.perf_counter):
    """Median wall time of the batched inference forward pass per (variant, N).

    Memory-based variants are timed on the final segment only, with their
    state (cache + memory) prepared beforehand outside the timer; the
    full-scan variant attends over the entire flattened history, in chunks of
    at most ``chunk`` users and ``score_budget`` logits per layer so long
    histories fit in memory.  One warm-up run precedes ``repeats`` timed runs.
    """
    reports = []
    cfg = model.config
    for n in history_segments:
        hist = synthetic_histories(users, n, cfg.window_t, model.params.n_items, seed + n)
        for variant in variants:
            clone = model.with_variant(variant)
            if variant == "full_scan":
                flat = hist.reshape(users, -1)
                rows = max(1, min(chunk, score_budget // flat.shape[1] ** 2))
                def run():
                    for lo in range(0, users, rows):
                        clone.full_scan_embed(flat[lo:lo + rows])
            else:
                state = clone.build_state(hist[:, :-1])
                last = hist[:, -1]
                def run():
                    clone.infer(state, last)
            run()
            times = []
            for _ in range(repeats):
                t0 = clock()
                run()
                times.append(clock() - t0)
            per_1024 = float(np.median(times)) * 1024.0 / users
            reports.append(BenchReport(variant, n, per_1024,
                                       attention_score_count(variant, cfg.layers, cfg.window_t,
                                                             cfg.memory_slots, n),
                                       users, repeats))
    return reports
