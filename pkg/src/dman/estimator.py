"""scikit-learn style wrapper around :class:`~dman.model.DMAN`."""
from __future__ import annotations

import logging
from collections import defaultdict

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .autodiff import make_rng
from .data import histories_by_length
from .evaluation import rank_eval
from .model import DMAN, ModelConfig, UserState
from .validation import check_histories

logger = logging.getLogger(__name__)


class DMANRecommender(BaseEstimator):
    """Next-item recommender over long behaviour sequences.

    ``fit`` takes a behaviour log (``BehaviorLog`` or ``(n, 3)`` array of
    user, item, timestamp) or pre-segmented histories, holds out each
    user's last two items, and trains segment by segment.  ``transform``
    maps logs to one user embedding per user, ``predict`` returns top-k item
    ids, and ``score`` is HR@10 on the held-out test items.
    """

    def __init__(self, embed_dim=128, window_t=20, memory_slots=8, layers=2, neg_samples=5,
                 routing_iters=3, attention_scale=True, variant="dman", lr=0.001,
                 batch_size=128, epochs=8, seed=0):
        self.embed_dim = embed_dim
        self.window_t = window_t
        self.memory_slots = memory_slots
        self.layers = layers
        self.neg_samples = neg_samples
        self.routing_iters = routing_iters
        self.attention_scale = attention_scale
        self.variant = variant
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def _config(self):
        return ModelConfig(**self.get_params())

    def fit(self, X, y=None, n_items=None):
        config = self._config()
        histories = check_histories(X, self.window_t, split=True)
        if n_items is None:
            n_items = max(int(max(h.segments.max(), h.valid_item or 0, h.test_item or 0))
                          for h in histories)
        self.model_ = DMAN.create(config, n_items)
        self.n_items_ = n_items
        self.histories_ = histories
        self.loss_log_ = []
        self.optimizers_ = self.model_.make_optimizers()
        rng = make_rng(config.seed, 2)
        for epoch in range(config.epochs):
            self.loss_log_.extend(self._run_epoch(epoch, histories, rng))
        return self

    def _run_epoch(self, epoch, histories, rng):
        model = self.model_
        main_opt, route_opt = self.optimizers_
        groups = histories_by_length(histories)
        batches = []
        for n in sorted(groups):
            idx = rng.permutation(groups[n])
            batches.extend(idx[lo:lo + self.batch_size]
                           for lo in range(0, len(idx), self.batch_size))
        sums = defaultdict(lambda: [0.0, 0.0, 0])
        for b in rng.permutation(len(batches)):
            batch = batches[b]
            segs = np.stack([histories[i].segments for i in batch])
            tgts = np.stack([histories[i].targets() for i in batch])
            state = UserState()
            for n in range(segs.shape[1]):
                main, aux, state = model.train_step(state, segs[:, n], tgts[:, n], rng,
                                                    main_opt, route_opt)
                acc = sums[n]
                acc[0] += main
                acc[1] += aux
                acc[2] += 1
        rows = [(epoch, n, s[0] / s[2], s[1] / s[2]) for n, s in sorted(sums.items())]
        for r in rows:
            logger.debug("epoch %d segment %d main %.5f aux %.5f", *r)
        return rows

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("DMANRecommender is not fitted yet; call fit first")

    # -- embeddings ---------------------------------------------------------

    def user_embeddings(self, histories, batch_size=512) -> np.ndarray:
        """Embedding after the full (un-split) history of each ``SegmentedHistory``."""
        self._check_fitted()
        out = np.empty((len(histories), self.embed_dim))
        for n, idx in histories_by_length(histories).items():
            for lo in range(0, len(idx), batch_size):
                chunk = idx[lo:lo + batch_size]
                segs = np.stack([histories[i].segments for i in chunk])
                out[chunk] = self.model_.encode(segs)
        return out

    def item_embeddings(self) -> np.ndarray:
        """Item table including the padding row 0."""
        self._check_fitted()
        return self.model_.params["item_emb"].value

    def transform(self, X) -> np.ndarray:
        hist = check_histories(X, self.window_t, split=False)
        return self.user_embeddings(hist)

    def predict(self, X, k=10, exclude_seen=True) -> np.ndarray:
        """Top-``k`` item ids per user (rows follow ascending user id)."""
        hist = check_histories(X, self.window_t, split=False)
        scores = self.user_embeddings(hist) @ self.item_embeddings().T
        scores[:, 0] = -np.inf
        if exclude_seen:
            for u, h in enumerate(hist):
                scores[u, h.items()] = -np.inf
        # stable sort on negated score keeps ascending-id tie-break
        return np.argsort(-scores, axis=1, kind="stable")[:, :k]

    def evaluate(self, X=None, ks=(10, 50, 100), candidate_mode="all", target="test"):
        self._check_fitted()
        hist = self.histories_ if X is None else check_histories(X, self.window_t, split=True)
        return rank_eval(self, hist, ks, candidate_mode, target, seed=self.seed)

    def score(self, X, y=None):
        return self.evaluate(X, ks=(10,)).hit_rate[10]

    # -- persistence --------------------------------------------------------

    def save(self, path, include_optimizer=True):
        from . import checkpoint

        self._check_fitted()
        checkpoint.save(path, self.model_, self.optimizers_ if include_optimizer else None)

    @classmethod
    def load(cls, path):
        """Fitted estimator from a checkpoint (training histories are not stored)."""
        from . import checkpoint

        model, optimizers, _, _ = checkpoint.load(path)
        est = cls(**model.config.to_dict())
        est.model_ = model
        est.n_items_ = model.params.n_items
        est.histories_ = []
        est.loss_log_ = []
        est.optimizers_ = optimizers if optimizers is not None else model.make_optimizers()
        return est
