"""DMAN assembly: layer stack, gated fusion, sampled softmax and the two-phase update."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .attention import (
    AttentionLayerParams,
    long_term_attention_layer,
    recurrent_attention_layer,
)
from .autodiff import Tensor
from .memory import MemoryState, SequencingError, fifo_update, reconstruction_loss, update_memory

VARIANTS = ("dman", "xl", "fifo", "nran", "full_scan")


class ColdStartError(LookupError):
    pass


class TrainingError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    embed_dim: int = 128
    window_t: int = 20
    memory_slots: int = 8
    layers: int = 2
    neg_samples: int = 5
    routing_iters: int = 3
    attention_scale: bool = True
    variant: str = "dman"
    lr: float = 0.001
    batch_size: int = 128
    epochs: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("embed_dim", "window_t", "memory_slots", "layers", "neg_samples",
                     "routing_iters", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @property
    def uses_memory(self):
        return self.variant in ("dman", "fifo", "nran")

    @property
    def uses_routing(self):
        return self.variant in ("dman", "nran")


class ModelParams:
    """Named trainable tensors.

    Naming: ``item_emb`` (|V|+1 x D, row 0 = padding), ``pos_emb`` (T x D),
    ``rec.{l}.{q,k,v}`` / ``lt.{l}.{q,k,v}`` for layers ``l = 1..L``,
    ``gate.short`` / ``gate.long``, and per memory level ``l = 0..L-1``:
    ``route.{l}`` (m x D x D) and ``mem0.{l}`` (m x D).
    """

    def __init__(self, tensors: dict):
        self.tensors = dict(tensors)
        for name, t in self.tensors.items():
            t.name = name

    @classmethod
    def init(cls, config: ModelConfig, n_items: int, rng: np.random.Generator):
        d, T, m, L = config.embed_dim, config.window_t, config.memory_slots, config.layers
        s = 1.0 / np.sqrt(d)
        t = {"item_emb": rng.normal(0.0, s, (n_items + 1, d))}
        t["item_emb"][0] = 0.0
        t["pos_emb"] = rng.normal(0.0, 0.1 * s, (T, d))
        for l in range(1, L + 1):
            for path in ("rec", "lt"):
                for w in "qkv":
                    t[f"{path}.{l}.{w}"] = np.eye(d) + rng.normal(0.0, 0.5 * s, (d, d))
        t["gate.short"] = rng.normal(0.0, s, (d, d))
        t["gate.long"] = rng.normal(0.0, s, (d, d))
        for l in range(L):
            t[f"route.{l}"] = np.eye(d)[None] + rng.normal(0.0, 0.5 * s, (m, d, d))
            t[f"mem0.{l}"] = rng.normal(0.0, s, (m, d))
        return cls({k: ad.parameter(v) for k, v in t.items()})

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def names(self):
        return list(self.tensors)

    @property
    def n_items(self):
        return self.tensors["item_emb"].shape[0] - 1

    def layer(self, l) -> AttentionLayerParams:
        p = self.tensors
        return AttentionLayerParams(p[f"rec.{l}.q"], p[f"rec.{l}.k"], p[f"rec.{l}.v"],
                                    p[f"lt.{l}.q"], p[f"lt.{l}.k"], p[f"lt.{l}.v"])

    def routing(self, level) -> Tensor:
        return self.tensors[f"route.{level}"]

    def routing_names(self):
        return [n for n in self.tensors if n.startswith("route.")]

    def main_names(self):
        return [n for n in self.tensors if not n.startswith("route.")]

    def copy(self) -> "ModelParams":
        return ModelParams({k: ad.parameter(v.value.copy()) for k, v in self.tensors.items()})

    def snapshot(self) -> dict:
        return {k: v.value.copy() for k, v in self.tensors.items()}


@dataclass
class UserState:
    """Per-user (or batch-of-users) recurrence state.

    ``cache[l]`` is the previous segment's hidden state at depth ``l`` (0 =
    embedded input) for ``l = 0..L``; ``memory`` is None until the first
    fusion, in which case readers fall back to the learned initial memory.
    """

    cache: list | None = None
    memory: MemoryState | None = None
    segments_done: int = 0

    def copy(self) -> "UserState":
        return UserState(None if self.cache is None else [np.array(c) for c in self.cache],
                         None if self.memory is None else self.memory.copy(),
                         self.segments_done)


@dataclass
class SegmentOutput:
    user_emb: Tensor
    short: Tensor
    long: Tensor | None
    hidden: list = field(default_factory=list)


class Adam:
    """Adam over a fixed list of tensors (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self, prefix):
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"{prefix}.m.{p.name}"] = m
            out[f"{prefix}.v.{p.name}"] = v
        return out

    def load_state_arrays(self, prefix, arrays):
        self.t = int(arrays[f"{prefix}.t"][0])
        for i, p in enumerate(self.params):
            self.m[i] = np.array(arrays[f"{prefix}.m.{p.name}"], dtype=np.float64)
            self.v[i] = np.array(arrays[f"{prefix}.v.{p.name}"], dtype=np.float64)


def gate_fuse(short, long, w_short, w_long) -> Tensor:
    """``G * short + (1 - G) * long`` with ``G = sigmoid(short W_s + long W_l)``; no bias."""
    if short.shape != long.shape:
        raise ad.DimensionError(f"gate inputs differ in shape: {short.shape} vs {long.shape}")
    g = ad.sigmoid(ad.add(ad.matmul(short, w_short), ad.matmul(long, w_long)))
    return ad.add(ad.mul(g, short), ad.mul(ad.sub(1.0, g), long))


def sampled_softmax_loss(user_emb, targets, negatives, item_emb) -> Tensor:
    """Summed ``-log softmax`` of the target among ``[target] + negatives``.

    ``user_emb`` is ``(..., D)``, ``targets`` ``(...)`` and ``negatives``
    ``(..., k)``.  Positions whose target is padding (0) contribute nothing.
    """
    targets = np.asarray(targets, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    cands = np.concatenate([targets[..., None], negatives], axis=-1)
    lead = cands.shape
    d = user_emb.shape[-1]
    cand_emb = ad.embed(item_emb, cands)                       # (..., 1+k, D)
    u = ad.reshape(user_emb, lead[:-1] + (d, 1))
    scores = ad.reshape(ad.matmul(cand_emb, u), lead)          # (..., 1+k)
    per_pos = ad.sub(ad.logsumexp(scores, axis=-1), ad.getitem(scores, (Ellipsis, 0)))
    valid = (targets != 0).astype(np.float64)
    return ad.sum(ad.mul(per_pos, valid))


def uniform_negatives(rng, n_items, targets, k) -> np.ndarray:
    """``k`` draws per target, uniform over ``1..n_items`` minus the target.

    Draws are independent (with replacement); see ``data.sample_negatives``
    for the distinct-draw sampler.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if n_items < 2:
        raise ValueError("need at least two items to draw negatives")
    draws = rng.integers(1, n_items, size=targets.shape + (k,))
    # shift past the target: uniform over the n_items - 1 non-target ids
    draws += draws >= np.maximum(targets, 1)[..., None]
    return draws


class DMAN:
    """Parameters plus configuration, with the per-segment computations."""

    def __init__(self, config: ModelConfig, params: ModelParams):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, n_items: int, rng=None):
        rng = ad.make_rng(config.seed, 0) if rng is None else rng
        return cls(config, ModelParams.init(config, n_items, rng))

    def with_variant(self, variant) -> "DMAN":
        """Same parameters, different variant (e.g. full-scan inference of a trained model)."""
        cfg = ModelConfig.from_dict({**self.config.to_dict(), "variant": variant})
        return DMAN(cfg, self.params)

    # -- forward -----------------------------------------------------------

    def embed_segment(self, segment) -> Tensor:
        x = ad.embed(self.params["item_emb"], segment)
        return ad.add(x, self.params["pos_emb"])

    def memory_level(self, state: UserState, level):
        if state.memory is None:
            return self.params[f"mem0.{level}"]
        return ad.constant(state.memory.levels[level])

    def forward_segment(self, state: UserState, segment, index=None) -> SegmentOutput:
        """Run one segment (``(..., T)`` item ids) against ``state`` without mutating it."""
        cfg = self.config
        segment = np.asarray(segment, dtype=np.int64)
        if segment.shape[-1] != cfg.window_t:
            raise ValueError(f"segment length {segment.shape[-1]} != window_t {cfg.window_t}")
        if index is not None and index != state.segments_done:
            raise SequencingError(f"expected segment {state.segments_done}, got {index}")
        x = self.embed_segment(segment)
        use_context = cfg.variant != "nran" and state.cache is not None
        hidden = [x]
        h = x
        for l in range(1, cfg.layers + 1):
            ctx = state.cache[l - 1] if use_context else None
            h = recurrent_attention_layer(h, ctx, self.params.layer(l), cfg.attention_scale)
            hidden.append(h)
        if not cfg.uses_memory:
            return SegmentOutput(h, h, None, hidden)
        q = x
        for l in range(1, cfg.layers + 1):
            q = long_term_attention_layer(q, self.memory_level(state, l - 1),
                                          self.params.layer(l), cfg.attention_scale)
        fused = gate_fuse(h, q, self.params["gate.short"], self.params["gate.long"])
        return SegmentOutput(fused, h, q, hidden)

    def fuse_memory(self, state: UserState, with_graph=False):
        """Fold ``state.cache`` into memory; returns ``(MemoryState, routing tensors, old levels)``."""
        cfg = self.config
        if state.cache is None:
            raise SequencingError("memory update before any segment has been processed")
        lead = state.cache[0].shape[:-2]
        if state.memory is None:
            if cfg.variant == "fifo":
                old = [np.zeros(lead + (cfg.memory_slots, cfg.embed_dim))
                       for _ in range(cfg.layers)]
            else:
                old = [np.broadcast_to(self.params[f"mem0.{l}"].value,
                                       lead + (cfg.memory_slots, cfg.embed_dim)).copy()
                       for l in range(cfg.layers)]
            current = MemoryState(old, 0)
        else:
            current = state.memory
        prev = state.cache[:cfg.layers]
        if cfg.variant == "fifo":
            new = MemoryState([fifo_update(o, p) for o, p in zip(current.levels, prev)],
                              current.segments_fused + 1)
            return new, [None] * cfg.layers, current.levels
        weights = [self.params.routing(l) if with_graph else ad.constant(self.params.routing(l).value)
                   for l in range(cfg.layers)]
        new, tensors = update_memory(current, prev, weights, cfg.routing_iters)
        return new, tensors, current.levels

    def aux_loss(self, query_hidden, old_levels, prev_hidden, new_tensors) -> Tensor:
        """Reconstruction loss summed over memory levels.

        Level ``l`` uses the current segment's hidden at depth ``l`` as query
        and the frozen recurrent projections of layer ``l + 1``.
        """
        total = None
        for lvl in range(self.config.layers):
            layer = self.params.layer(lvl + 1)
            term = reconstruction_loss(query_hidden[lvl], old_levels[lvl], prev_hidden[lvl],
                                       new_tensors[lvl],
                                       (layer.rec_q.value, layer.rec_k.value, layer.rec_v.value),
                                       self.config.attention_scale)
            total = term if total is None else ad.add(total, term)
        return total

    def advance(self, state: UserState, out: SegmentOutput, update=True) -> UserState:
        """Memory fusion of the cached segment (if any) then cache the new hidden states."""
        memory = state.memory
        if update and self.config.uses_memory and state.cache is not None:
            memory, _, _ = self.fuse_memory(state)
        return UserState([h.value.copy() for h in out.hidden], memory, state.segments_done + 1)

    # -- training ----------------------------------------------------------

    def make_optimizers(self):
        p = self.params
        main = Adam([p[n] for n in p.main_names()], lr=self.config.lr)
        route = Adam([p[n] for n in p.routing_names()], lr=self.config.lr)
        return main, route

    def train_step(self, state: UserState, segment, targets, rng, main_opt, route_opt,
                   negatives=None):
        """One segment for an aligned batch of users.

        Phase A: main loss, update everything except routing weights.
        Phase B: fuse the cached segment into memory, reconstruction loss,
        update routing weights only.  Phase C: cache this segment.
        Returns ``(main_loss, aux_loss, new_state)``; aux is 0.0 when no
        routing update happened.
        """
        cfg = self.config
        segment = np.asarray(segment, dtype=np.int64)
        batch = segment.shape[0] if segment.ndim > 1 else 1
        if negatives is None:
            negatives = uniform_negatives(rng, self.params.n_items, targets, cfg.neg_samples)

        main_opt.zero_grad()
        out = self.forward_segment(state, segment)
        main = ad.mul(sampled_softmax_loss(out.user_emb, targets, negatives,
                                           self.params["item_emb"]), 1.0 / batch)
        if not np.isfinite(main.value):
            raise TrainingError(self._diagnostics("main", main))
        ad.backward(main)
        main_opt.step()

        aux_value = 0.0
        memory = state.memory
        if cfg.uses_memory and state.cache is not None:
            route_opt.zero_grad()
            with_graph = cfg.uses_routing
            memory, tensors, old_levels = self.fuse_memory(state, with_graph=with_graph)
            if with_graph:
                aux = ad.mul(self.aux_loss([h.value for h in out.hidden], old_levels,
                                           state.cache, tensors), 1.0 / batch)
                if not np.isfinite(aux.value):
                    raise TrainingError(self._diagnostics("aux", aux))
                ad.backward(aux)
                route_opt.step()
                aux_value = float(aux.value)

        new_state = UserState([h.value.copy() for h in out.hidden], memory,
                              state.segments_done + 1)
        return float(main.value), aux_value, new_state

    def _diagnostics(self, which, loss):
        norms = {n: float(np.linalg.norm(t.grad)) for n, t in self.params.tensors.items()
                 if t.grad is not None}
        return f"non-finite {which} loss {loss.value}; grad norms {norms}"

    # -- inference ---------------------------------------------------------

    def encode(self, segments) -> np.ndarray:
        """User embeddings for aligned histories ``(B, N, T)``: replay, then read the last segment."""
        segments = np.asarray(segments, dtype=np.int64)
        if segments.ndim == 2:
            segments = segments[None]
        if self.config.variant == "full_scan":
            return self.full_scan_embed(segments.reshape(segments.shape[0], -1))
        state = self.build_state(segments[:, :-1])
        return self.infer(state, segments[:, -1])

    def build_state(self, segments) -> UserState:
        """Stream ``(B, N, T)`` segments through the model to get the state after them."""
        state = UserState()
        for n in range(segments.shape[1]):
            out = self.forward_segment(state, segments[:, n])
            state = self.advance(state, out)
        return state

    def infer(self, state: UserState, last_segment) -> np.ndarray:
        """Fused embedding at the last non-padding position of ``last_segment``."""
        last_segment = np.asarray(last_segment, dtype=np.int64)
        if not (last_segment != 0).any(axis=-1).all():
            raise ColdStartError("user with no observed items")
        out = self.forward_segment(state, last_segment)
        T = last_segment.shape[-1]
        pos = T - 1 - np.argmax((last_segment != 0)[..., ::-1], axis=-1)
        v = out.user_emb.value
        return np.take_along_axis(v, pos[..., None, None], axis=-2)[..., 0, :]

    def full_scan_embed(self, history) -> np.ndarray:
        """Causal attention over the whole flattened history ``(B, N*T)``; last position."""
        cfg = self.config
        history = np.asarray(history, dtype=np.int64)
        n = history.shape[-1]
        pos = np.arange(n) % cfg.window_t
        x = ad.add(ad.embed(self.params["item_emb"], history),
                   ad.constant(self.params["pos_emb"].value[pos]))
        h = x
        for l in range(1, cfg.layers + 1):
            h = recurrent_attention_layer(h, None, self.params.layer(l), cfg.attention_scale)
        return h.value[..., -1, :]

    def attention_scores(self, n_segments) -> int:
        """Attention logits computed per user at inference."""
        T, m, L = self.config.window_t, self.config.memory_slots, self.config.layers
        return attention_score_count(self.config.variant, L, T, m, n_segments)


def attention_score_count(variant, layers, T, m, n_segments) -> int:
    if variant == "full_scan":
        return layers * (n_segments * T) ** 2
    if variant == "xl":
        return layers * T * 2 * T
    if variant == "nran":
        return layers * T * (T + m)
    return layers * T * (2 * T + m)
