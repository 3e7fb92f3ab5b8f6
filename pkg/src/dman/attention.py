"""Segment-recurrent and memory-reading attention layers.

Inputs are ``(..., T, D)`` tensors (leading axes index users).  Projection
matrices are ``D x D`` and applied on the right as ``X @ W.T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class EmptyMemoryError(ValueError):
    pass


@dataclass
class AttentionLayerParams:
    """Projections for one layer: ``rec_*`` for the recurrent path, ``lt_*`` for the memory path."""

    rec_q: Tensor
    rec_k: Tensor
    rec_v: Tensor
    lt_q: Tensor
    lt_k: Tensor
    lt_v: Tensor

    def __post_init__(self):
        d = self.rec_q.shape[0]
        for t in self.tensors():
            if t.shape != (d, d):
                raise ad.DimensionError(f"attention projections must all be {d}x{d}, got {t.shape}")

    def tensors(self):
        return [self.rec_q, self.rec_k, self.rec_v, self.lt_q, self.lt_k, self.lt_v]

    def frozen(self) -> "AttentionLayerParams":
        """Detached copies, for losses that must not move these weights."""
        return AttentionLayerParams(*(ad.constant(t.value.copy()) for t in self.tensors()))


def causal_mask(T: int, context_len: int = 0) -> np.ndarray:
    """``T x (context_len + T)`` visibility; context columns come first and are always visible."""
    if T < 1:
        raise ValueError("T must be >= 1")
    own = np.tril(np.ones((T, T), dtype=bool))
    return np.concatenate([np.ones((T, context_len), dtype=bool), own], axis=1)


def _scale(d, attention_scale):
    return 1.0 / np.sqrt(d) if attention_scale else 1.0


def attend(q, k, v, mask=None, attention_scale=True) -> Tensor:
    """softmax(q k^T * scale) v, with an optional visibility mask."""
    s = _scale(q.shape[-1], attention_scale)
    if s != 1.0:
        q = q * s  # scaling q is cheaper than scaling the (T, keys) logits
    logits = ad.matmul(q, ad.transpose(k))
    return ad.matmul(ad.softmax_rows(logits, mask), v)


def recurrent_attention_layer(x, context, params: AttentionLayerParams,
                              attention_scale=True, causal=True) -> Tensor:
    """Self-attention over the current segment extended by a detached context.

    ``context`` is the previous segment's hidden state at the same depth (an
    array or tensor with T rows), or None on a user's first segment.  It is
    always cut from the tape.
    """
    x = ad.constant(x) if not isinstance(x, Tensor) else x
    T = x.shape[-2]
    if context is None or np.shape(getattr(context, "value", context))[-2] == 0:
        kv = x
        ctx_len = 0
    else:
        ctx = ad.stop_gradient(context)
        if ctx.shape[-2] != T:
            raise ad.DimensionError(f"context has {ctx.shape[-2]} rows, segment has {T}")
        if ctx.shape[:-2] != x.shape[:-2]:
            ctx = ad.constant(np.broadcast_to(ctx.value, x.shape[:-2] + ctx.shape[-2:]))
        kv = ad.concat_rows(ctx, x)
        ctx_len = T
    q = ad.matmul(x, ad.transpose(params.rec_q))
    k = ad.matmul(kv, ad.transpose(params.rec_k))
    v = ad.matmul(kv, ad.transpose(params.rec_v))
    mask = causal_mask(T, ctx_len) if causal else None
    return attend(q, k, v, mask, attention_scale)


def long_term_attention_layer(query, memory, params: AttentionLayerParams,
                              attention_scale=True) -> Tensor:
    """Query rows attend over unordered memory slots (no mask)."""
    memory = memory if isinstance(memory, Tensor) else ad.constant(memory)
    if memory.shape[-2] == 0:
        raise EmptyMemoryError("long-term attention needs at least one memory slot")
    q = ad.matmul(query, ad.transpose(params.lt_q))
    k = ad.matmul(memory, ad.transpose(params.lt_k))
    v = ad.matmul(memory, ad.transpose(params.lt_v))
    return attend(q, k, v, None, attention_scale)


def readout(query, keys_values, q_w, k_w, v_w, attention_scale=True) -> Tensor:
    """Unmasked attention readout with explicit projections (used by the reconstruction loss)."""
    q = ad.matmul(query, ad.transpose(q_w))
    k = ad.matmul(keys_values, ad.transpose(k_w))
    v = ad.matmul(keys_values, ad.transpose(v_w))
    return attend(q, k, v, None, attention_scale)
