"""External per-user memory: FIFO baseline and dynamic-routing abstraction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import readout
from .autodiff import Tensor, squash  # noqa: F401 - squash is part of this module's surface


class SequencingError(RuntimeError):
    """State advanced out of order."""


@dataclass
class MemoryState:
    """Memory matrices for levels ``0..L-1``; each is ``(..., m, D)`` and tape-free."""

    levels: list
    segments_fused: int = 0

    def copy(self) -> "MemoryState":
        return MemoryState([np.array(m) for m in self.levels], self.segments_fused)


@dataclass
class RoutingTrace:
    """Couplings and logits recorded per routing iteration (for inspection/tests)."""

    couplings: list = field(default_factory=list)
    logits: list = field(default_factory=list)


def fifo_update(memory, incoming) -> np.ndarray:
    """Append ``incoming`` rows and keep the newest ``m``.

    ``memory`` may be None for an empty memory, in which case the result is
    left-padded with zero rows.
    """
    incoming = np.asarray(incoming, dtype=np.float64)
    if memory is None:
        raise ValueError("fifo_update needs a memory array (use zeros for an empty memory)")
    memory = np.asarray(memory, dtype=np.float64)
    m = memory.shape[-2]
    if m < 1:
        raise ValueError("memory needs at least one slot")
    if memory.shape[:-2] != incoming.shape[:-2]:
        memory = np.broadcast_to(memory, incoming.shape[:-2] + memory.shape[-2:])
    return np.concatenate([memory, incoming], axis=-2)[..., -m:, :].copy()


def empty_memory(m, d, batch_shape=()) -> np.ndarray:
    return np.zeros(tuple(batch_shape) + (m, d))


def dynamic_routing(primary, weights, iters=3, accumulate_logits=False, trace=None) -> Tensor:
    """Route ``P`` primary capsules into ``m`` interest capsules.

    ``primary`` is ``(..., P, D)`` and ``weights`` is ``(m, D, D)``: one
    transform per interest capsule, shared across primary capsules.  Logits
    start at zero; each iteration takes couplings as a softmax over interest
    capsules, forms the coupled sum of predictions, squashes it, then sets the
    logits to the agreement ``xbar_j . W_j x_i`` (added to the previous logits
    instead when ``accumulate_logits``).  Returns ``(..., m, D)``; gradients
    flow through every iteration.
    """
    if iters < 1:
        raise ValueError("routing needs at least one iteration")
    primary = primary if isinstance(primary, Tensor) else ad.constant(primary)
    weights = weights if isinstance(weights, Tensor) else ad.constant(weights)
    m, d = weights.shape[0], weights.shape[-1]
    lead = primary.shape[:-2]
    P = primary.shape[-2]
    # W_j is shared over i, so sum_i c_ji W_j x_i = W_j (sum_i c_ji x_i) and
    # xbar_j . W_j x_i = (W_j^T xbar_j) . x_i; the (m, P, D) predictions never materialise.
    primary_t = ad.transpose(primary)
    logits = ad.constant(np.zeros(lead + (m, P)))
    out = None
    for it in range(iters):
        couplings = ad.softmax_rows(logits, axis=-2)
        if trace is not None:
            trace.couplings.append(couplings.value.copy())
            trace.logits.append(logits.value.copy())
        pooled = ad.reshape(ad.matmul(couplings, primary), lead + (m, 1, d))
        s = ad.reshape(ad.matmul(pooled, ad.transpose(weights)), lead + (m, d))
        out = ad.squash(s)
        if it == iters - 1:
            break
        back = ad.reshape(ad.matmul(ad.reshape(out, lead + (m, 1, d)), weights), lead + (m, d))
        agreement = ad.matmul(back, primary_t)
        logits = ad.add(logits, agreement) if accumulate_logits else agreement
    return out


def routing_primaries(old_memory, prev_hidden) -> np.ndarray:
    """Old memory rows followed by the previous segment's hidden rows."""
    old_memory = np.asarray(old_memory, dtype=np.float64)
    prev_hidden = np.asarray(prev_hidden, dtype=np.float64)
    if old_memory.shape[:-2] != prev_hidden.shape[:-2]:
        old_memory = np.broadcast_to(old_memory, prev_hidden.shape[:-2] + old_memory.shape[-2:])
    return np.concatenate([old_memory, prev_hidden], axis=-2)


def update_memory(state: MemoryState, prev_hidden, routing_weights, iters=3,
                  use_fifo=False, accumulate_logits=False):
    """Fuse each level's previous-segment hidden state into its memory.

    ``prev_hidden[l]`` is the cached hidden state at depth ``l`` for
    ``l = 0..L-1``.  Returns ``(new_state, new_memory_tensors)``; the state
    holds detached arrays while the tensors keep the routing graph for the
    reconstruction loss (None entries for the FIFO variant).
    """
    if prev_hidden is None:
        raise SequencingError("memory update before any segment has been processed")
    levels, tensors = [], []
    for lvl, old in enumerate(state.levels):
        h = getattr(prev_hidden[lvl], "value", prev_hidden[lvl])
        if use_fifo:
            levels.append(fifo_update(old, h))
            tensors.append(None)
        else:
            new = dynamic_routing(routing_primaries(old, h), routing_weights[lvl], iters,
                                  accumulate_logits)
            levels.append(new.value.copy())
            tensors.append(new)
    return MemoryState(levels, state.segments_fused + 1), tensors


def reconstruction_loss(query, old_memory, prev_hidden, new_memory, frozen,
                        attention_scale=True) -> Tensor:
    """Squared Frobenius gap between readouts over old content and over new memory.

    ``frozen`` holds ``(W_Q, W_K, W_V)`` of the recurrent layer, taken as
    constants.  ``query``, ``old_memory`` and ``prev_hidden`` are detached;
    only ``new_memory`` may carry gradient.
    """
    q_w, k_w, v_w = (ad.constant(getattr(w, "value", w)) for w in frozen)
    q = ad.constant(getattr(query, "value", query))
    old = ad.constant(routing_primaries(getattr(old_memory, "value", old_memory),
                                        getattr(prev_hidden, "value", prev_hidden)))
    new = new_memory if isinstance(new_memory, Tensor) else ad.constant(new_memory)
    target = readout(q, old, q_w, k_w, v_w, attention_scale)
    approx = readout(q, new, q_w, k_w, v_w, attention_scale)
    return ad.squared_frobenius(ad.sub(target, approx))
