"""Shared builders for the model-level tests."""
import numpy as np

from dman import autodiff as ad
from dman.model import DMAN, ModelConfig, ModelParams, UserState, sampled_softmax_loss


def tiny_config(**kw):
    base = dict(embed_dim=8, window_t=4, memory_slots=2, layers=2, neg_samples=3, lr=0.01,
                batch_size=2, epochs=1, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_batch(n_items=12, users=2, segments=3, T=4, seed=0):
    rng = np.random.default_rng(seed)
    segs = rng.integers(1, n_items + 1, size=(users, segments, T))
    segs[0, 0, 0] = 0  # one padded slot
    flat = segs.reshape(users, -1)
    tg = np.zeros_like(flat)
    tg[:, :-1] = flat[:, 1:]
    return segs, tg.reshape(segs.shape)


def full_loss_report(model: DMAN, segs, targets, seed=0, eps=1e-5, extended=False, probe=None):
    """grad_check of main + aux loss for segment 3 of a tiny batch.

    The state after segments 1 and 2 is fixed: segment 2's forward pass
    reads memory from the routing of segment 1's cache, segment 3 reads
    that memory as a constant (it is state), and the reconstruction loss
    routes segment 2's cache with the trainable routing weights.  Inputs
    the tape treats as constants (cached context, reconstruction query and
    frozen projections) are held fixed across perturbations.
    """
    rng = np.random.default_rng(seed)
    cfg = model.config
    state = UserState()
    for n in range(2):
        state = model.advance(state, model.forward_segment(state, segs[:, n]))
    negs = rng.integers(1, model.params.n_items + 1, size=targets[:, 2].shape + (cfg.neg_samples,))
    negs = np.where(negs == targets[:, 2][..., None], negs % model.params.n_items + 1, negs)
    query = [h.value.copy() for h in model.forward_segment(state, segs[:, 2]).hidden]
    frozen = ModelParams({k: ad.parameter(v.value.copy()) if not k.startswith("route.") else v
                          for k, v in model.params.tensors.items()})
    aux_model = DMAN(cfg, frozen)

    def f():
        out = model.forward_segment(state, segs[:, 2])
        main = sampled_softmax_loss(out.user_emb, targets[:, 2], negs, model.params["item_emb"])
        if not cfg.uses_routing:
            return main
        _, tensors, old = aux_model.fuse_memory(state, with_graph=True)
        return ad.add(main, aux_model.aux_loss(query, old, state.cache, tensors))

    if probe is not None:
        probe.append(f)
    return ad.grad_check(f, list(model.params), eps=eps, extended=extended)
