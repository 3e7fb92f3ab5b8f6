"""Single-file checkpoints: a readable text header followed by raw float64 payload.

Layout::

    DMAN-CHECKPOINT
    version 1
    config {"embed_dim": 32, ...}
    meta {"n_items": 5000, ...}
    array item_emb 5001x32 0
    array pos_emb 20x32 1280256
    ...
    digest sha256:<hex of header lines above + payload>
    end
    <little-endian float64 payload, row-major, in header order>
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .memory import MemoryState
from .model import DMAN, ModelConfig, ModelParams, UserState
from . import autodiff as ad

MAGIC = "DMAN-CHECKPOINT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


def _shape_tag(shape):
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(tag):
    return () if tag == "scalar" else tuple(int(s) for s in tag.split("x"))


def write_arrays(path, arrays: dict, config: dict, meta=None):
    """Write named arrays with a JSON config/meta header."""
    header = [MAGIC, f"version {FORMAT_VERSION}",
              "config " + json.dumps(config, sort_keys=True),
              "meta " + json.dumps(meta or {}, sort_keys=True)]
    chunks, offset = [], 0
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"array name {name!r} contains whitespace")
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        header.append(f"array {name} {_shape_tag(np.shape(arr))} {offset}")
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    body = ("\n".join(header) + "\n").encode("utf-8")
    digest = hashlib.sha256(body + payload).hexdigest()
    out = body + f"digest sha256:{digest}\nend\n".encode("utf-8") + payload
    Path(path).write_bytes(out)


def read_arrays(path):
    """Inverse of :func:`write_arrays`; returns ``(arrays, config, meta)``."""
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    lines = raw[:cut].decode("utf-8").split("\n")
    payload = raw[cut + len(marker):]
    if len(lines) < 5 or not lines[-1].startswith("digest sha256:"):
        raise CheckpointError(f"{path}: header lacks a digest line")
    version = lines[1].split(" ", 1)
    if version[0] != "version" or version[1:] != [str(FORMAT_VERSION)]:
        raise CheckpointError(f"{path}: unsupported format {lines[1]!r}, expected version {FORMAT_VERSION}")
    body = ("\n".join(lines[:-1]) + "\n").encode("utf-8")
    if hashlib.sha256(body + payload).hexdigest() != lines[-1][len("digest sha256:"):]:
        raise CheckpointError(f"{path}: digest mismatch (file corrupted or edited)")
    try:
        config = json.loads(lines[2].split(" ", 1)[1])
        meta = json.loads(lines[3].split(" ", 1)[1])
    except (IndexError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad config/meta header") from exc
    arrays = {}
    for line in lines[4:-1]:
        kind, name, tag, offset = line.split(" ")
        if kind != "array":
            raise CheckpointError(f"{path}: unexpected header line {line!r}")
        shape = _parse_shape(tag)
        count = int(np.prod(shape)) if shape else 1
        start = int(offset)
        buf = payload[start:start + 8 * count]
        if len(buf) != 8 * count:
            raise CheckpointError(f"{path}: payload truncated at {name}")
        arrays[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    return arrays, config, meta


def save(path, model: DMAN, optimizers=None, states=None, meta=None):
    """Parameters, config, optionally Adam buffers and a batch ``UserState``."""
    arrays = {f"param.{k}": v for k, v in model.params.snapshot().items()}
    if optimizers is not None:
        main, route = optimizers
        arrays.update(main.state_arrays("adam.main"))
        arrays.update(route.state_arrays("adam.route"))
    if states is not None:
        arrays["state.segments_done"] = np.array([float(states.segments_done)])
        for i, c in enumerate(states.cache or []):
            arrays[f"state.cache.{i}"] = c
        if states.memory is not None:
            arrays["state.memory.fused"] = np.array([float(states.memory.segments_fused)])
            for i, m in enumerate(states.memory.levels):
                arrays[f"state.memory.{i}"] = m
    info = {"n_items": model.params.n_items, **(meta or {})}
    write_arrays(path, arrays, model.config.to_dict(), info)


def load(path):
    """Returns ``(model, optimizers or None, state or None, meta)``."""
    arrays, config, meta = read_arrays(path)
    try:
        cfg = ModelConfig.from_dict(config)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config: {exc}") from exc
    params = ModelParams({k[len("param."):]: ad.parameter(v.copy())
                          for k, v in arrays.items() if k.startswith("param.")})
    model = DMAN(cfg, params)
    optimizers = None
    if "adam.main.t" in arrays:
        optimizers = model.make_optimizers()
        optimizers[0].load_state_arrays("adam.main", arrays)
        optimizers[1].load_state_arrays("adam.route", arrays)
    state = None
    if "state.segments_done" in arrays:
        cache = [arrays[f"state.cache.{i}"].copy() for i in range(cfg.layers + 1)
                 if f"state.cache.{i}" in arrays] or None
        memory = None
        if "state.memory.fused" in arrays:
            memory = MemoryState([arrays[f"state.memory.{i}"].copy() for i in range(cfg.layers)],
                                 int(arrays["state.memory.fused"][0]))
        state = UserState(cache, memory, int(arrays["state.segments_done"][0]))
    return model, optimizers, state, meta
