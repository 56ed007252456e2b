"""Flat binary checkpoints for ToyLM.

Layout: a fixed little-endian header followed by the flattened parameters as
little-endian float64. The vocabulary travels in a JSON sidecar
(``<path>.vocab.json``).
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointMismatch, ModelLoadError
from .model import ToyLM, ToyLMConfig
from .vocab import Vocab

MAGIC = b"TOYLMCK\0"
VERSION = 1
# magic, version, vocab, hidden, seed, layers, heads, mlp, context, n_params
_HEADER = struct.Struct("<8sIIIqIIIIQ")


def _vocab_path(path) -> Path:
    return Path(str(path) + ".vocab.json")


def save_checkpoint(model: ToyLM, path, vocab: Vocab | None = None) -> None:
    cfg = model.cfg
    flat = model.flat_parameters().astype("<f8")
    header = _HEADER.pack(
        MAGIC, VERSION, cfg.vocab_size, cfg.hidden, cfg.seed,
        cfg.n_layers, cfg.n_heads, cfg.mlp_hidden, cfg.context_limit, flat.size,
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(flat.tobytes())
    os.replace(tmp, path)
    if vocab is not None:
        vocab.save(_vocab_path(path))


def read_header(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise ModelLoadError(f"{path}: truncated header")
    magic, version, vocab, hidden, seed, layers, heads, mlp, ctx, n = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise CheckpointMismatch(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointMismatch(f"{path}: unsupported version {version}")
    return dict(
        vocab_size=vocab, hidden=hidden, seed=seed, n_layers=layers,
        n_heads=heads, mlp_hidden=mlp, context_limit=ctx, n_params=n,
    )


def load_checkpoint(path, expect: ToyLMConfig | None = None) -> tuple[ToyLM, Vocab | None]:
    """Load a checkpoint; ``expect`` pins vocab size, hidden size and seed."""
    h = read_header(path)
    if expect is not None:
        for key in ("vocab_size", "hidden", "seed"):
            if h[key] != getattr(expect, key):
                raise CheckpointMismatch(f"{path}: {key}={h[key]} but expected {getattr(expect, key)}")
    vocab = Vocab.load(_vocab_path(path)) if _vocab_path(path).exists() else None
    kwargs = {k: h[k] for k in ("vocab_size", "hidden", "seed", "n_layers", "n_heads", "mlp_hidden", "context_limit")}
    if vocab is not None:
        kwargs.update(bos_id=vocab.bos_id, eos_id=vocab.eos_id, pad_id=vocab.pad_id)
    model = ToyLM(ToyLMConfig(**kwargs))
    if model.n_params() != h["n_params"]:
        raise CheckpointMismatch(f"{path}: header declares {h['n_params']} parameters")
    flat = np.fromfile(path, dtype="<f8", offset=_HEADER.size)
    if flat.size != h["n_params"]:
        raise ModelLoadError(f"{path}: expected {h['n_params']} floats, found {flat.size}")
    model.load_flat(flat)
    return model, vocab
