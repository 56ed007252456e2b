"""Scoring-model contract, the toy autoregressive network, and decoding.

Everything a metric, a loss or the preference builder needs from a language
model goes through three functions: ``score_sequence``, ``greedy_decode`` and
``sample``. They work on any object implementing :class:`ScoringModel`;
``ToyLM`` additionally exposes differentiable batch scoring for training.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..errors import ContextOverflow, NonPositiveTemperature

TEMPERATURE_FLOOR = 1e-6
DTYPE = torch.float64


@runtime_checkable
class ScoringModel(Protocol):
    vocab_size: int
    context_limit: int
    eos_id: int | None
    # harness consults this before scoring cases from several threads
    concurrent_safe: bool

    def next_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        """Log-distribution over the vocabulary for the token after ``prefix``."""
        ...


def _check_length(model: ScoringModel, n: int) -> None:
    if n > model.context_limit:
        raise ContextOverflow(n, model.context_limit)


def score_sequence(model: ScoringModel, context: Sequence[int], target: Sequence[int]) -> list[float]:
    """Per-token log P(target_i | context, target_<i)."""
    _check_length(model, len(context) + len(target))
    if not target:
        return []
    fast = getattr(model, "score_tokens", None)
    if fast is not None:
        return fast(context, target)
    out = []
    prefix = list(context)
    for t in target:
        out.append(float(model.next_logprobs(prefix)[t]))
        prefix.append(t)
    return out


def greedy_decode(model: ScoringModel, context: Sequence[int], max_new: int) -> list[int]:
    """Step-wise argmax; ties go to the lowest token id. The EOS token is not returned."""
    _check_length(model, len(context))
    prefix = list(context)
    out: list[int] = []
    for _ in range(max_new):
        if len(prefix) >= model.context_limit:
            break
        t = int(np.argmax(model.next_logprobs(prefix)))
        if model.eos_id is not None and t == model.eos_id:
            break
        out.append(t)
        prefix.append(t)
    return out


def sample(
    model: ScoringModel,
    context: Sequence[int],
    temperature: float,
    k: int,
    seed: int,
    max_new: int = 64,
    keep_eos: bool = False,
) -> list[list[int]]:
    """``k`` independent ancestral samples, reproducible from ``seed``.

    Temperatures below 1e-6 fall back to greedy decoding.
    """
    if temperature <= 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {temperature}")
    _check_length(model, len(context))
    if temperature < TEMPERATURE_FLOOR:
        g = greedy_decode(model, context, max_new)
        if keep_eos and model.eos_id is not None and len(g) < max_new:
            g = g + [model.eos_id]
        return [list(g) for _ in range(k)]
    rng = np.random.default_rng(seed)
    outs = []
    for _ in range(k):
        prefix = list(context)
        seq: list[int] = []
        for _ in range(max_new):
            if len(prefix) >= model.context_limit:
                break
            logits = model.next_logprobs(prefix) / temperature
            p = np.exp(logits - logits.max())
            p /= p.sum()
            t = int(rng.choice(len(p), p=p))
            if model.eos_id is not None and t == model.eos_id:
                if keep_eos:
                    seq.append(t)
                break
            seq.append(t)
            prefix.append(t)
        outs.append(seq)
    return outs


@dataclass(frozen=True)
class ToyLMConfig:
    vocab_size: int
    hidden: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mlp_hidden: int = 32
    context_limit: int = 192
    seed: int = 0
    bos_id: int = 1
    eos_id: int = 2
    pad_id: int = 0


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=DTYPE)[:, None]
    i = torch.arange(0, d, 2, dtype=DTYPE)[None, :]
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=DTYPE), i / d)
    pe = torch.zeros(n, d, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle)
    return pe


class Block(nn.Module):
    def __init__(self, cfg: ToyLMConfig):
        super().__init__()
        d = cfg.hidden
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.qkv = nn.Linear(d, 3 * d, bias=False, dtype=DTYPE)
        self.proj = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.fc1 = nn.Linear(d, cfg.mlp_hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(cfg.mlp_hidden, d, dtype=DTYPE)

    def forward(self, x: torch.Tensor, causal: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q = q.view(b, t, h, d // h).transpose(1, 2)
        k = k.view(b, t, h, d // h).transpose(1, 2)
        v = v.view(b, t, h, d // h).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // h)
        att = att.masked_fill(~causal[:t, :t], float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(y)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class ToyLM(nn.Module):
    """Two-layer causal transformer over a word-level toy vocabulary.

    Runs in float64 so finite-difference checks of any loss built on it are
    meaningful. Embeddings are tied to the output layer and positions are
    sinusoidal, keeping the parameter count under 50k at hidden size 64.
    A BOS token is prepended internally to every sequence.
    """

    concurrent_safe = True

    def __init__(self, cfg: ToyLMConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        self.embed = nn.Embedding(cfg.vocab_size, cfg.hidden, dtype=DTYPE)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.hidden, dtype=DTYPE)
        self.register_buffer("pos", sinusoidal_positions(cfg.context_limit + 1, cfg.hidden), persistent=False)
        self.register_buffer(
            "causal",
            torch.tril(torch.ones(cfg.context_limit + 1, cfg.context_limit + 1, dtype=torch.bool)),
            persistent=False,
        )
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif "ln" in name:
                    p.fill_(1.0)
                else:
                    std = 0.1 if name.startswith("embed") else 1.0 / math.sqrt(p.shape[-1])
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * std)

    vocab_size = property(lambda self: self.cfg.vocab_size)
    context_limit = property(lambda self: self.cfg.context_limit)
    eos_id = property(lambda self: self.cfg.eos_id)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """Next-token log-probabilities for every position of ``ids`` (B, T)."""
        t = ids.shape[1]
        x = self.embed(ids) + self.pos[:t]
        for blk in self.blocks:
            x = blk(x, self.causal)
        logits = self.ln_f(x) @ self.embed.weight.T
        return logits.log_softmax(dim=-1)

    def _with_bos(self, ids: Sequence[int]) -> list[int]:
        return [self.cfg.bos_id, *ids]

    def next_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        with torch.no_grad():
            x = torch.tensor([self._with_bos(prefix)], dtype=torch.long)
            return self(x)[0, -1].numpy()

    def score_tokens(self, context: Sequence[int], target: Sequence[int]) -> list[float]:
        with torch.no_grad():
            lp, _ = self.batch_target_logprobs([context], [target])
        return lp[0, : len(target)].tolist()

    def batch_target_logprobs(
        self, contexts: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Differentiable per-token target log-probs, right-padded.

        Returns ``(logprobs, mask)`` of shape (B, max target length); mask is
        1.0 on real target positions.
        """
        seqs = [self._with_bos(c) + list(t) for c, t in zip(contexts, targets)]
        for c, t in zip(contexts, targets):
            _check_length(self, len(c) + len(t))
        width = max(len(s) for s in seqs)
        tmax = max(len(t) for t in targets)
        ids = torch.full((len(seqs), width), self.cfg.pad_id, dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.tensor(s)
        logp = self(ids)
        rows, cols, gold = [], [], []
        mask = torch.zeros(len(seqs), tmax, dtype=DTYPE)
        for i, (c, t) in enumerate(zip(contexts, targets)):
            start = len(c)  # position of the last context token after BOS shift
            for j, tok in enumerate(t):
                rows.append(i)
                cols.append(start + j)
                gold.append(tok)
            mask[i, : len(t)] = 1.0
        out = torch.zeros(len(seqs), tmax, dtype=DTYPE)
        if rows:
            picked = logp[torch.tensor(rows), torch.tensor(cols), torch.tensor(gold)]
            tidx = torch.tensor([j for t in targets for j in range(len(t))])
            out = out.index_put((torch.tensor(rows), tidx), picked)
        return out, mask

    def flat_parameters(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()]).numpy().copy()

    def load_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params():
            raise ValueError(f"expected {self.n_params()} parameters, got {flat.size}")
        i = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(torch.from_numpy(flat[i : i + n].reshape(p.shape)))
                i += n

    def clone(self) -> ToyLM:
        m = ToyLM(self.cfg)
        m.load_state_dict(self.state_dict())
        return m


class UniformModel:
    """Uniform next-token distribution; a closed-form reference model."""

    concurrent_safe = True

    def __init__(self, vocab_size: int, context_limit: int = 1024, eos_id: int | None = None):
        self.vocab_size = vocab_size
        self.context_limit = context_limit
        self.eos_id = eos_id

    def next_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        return np.full(self.vocab_size, -math.log(self.vocab_size))
