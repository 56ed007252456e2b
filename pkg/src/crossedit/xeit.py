"""Stage 1: edit-conditioned instruction tuning with answer-only loss."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DivergedLoss, EmptyBatch, OverLength
from .lm.model import DTYPE, score_sequence
from .lm.vocab import Vocab
from .types import ParallelSample

log = logging.getLogger(__name__)

EDIT_FIELD = "[Edit description]: "
QUERY_FIELD = "[Query]: "
ANSWER_FIELD = "[Answer]: "


def build_prompt(query: str, edit_texts: Sequence[str] = ()) -> str:
    """Prompt text in the training layout; one edit block per descriptor."""
    head = "".join(f"{EDIT_FIELD}{t}\n" for t in edit_texts)
    return f"{head}{QUERY_FIELD}{query}\n{ANSWER_FIELD}"


@dataclass(frozen=True)
class FormattedExample:
    prompt: str
    prompt_ids: tuple[int, ...]
    answer_ids: tuple[int, ...]

    @property
    def m(self) -> int:
        return len(self.answer_ids)

    @property
    def input_ids(self) -> tuple[int, ...]:
        return self.prompt_ids + self.answer_ids

    @property
    def mask(self) -> tuple[int, ...]:
        return (0,) * len(self.prompt_ids) + (1,) * len(self.answer_ids)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-6
    max_length: int = 2560
    optimizer: str = "adamw"
    scheduler: str = "cosine"
    weight_decay: float = 0.1
    warmup_steps: int = 100
    epochs: int = 3
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.max_length <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("rates, lengths and batch sizes must be positive")


def format_example(sample: ParallelSample, vocab: Vocab, max_length: int | None = None) -> FormattedExample:
    prompt = build_prompt(sample.query, [sample.edit_text] if sample.with_edit else [])
    answer_ids = tuple(vocab.encode(sample.answer)) + (vocab.eos_id,)
    prompt_ids = tuple(vocab.encode(prompt))
    if max_length is not None and len(prompt_ids) + len(answer_ids) > max_length:
        raise OverLength(f"{sample.id}: {len(prompt_ids) + len(answer_ids)} > {max_length}")
    return FormattedExample(prompt, prompt_ids, answer_ids)


def format_dataset(samples: Sequence[ParallelSample], vocab: Vocab, max_length: int | None = None) -> list[FormattedExample]:
    out = []
    for s in samples:
        try:
            out.append(format_example(s, vocab, max_length))
        except OverLength as exc:
            log.warning("skipping over-length sample %s", exc)
    return out


def target_logprobs(model, contexts, targets) -> tuple[torch.Tensor, torch.Tensor]:
    """(B, T) target log-probs and mask; differentiable when the model supports it."""
    fast = getattr(model, "batch_target_logprobs", None)
    if fast is not None:
        return fast(contexts, targets)
    tmax = max(len(t) for t in targets)
    lp = torch.zeros(len(targets), tmax, dtype=DTYPE)
    mask = torch.zeros(len(targets), tmax, dtype=DTYPE)
    for i, (c, t) in enumerate(zip(contexts, targets)):
        lp[i, : len(t)] = torch.tensor(score_sequence(model, c, t), dtype=DTYPE)
        mask[i, : len(t)] = 1.0
    return lp, mask


def mean_answer_logprobs(model, contexts, answers) -> torch.Tensor:
    """(B,) mean log-prob per answer token."""
    lp, mask = target_logprobs(model, contexts, answers)
    return (lp * mask).sum(dim=1) / mask.sum(dim=1)


def xeit_loss(model, batch: Sequence[FormattedExample]) -> torch.Tensor:
    """Mean over examples of the per-example mean answer-token NLL."""
    if not batch:
        raise EmptyBatch("xeit_loss needs at least one example")
    return -mean_answer_logprobs(model, [e.prompt_ids for e in batch], [e.answer_ids for e in batch]).mean()


def cosine_schedule(optimizer, warmup: int, total: int):
    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def make_optimizer(model, learning_rate: float, weight_decay: float):
    return torch.optim.AdamW(model.parameters(), lr=learning_rate, weight_decay=weight_decay)


class DivergenceGuard:
    """Raises once the loss stays above 10x its first value for 50 steps."""

    def __init__(self, factor: float = 10.0, patience: int = 50):
        self.factor = factor
        self.patience = patience
        self.initial: float | None = None
        self.streak = 0

    def update(self, loss: float) -> None:
        if self.initial is None:
            self.initial = loss
        if not math.isfinite(loss) or loss > self.factor * self.initial:
            self.streak += 1
        else:
            self.streak = 0
        if self.streak >= self.patience:
            raise DivergedLoss(f"loss {loss:.4g} above {self.factor}x initial for {self.patience} steps")


def write_curve(path, rows, header: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(str(v) if isinstance(v, int) else repr(float(v)) for v in row) + "\n")


@dataclass
class TrainResult:
    model: object
    losses: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def train_xeit(
    model,
    dataset: Sequence[ParallelSample | FormattedExample],
    config: TrainConfig,
    vocab: Vocab | None = None,
    out_dir=None,
) -> TrainResult:
    """Fine-tune ``model`` in place on answer tokens only."""
    from .lm.checkpoint import save_checkpoint

    examples = [
        e if isinstance(e, FormattedExample) else None for e in dataset
    ]
    if any(e is None for e in examples):
        if vocab is None:
            raise ValueError("raw samples need a vocabulary")
        examples = format_dataset(dataset, vocab, config.max_length)
    else:
        examples = [e for e in examples if len(e.input_ids) <= config.max_length]
    if not examples:
        raise EmptyBatch("empty training set")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(examples) / config.batch_size)
    total = steps_per_epoch * config.epochs
    opt = make_optimizer(model, config.learning_rate, config.weight_decay)
    sched = cosine_schedule(opt, config.warmup_steps, total)
    guard = DivergenceGuard()
    result = TrainResult(model)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        for b in range(steps_per_epoch):
            batch = [examples[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
            loss = xeit_loss(model, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            value = float(loss.detach())
            result.losses.append(value)
            guard.update(value)
        log.info("xeit epoch %d: last loss %.4f", epoch, result.losses[-1])
        if out:
            path = out / f"xeit-epoch{epoch + 1}.ckpt"
            save_checkpoint(model, path, vocab)
            result.checkpoints.append(path)
    model.eval()
    if out:
        write_curve(out / "xeit-loss.tsv", enumerate(result.losses), ("step", "loss"))
    return result
