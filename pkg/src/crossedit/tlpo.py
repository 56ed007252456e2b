"""Stage 2: target-language preference optimization.

Candidate answers are sampled from the stage-1 model, ranked by how well they
explain the gold target-language answer, and the best/worst candidates form a
preference pair. Training uses the odds-ratio objective (supervised loss on
the preferred answer plus a weighted odds-ratio penalty), with a DPO variant
for comparison.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .align import Translator, alignment_score
from .errors import EmptyBatch, MalformedRecord, SchemaViolation
from .lm.model import sample
from .lm.vocab import Vocab
from .types import EvalCase
from .xeit import DivergenceGuard, build_prompt, cosine_schedule, make_optimizer, mean_answer_logprobs, write_curve

log = logging.getLogger(__name__)

PROB_EPS = 1e-12
_LOG_LO = math.log(PROB_EPS)
_LOG_HI = math.log1p(-PROB_EPS)


def clamped_odds(p: float, eps: float = PROB_EPS) -> tuple[float, bool]:
    """``p / (1 - p)`` with ``p`` clamped to [eps, 1 - eps]; the flag says whether clamping fired."""
    q = min(max(p, eps), 1.0 - eps)
    return q / (1.0 - q), q != p


def odds(p: float) -> float:
    value, clamped = clamped_odds(p)
    if clamped:
        log.debug("probability %r clamped before taking odds", p)
    return value


def log_odds(mean_logprob: torch.Tensor) -> torch.Tensor:
    """log(P / (1 - P)) for P = exp(mean token log-prob), clamped like ``odds``."""
    lp = mean_logprob.clamp(_LOG_LO, _LOG_HI)
    if bool((lp != mean_logprob).any()):
        log.debug("sequence probability clamped in log_odds")
    return lp - torch.log1p(-torch.exp(lp))


@dataclass(frozen=True)
class PreferencePair:
    context: tuple[int, ...]
    y_w: tuple[int, ...]
    y_l: tuple[int, ...]
    alignment_w: float
    alignment_l: float

    def __post_init__(self):
        if not self.alignment_w > self.alignment_l:
            raise SchemaViolation("alignment_w", f"{self.alignment_w} is not above {self.alignment_l}")
        if self.y_w == self.y_l:
            raise SchemaViolation("y_l", "identical to y_w")
        if not self.y_w or not self.y_l:
            raise SchemaViolation("y_w", "responses must be non-empty")


@dataclass
class TlpoConfig:
    odds_ratio_weight: float = 0.1
    k: int = 4
    temperature: float = 1.0
    learning_rate: float = 1e-6
    max_length: int = 1024
    weight_decay: float = 0.05
    warmup_steps: int = 100
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    holdout_fraction: float = 0.1
    min_margin: float = 1e-6
    beta: float = 0.1
    method: str = "orpo"
    max_new: int = 64
    include_rephrases: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.odds_ratio_weight < 0:
            raise ValueError("odds_ratio_weight must be non-negative")
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.method not in ("orpo", "dpo"):
            raise ValueError(f"unknown method {self.method!r}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")


def _sides(pairs: Sequence[PreferencePair]):
    ctx = [p.context for p in pairs]
    return ctx, [p.y_w for p in pairs], [p.y_l for p in pairs]


def _or_terms(lp_w: torch.Tensor, lp_l: torch.Tensor) -> torch.Tensor:
    return -F.logsigmoid(log_odds(lp_w) - log_odds(lp_l))


def or_loss(model, pair: PreferencePair) -> torch.Tensor:
    """-log sigmoid(log(odds(y_w) / odds(y_l))) with length-normalized probabilities."""
    ctx, yw, yl = _sides([pair])
    return _or_terms(mean_answer_logprobs(model, ctx, yw), mean_answer_logprobs(model, ctx, yl))[0]


def orpo_loss(model, pairs: Sequence[PreferencePair], odds_ratio_weight: float = 0.1) -> torch.Tensor:
    """Batch mean of the supervised loss on y_w plus the weighted odds-ratio term."""
    if not pairs:
        raise EmptyBatch("orpo_loss needs at least one pair")
    ctx, yw, yl = _sides(pairs)
    lp_w = mean_answer_logprobs(model, ctx, yw)
    lp_l = mean_answer_logprobs(model, ctx, yl)
    supervised = -lp_w.mean()
    return supervised + odds_ratio_weight * _or_terms(lp_w, lp_l).mean()


def _sum_logprobs(model, contexts, targets) -> torch.Tensor:
    from .xeit import target_logprobs

    lp, mask = target_logprobs(model, contexts, targets)
    return (lp * mask).sum(dim=1)


def dpo_loss(model, reference_model, pairs: PreferencePair | Sequence[PreferencePair], beta: float = 0.1) -> torch.Tensor:
    """Standard DPO on summed log-probs, without an NLL term; batch mean."""
    if isinstance(pairs, PreferencePair):
        pairs = [pairs]
    if not pairs:
        raise EmptyBatch("dpo_loss needs at least one pair")
    ctx, yw, yl = _sides(pairs)
    with torch.no_grad():
        ref_w = _sum_logprobs(reference_model, ctx, yw)
        ref_l = _sum_logprobs(reference_model, ctx, yl)
    margin = (_sum_logprobs(model, ctx, yw) - ref_w) - (_sum_logprobs(model, ctx, yl) - ref_l)
    return -F.logsigmoid(beta * margin).mean()


def mean_log_odds_ratio(model, pairs: Sequence[PreferencePair]) -> float:
    """Mean of log(odds(y_w) / odds(y_l)) over ``pairs``."""
    if not pairs:
        raise EmptyBatch("no pairs")
    with torch.no_grad():
        ctx, yw, yl = _sides(pairs)
        ratio = log_odds(mean_answer_logprobs(model, ctx, yw)) - log_odds(mean_answer_logprobs(model, ctx, yl))
    return float(ratio.mean())


# -- pair construction ------------------------------------------------------


@dataclass(frozen=True)
class PreferenceQuery:
    context_text: str
    gold: str
    tgt_lang: str


def preference_queries(cases: Sequence[EvalCase], include_rephrases: bool = False) -> list[PreferenceQuery]:
    """Source-language edit plus target-language query, for every ordered language pair."""
    out = []
    for case in cases:
        for src in case.langs:
            for tgt in case.langs:
                if src == tgt:
                    continue
                edit, target = case.edit[src], case.edit[tgt]
                queries = [target.prompt]
                if include_rephrases:
                    queries += list(case.rephrases.get(tgt, ()))
                for q in queries:
                    out.append(PreferenceQuery(build_prompt(q, [edit.text]), target.target_new, tgt))
    return out


def split_holdout(items: Sequence, fraction: float, seed: int) -> tuple[list, list]:
    """Seeded split into (train, holdout); the holdout gets ``round(n * fraction)`` items."""
    n_hold = int(round(len(items) * fraction))
    order = np.random.default_rng(seed).permutation(len(items))
    hold = set(int(i) for i in order[:n_hold])
    return [x for i, x in enumerate(items) if i not in hold], [x for i, x in enumerate(items) if i in hold]


def _pair_for_query(model, vocab: Vocab, aligner: Translator, q: PreferenceQuery, index: int, config: TlpoConfig):
    ctx = tuple(vocab.encode(q.context_text))
    cands = sample(model, ctx, config.temperature, config.k, config.seed ^ index, config.max_new, keep_eos=True)
    cands = [tuple(c) for c in cands]
    texts = [vocab.detokenize([t for t in c if t != vocab.eos_id]) for c in cands]
    scores = [alignment_score(aligner, t, q.gold, q.tgt_lang).value for t in texts]
    best = max(range(len(scores)), key=lambda i: (scores[i], -i))
    worst = min(range(len(scores)), key=lambda i: (scores[i], i))
    if scores[best] - scores[worst] < config.min_margin or cands[best] == cands[worst]:
        log.debug("query %d skipped: no usable margin among %d candidates", index, len(cands))
        return None
    if not cands[best] or not cands[worst]:
        log.debug("query %d skipped: empty candidate", index)
        return None
    return PreferencePair(ctx, cands[best], cands[worst], scores[best], scores[worst])


def build_pairs(
    model,
    cases: Sequence[EvalCase] | Sequence[PreferenceQuery],
    aligner: Translator,
    config: TlpoConfig,
    vocab: Vocab,
) -> list[PreferencePair]:
    """One pair per usable query, in query order; seeds are derived per query."""
    queries = list(cases)
    if queries and isinstance(queries[0], EvalCase):
        queries = preference_queries(queries, config.include_rephrases)
    workers = config.workers if getattr(model, "concurrent_safe", False) else 1
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda iq: _pair_for_query(model, vocab, aligner, iq[1], iq[0], config), enumerate(queries)))
    else:
        results = [_pair_for_query(model, vocab, aligner, q, i, config) for i, q in enumerate(queries)]
    pairs = [p for p in results if p is not None]
    skipped = len(queries) - len(pairs)
    if skipped:
        log.info("build_pairs: %d of %d queries skipped", skipped, len(queries))
    for p in pairs:
        assert p.alignment_w > p.alignment_l
    return pairs


# -- pair files ------------------------------------------------------------

PAIR_FIELDS = ("context", "y_w", "y_l", "alignment_w", "alignment_l")


def pair_to_line(pair: PreferencePair, vocab: Vocab) -> str:
    rec = {
        "context": vocab.decode(pair.context),
        "y_w": vocab.decode(pair.y_w),
        "y_l": vocab.decode(pair.y_l),
        "alignment_w": pair.alignment_w,
        "alignment_l": pair.alignment_l,
    }
    return json.dumps(rec, ensure_ascii=False, separators=(",", ":"))


def pair_from_line(line: str, vocab: Vocab) -> PreferencePair:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(str(exc)) from exc
    if not isinstance(rec, dict) or set(rec) != set(PAIR_FIELDS):
        raise SchemaViolation("pair", f"fields must be exactly {PAIR_FIELDS}")

    def ids(name):
        toks = rec[name]
        if not isinstance(toks, list) or not all(isinstance(t, str) for t in toks):
            raise SchemaViolation(name, "expected a list of token strings")
        return tuple(vocab.stoi.get(t, vocab.unk_id) for t in toks)

    return PreferencePair(ids("context"), ids("y_w"), ids("y_l"), float(rec["alignment_w"]), float(rec["alignment_l"]))


def write_pairs(pairs: Sequence[PreferencePair], path, vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(pair_to_line(p, vocab) + "\n")


def read_pairs(path, vocab: Vocab) -> list[PreferencePair]:
    with open(path, encoding="utf-8") as f:
        return [pair_from_line(line, vocab) for line in f if line.strip()]


# -- training --------------------------------------------------------------


@dataclass
class TlpoResult:
    model: object
    curve: list[tuple[int, float, float]] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def train_tlpo(model, pairs: Sequence[PreferencePair], config: TlpoConfig, vocab: Vocab | None = None,
               out_dir=None, reference_model=None) -> TlpoResult:
    """Optimize ``model`` in place on preference pairs.

    The curve rows are (step, loss, mean log-odds-ratio of the batch).
    """
    from .lm.checkpoint import save_checkpoint

    pairs = [p for p in pairs if len(p.context) + max(len(p.y_w), len(p.y_l)) <= config.max_length]
    if not pairs:
        raise EmptyBatch("no preference pairs to train on")
    if config.method == "dpo" and reference_model is None:
        reference_model = model.clone()
        reference_model.eval()

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(pairs) / config.batch_size)
    total = steps_per_epoch * config.epochs
    opt = make_optimizer(model, config.learning_rate, config.weight_decay)
    sched = cosine_schedule(opt, config.warmup_steps, total)
    guard = DivergenceGuard()
    result = TlpoResult(model)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    model.train()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        for b in range(steps_per_epoch):
            batch = [pairs[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
            ctx, yw, yl = _sides(batch)
            lp_w = mean_answer_logprobs(model, ctx, yw)
            lp_l = mean_answer_logprobs(model, ctx, yl)
            if config.method == "orpo":
                loss = -lp_w.mean() + config.odds_ratio_weight * _or_terms(lp_w, lp_l).mean()
            else:
                loss = dpo_loss(model, reference_model, batch, config.beta)
            ratio = float((log_odds(lp_w) - log_odds(lp_l)).mean().detach())
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            value = float(loss.detach())
            result.curve.append((step, value, ratio))
            guard.update(value)
            step += 1
        log.info("tlpo epoch %d: last loss %.4f", epoch, result.curve[-1][1])
        if out:
            path = out / f"tlpo-epoch{epoch + 1}.ckpt"
            save_checkpoint(model, path, vocab)
            result.checkpoints.append(path)
    model.eval()
    if out:
        write_curve(out / "tlpo-curve.tsv", result.curve, ("step", "loss", "mean_log_odds_ratio"))
    return result
