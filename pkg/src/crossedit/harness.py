"""Evaluation runs: single, batch and sequential editing, plus ablations.

Editing is retrieval-based: an edit is "applied" by inserting its descriptor
into an edit memory, and the model answers with the retrieved descriptors in
its prompt. The model parameters never change during evaluation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, EmptyCases, ModelLoadError
from .lm.memory import EditedModel, EditMemory
from .lm.vocab import Vocab
from .metrics import METRICS, MetricValue, ReportTable, aggregate, delta_table, evaluate_direction
from .types import EvalCase

log = logging.getLogger(__name__)

MODES = ("single", "batch", "sequential")


@dataclass
class RunConfig:
    mode: str = "single"
    batch_sizes: tuple[int, ...] = (1, 10, 100, 1000)
    stream_sizes: tuple[int, ...] = (1, 10, 100, 500, 1000)
    edit_lang: str = "en"
    test_langs: tuple[str, ...] = ("en", "zh")
    model: str = ""
    vocab: str | None = None
    xeit_checkpoint: str | None = None
    tlpo_checkpoint: str | None = None
    top_k: int = 1
    stages: Mapping[str, bool] = field(default_factory=lambda: {"xeit": True, "tlpo": True})
    seed: int = 0
    out_dir: str = "runs"
    max_new: int = 16
    metrics: tuple[str, ...] = METRICS
    exact: bool = False
    workers: int = 1

    def __post_init__(self):
        self.batch_sizes = tuple(self.batch_sizes)
        self.stream_sizes = tuple(self.stream_sizes)
        self.test_langs = tuple(self.test_langs)
        self.metrics = tuple(self.metrics)
        self.stages = dict(self.stages)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("batch_sizes", "stream_sizes"):
            sizes = getattr(self, name)
            if not sizes or any(s < 1 for s in sizes) or list(sizes) != sorted(sizes):
                raise ConfigError(f"{name} must be positive and ascending")
        if not self.test_langs:
            raise ConfigError("at least one test language is required")
        if self.top_k < 1:
            raise ConfigError("top_k must be at least 1")
        unknown = set(self.stages) - {"xeit", "tlpo"}
        if unknown:
            raise ConfigError(f"unknown stage flags {sorted(unknown)}")
        bad = set(self.metrics) - set(METRICS)
        if bad:
            raise ConfigError(f"unknown metrics {sorted(bad)}")

    @classmethod
    def from_dict(cls, d: Mapping) -> RunConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown run config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


# -- model loading -------------------------------------------------------


def stage_checkpoint(config: RunConfig) -> str:
    """The checkpoint matching the stage flags; no stage means the base model."""
    if config.stages.get("tlpo") and config.tlpo_checkpoint:
        return config.tlpo_checkpoint
    if config.stages.get("xeit") and config.xeit_checkpoint:
        return config.xeit_checkpoint
    return config.model


def load_model(source: str, vocab_path: str | None = None):
    """(model, vocab) from a ToyLM checkpoint path or an ``http(s)://`` logprob endpoint."""
    if not source:
        raise ModelLoadError("no model given")
    if source.startswith(("http://", "https://")):
        from .lm.adapters import ChatLogprobModel

        if vocab_path is None:
            raise ModelLoadError("a remote model needs a vocabulary file")
        vocab = Vocab.load(vocab_path)
        return ChatLogprobModel.http(source, vocab), vocab
    from .lm.checkpoint import load_checkpoint

    try:
        model, vocab = load_checkpoint(source)
    except FileNotFoundError as exc:
        raise ModelLoadError(f"checkpoint not found: {source}") from exc
    if vocab_path is not None:
        vocab = Vocab.load(vocab_path)
    if vocab is None:
        raise ModelLoadError(f"{source}: no vocabulary sidecar and no vocab path")
    return model, vocab


# -- evaluation core -----------------------------------------------------


@dataclass
class CaseScores:
    """Per-case metric values keyed by (test_lang, metric)."""

    case_id: str
    values: dict[tuple[str, str], float]


def _check_inputs(config: RunConfig, cases: Sequence[EvalCase]) -> None:
    if not cases:
        raise EmptyCases("no evaluation cases")


def score_cases(
    model, vocab: Vocab, memory: EditMemory, cases: Sequence[EvalCase], config: RunConfig
) -> list[CaseScores]:
    """Score ``cases`` against a fixed memory; the memory is read-only here."""
    edited = EditedModel(model, vocab, memory, config.top_k, config.max_new)
    base = EditedModel(model, vocab, None, config.top_k, config.max_new)

    def one(case: EvalCase) -> CaseScores:
        vals: dict[tuple[str, str], float] = {}
        for t in config.test_langs:
            for v in evaluate_direction(edited, base, [case], config.edit_lang, t, config.metrics, config.exact):
                vals[(t, v.name)] = v.value
        return CaseScores(case.id, vals)

    workers = config.workers if getattr(model, "concurrent_safe", False) else 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, cases))
    return [one(c) for c in cases]


def table_from_scores(scores: Sequence[CaseScores], config: RunConfig, title: str = "") -> ReportTable:
    """Mean over cases per cell, in case order, then the usual aggregation."""
    sums: dict[tuple[str, str], list[float]] = {}
    for s in scores:
        for k, v in s.values.items():
            sums.setdefault(k, []).append(v)
    values = [
        MetricValue(m, config.edit_lang, t, sum(vs) / len(vs), len(vs))
        for (t, m), vs in sorted(sums.items())
    ]
    return aggregate(values, title)


def _fresh_memory(edits) -> EditMemory:
    mem = EditMemory()
    for e in edits:
        mem.insert(e)
    return mem


def run_single(config: RunConfig, cases: Sequence[EvalCase], model=None, vocab: Vocab | None = None) -> ReportTable:
    """Each case on its own: reset memory, insert its edit, evaluate."""
    _check_inputs(config, cases)
    model, vocab = _resolve(config, model, vocab)
    scores: list[CaseScores] = []
    for case in cases:
        mem = _fresh_memory([case.edit[config.edit_lang]])
        scores.extend(score_cases(model, vocab, mem, [case], config))
    return table_from_scores(scores, config, "single")


def _cap(sizes: Sequence[int], n: int, what: str) -> list[int]:
    out = []
    for s in sizes:
        if s > n:
            warnings.warn(f"{what} {s} exceeds {n} cases; capped", stacklevel=3)
            s = n
        if s not in out:
            out.append(s)
    return out


def run_batch(config: RunConfig, cases: Sequence[EvalCase], model=None, vocab: Vocab | None = None
              ) -> dict[int, ReportTable]:
    """For each batch size: chunk the cases, one fresh memory per chunk, average over all cases."""
    _check_inputs(config, cases)
    model, vocab = _resolve(config, model, vocab)
    tables = {}
    for b in _cap(config.batch_sizes, len(cases), "batch size"):
        scores: list[CaseScores] = []
        for start in range(0, len(cases), b):
            chunk = cases[start : start + b]
            mem = _fresh_memory([c.edit[config.edit_lang] for c in chunk])
            scores.extend(score_cases(model, vocab, mem, chunk, config))
        tables[b] = table_from_scores(scores, config, f"batch {b}")
    return tables


def run_sequential(config: RunConfig, cases: Sequence[EvalCase], model=None, vocab: Vocab | None = None
                   ) -> dict[int, ReportTable]:
    """Edits arrive one at a time with no resets; after ``n`` edits all ``n`` cases are evaluated."""
    _check_inputs(config, cases)
    model, vocab = _resolve(config, model, vocab)
    sizes = _cap(config.stream_sizes, len(cases), "stream size")
    mem = EditMemory()
    tables = {}
    for i, case in enumerate(cases[: max(sizes)], start=1):
        mem.insert(case.edit[config.edit_lang])
        if i in sizes:
            scores = score_cases(model, vocab, mem, cases[:i], config)
            tables[i] = table_from_scores(scores, config, f"stream {i}")
    return tables


def _resolve(config: RunConfig, model, vocab):
    if model is None:
        model, vocab = load_model(stage_checkpoint(config), config.vocab)
    if vocab is None:
        raise ModelLoadError("a vocabulary is required")
    return model, vocab


def run(config: RunConfig, cases: Sequence[EvalCase], model=None, vocab: Vocab | None = None) -> dict[str, ReportTable]:
    if config.mode == "single":
        return {"single": run_single(config, cases, model, vocab)}
    if config.mode == "batch":
        return {f"batch-{b}": t for b, t in run_batch(config, cases, model, vocab).items()}
    return {f"stream-{n}": t for n, t in run_sequential(config, cases, model, vocab).items()}


# -- ablations -----------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    """One ablation configuration: which stages ran and which data sections were dropped."""

    name: str
    stages: Mapping[str, bool] = field(default_factory=lambda: {"xeit": True, "tlpo": True})
    drops: frozenset[str] = frozenset()


FULL = "full"

STAGE_VARIANTS = (
    Variant("origin", {"xeit": False, "tlpo": False}),
    Variant("xeit-only", {"xeit": True, "tlpo": False}),
    Variant("tlpo-only", {"xeit": False, "tlpo": True}),
    Variant(FULL),
)


def data_variants(flags: Sequence[str]) -> list[Variant]:
    return [Variant(FULL)] + [Variant(f"without-{f}", drops=frozenset({f})) for f in flags]


def run_ablation(
    config: RunConfig,
    variants: Sequence[Variant],
    cases: Sequence[EvalCase],
    pipeline: Callable[[Variant], tuple[object, Vocab]],
) -> dict[str, ReportTable]:
    """Evaluate each variant in single mode and add ``delta/<name>`` tables against ``full``.

    ``pipeline`` produces the model for a variant: for stage variants it picks
    or trains the matching checkpoint, for data variants it retrains on the
    reduced dataset.
    """
    _check_inputs(config, cases)
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ConfigError("variant names must be unique")
    tables: dict[str, ReportTable] = {}
    for v in variants:
        model, vocab = pipeline(v)
        t = run_single(config, cases, model, vocab)
        t.title = v.name
        tables[v.name] = t
    if FULL in tables:
        for name in names:
            tables[f"delta/{name}"] = delta_table(tables[name], tables[FULL], f"{name} - {FULL}")
    return tables


def checkpoint_pipeline(config: RunConfig) -> Callable[[Variant], tuple[object, Vocab]]:
    """Stage variants served from the checkpoints named in ``config``."""

    def pick(v: Variant):
        if v.drops:
            raise ConfigError(f"variant {v.name!r} drops data; it needs a training pipeline")
        cfg = RunConfig.from_dict({**config.to_dict(), "stages": dict(v.stages)})
        return load_model(stage_checkpoint(cfg), config.vocab)

    return pick


# -- artifacts -----------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_tables(tables: Mapping[str, ReportTable], out_dir, inputs: Sequence = (), seeds: Mapping | None = None,
                 config: Mapping | None = None, formats: Sequence[str] = ("json", "csv", "text")) -> Path:
    """Write every table in every format plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = {"json": "json", "csv": "csv", "text": "txt"}
    written = []
    for name, table in tables.items():
        stem = name.replace("/", "-")
        for fmt in formats:
            p = out / f"{stem}.{ext[fmt]}"
            p.write_text(table.render(fmt), encoding="utf-8")
            written.append(p)
        raw = out / f"{stem}.cells.json"
        raw.write_text(json.dumps(table.to_dict(), ensure_ascii=False) + "\n", encoding="utf-8")
        written.append(raw)
    return write_manifest(out, inputs, written, seeds or {}, config)


def write_manifest(out_dir, inputs: Sequence, outputs: Sequence, seeds: Mapping, config: Mapping | None = None) -> Path:
    out = Path(out_dir)
    doc = {
        "inputs": [{"path": str(p), "sha256": sha256_file(p)} for p in inputs if Path(p).is_file()],
        "outputs": [{"path": Path(p).name, "sha256": sha256_file(p)} for p in outputs],
        "seeds": dict(seeds),
        "config": config,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path
