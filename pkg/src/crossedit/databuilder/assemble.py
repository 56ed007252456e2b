"""Parallel dataset assembly: quotas, sections, quality control, drops.

Every sample belongs to a section (edit language, query language) and a
quadrant (scope, with/without edit descriptor). Monolingual sections use the
query language on both sides; cross-lingual sections keep the edit descriptor
in the source language. Content is generated once per case in the source
language and translated into each query language.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

from ..errors import ConfigError, JudgeAmbiguous, ParseError, QuotaShortfall, ScoreParseError
from ..types import (
    LONG_TEXT_TAGS,
    QUADRANTS,
    SOURCE_TAGS,
    DatasetStats,
    EditDescriptor,
    EvalCase,
    ParallelSample,
    QualityScore,
    compute_stats,
)
from .client import ChatClient
from .generate import (
    generate_answer,
    generate_out_of_scope,
    generate_query,
    judge_sample,
    score_sample,
    translate,
)

log = logging.getLogger(__name__)

DROP_FLAGS = ("mono", "cross", "in_scope", "out_of_scope", "edit_descriptor", "long_text")

# per-language, per-quadrant sample counts of the published training set
PUBLISHED_QUOTAS = {
    "zsre": 20000,
    "halluedit": 2000,
    "ripple": 2250,
    "wikibio": 250,
    "mquake": 4000,
    "counterfact": 7500,
}


def quadrant_key(scope: str, with_edit: bool) -> str:
    return f"{scope}:{'w' if with_edit else 'wo'}"


QUADRANT_KEYS = tuple(quadrant_key(s, w) for s, w in QUADRANTS)


@dataclass(frozen=True)
class BuildConfig:
    """``quotas[tag][lang]`` maps each quadrant key (``in:w`` ...) to a count for that query language."""

    quotas: Mapping[str, Mapping[str, Mapping[str, int]]]
    source_lang: str = "en"
    target_langs: tuple[str, ...] = ("zh",)
    qc_threshold: int = 7
    drops: frozenset[str] = frozenset()
    seed: int = 0
    regen_budget: int = 3
    max_in_flight: int = 8

    def __post_init__(self):
        if not 1 <= self.qc_threshold <= 10:
            raise ConfigError(f"qc_threshold must lie in [1, 10], got {self.qc_threshold}")
        if self.regen_budget < 1:
            raise ConfigError("regen_budget must be at least 1")
        bad = set(self.drops) - set(DROP_FLAGS)
        if bad:
            raise ConfigError(f"unknown drop flags {sorted(bad)}")
        if self.source_lang in self.target_langs:
            raise ConfigError("source language listed as a target")
        for tag, by_lang in self.quotas.items():
            if tag not in SOURCE_TAGS:
                raise ConfigError(f"unknown source tag {tag!r}")
            for lang, q in by_lang.items():
                if lang not in self.languages:
                    raise ConfigError(f"quota for unconfigured language {lang!r}")
                for k, n in q.items():
                    if k not in QUADRANT_KEYS:
                        raise ConfigError(f"unknown quadrant {k!r}")
                    if not isinstance(n, int) or n < 0:
                        raise ConfigError(f"quota {tag}/{lang}/{k} must be a non-negative integer")
        object.__setattr__(self, "drops", frozenset(self.drops))
        object.__setattr__(self, "target_langs", tuple(self.target_langs))

    @property
    def languages(self) -> tuple[str, ...]:
        return (self.source_lang, *self.target_langs)

    def with_drops(self, *flags: str) -> BuildConfig:
        return replace(self, drops=frozenset(self.drops | set(flags)))

    def to_dict(self) -> dict:
        return {
            "quotas": {t: {lang: dict(q) for lang, q in by.items()} for t, by in self.quotas.items()},
            "source_lang": self.source_lang,
            "target_langs": list(self.target_langs),
            "qc_threshold": self.qc_threshold,
            "drops": sorted(self.drops),
            "seed": self.seed,
            "regen_budget": self.regen_budget,
            "max_in_flight": self.max_in_flight,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> BuildConfig:
        known = {"quotas", "source_lang", "target_langs", "qc_threshold", "drops", "seed", "regen_budget",
                 "max_in_flight"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown build config keys {sorted(unknown)}")
        kw = dict(d)
        if "target_langs" in kw:
            kw["target_langs"] = tuple(kw["target_langs"])
        if "drops" in kw:
            kw["drops"] = frozenset(kw["drops"])
        return cls(**kw)


def published_quotas(scale: float = 1 / 1000, langs: Sequence[str] = ("en", "zh")) -> dict:
    """Published per-quadrant counts times ``scale``, rounded up so no source vanishes."""
    out = {}
    for tag, n in PUBLISHED_QUOTAS.items():
        q = math.ceil(round(n * scale, 9))
        out[tag] = {lang: dict.fromkeys(QUADRANT_KEYS, q) for lang in langs}
    return out


@dataclass(frozen=True)
class Slot:
    """One requested sample before generation."""

    case: EvalCase
    edit_lang: str
    query_lang: str
    scope: str
    with_edit: bool

    @property
    def id(self) -> str:
        return f"{self.case.id}:{self.edit_lang}>{self.query_lang}:{self.scope}:{'w' if self.with_edit else 'wo'}"

    @property
    def section(self) -> str:
        return "mono" if self.edit_lang == self.query_lang else "cross"


def plan_slots(config: BuildConfig, cases: Sequence[EvalCase]) -> tuple[list[Slot], list[str]]:
    """Allocate quotas to cases before any drop is applied.

    For the source language the whole quota is monolingual. For a target
    language half (rounded up) is monolingual and the rest cross-lingual.
    Cases are taken in id order; a case serves one slot per section and
    quadrant.
    """
    by_tag: dict[str, list[EvalCase]] = {}
    for c in sorted(cases, key=lambda c: c.id):
        by_tag.setdefault(c.source_tag, []).append(c)
    slots: list[Slot] = []
    shortfalls: list[str] = []
    src = config.source_lang
    for tag in sorted(config.quotas):
        pool = [c for c in by_tag.get(tag, []) if src in c.edit]
        for lang in sorted(config.quotas[tag]):
            for qk, q in sorted(config.quotas[tag][lang].items()):
                scope, w = qk.split(":")
                if lang == src:
                    parts = [(src, q)]
                else:
                    parts = [(lang, math.ceil(q / 2)), (src, q // 2)]
                offset = 0
                for edit_lang, n in parts:
                    chosen = pool[offset : offset + n]
                    offset += n
                    if len(chosen) < n:
                        shortfalls.append(f"{tag}/{lang}/{qk}/{edit_lang}>{lang}: {len(chosen)} of {n} cases")
                    slots.extend(Slot(c, edit_lang, lang, scope, w == "w") for c in chosen)
    return slots, shortfalls


def _hit(drops: Iterable[str], section: str, scope: str, with_edit: bool, source_tag: str) -> bool:
    drops = set(drops)
    return (
        ("mono" in drops and section == "mono")
        or ("cross" in drops and section == "cross")
        or ("in_scope" in drops and scope == "in")
        or ("out_of_scope" in drops and scope == "out")
        or ("edit_descriptor" in drops and with_edit)
        or ("long_text" in drops and source_tag in LONG_TEXT_TAGS)
    )


def dropped(slot: Slot, drops: Iterable[str]) -> bool:
    return _hit(drops, slot.section, slot.scope, slot.with_edit, slot.case.source_tag)


def sample_dropped(sample: ParallelSample, drops: Iterable[str]) -> bool:
    """The same drop rule applied to an already built sample."""
    section = "mono" if sample.monolingual else "cross"
    return _hit(drops, section, sample.scope, sample.with_edit, sample.source_tag)


@dataclass
class SourceContent:
    """Source-language question/answer pairs for one case; ``None`` when rejected."""

    in_with: tuple[str, str, QualityScore] | None = None
    in_without: tuple[str, str, QualityScore] | None = None
    out: tuple[str, str] | None = None
    rejections: list[str] = field(default_factory=list)


def _old_knowledge(edit: EditDescriptor) -> EditDescriptor | None:
    if not edit.target_old:
        return None
    return replace(edit, target_new=edit.target_old)


def _quality_checked(client: ChatClient, edit: EditDescriptor, config: BuildConfig, reasons: list[str],
                     question: str | None = None):
    """Generate (question, answer) until judge and score accept; a fixed ``question`` is reused."""
    for attempt in range(config.regen_budget):
        try:
            q = question if question is not None else generate_query(client, edit, attempt)
            a = generate_answer(client, edit, q, attempt)
            if not judge_sample(client, edit, q, a):
                reasons.append(f"{edit.id}: judge rejected attempt {attempt}")
                continue
            score = score_sample(client, edit, q, a)
        except (JudgeAmbiguous, ScoreParseError) as exc:
            reasons.append(f"{edit.id}: {exc} (attempt {attempt})")
            continue
        if score.overall >= config.qc_threshold:
            return q, a, score
        reasons.append(f"{edit.id}: overall {score.overall} below {config.qc_threshold} (attempt {attempt})")
    return None


def source_content(client: ChatClient, case: EvalCase, config: BuildConfig, need: set[str]) -> SourceContent:
    edit = case.edit[config.source_lang]
    out = SourceContent()
    if need & {"in:w", "in:wo"}:
        # the without-edit sample asks the same question and answers from the old fact
        out.in_with = _quality_checked(client, edit, config, out.rejections)
    if "in:wo" in need:
        old = _old_knowledge(edit)
        if old is None:
            out.rejections.append(f"{edit.id}: no old answer for the without-edit sample")
        elif out.in_with is not None:
            out.in_without = _quality_checked(client, old, config, out.rejections, question=out.in_with[0])
    if "out" in need:
        try:
            out.out = generate_out_of_scope(client, edit, config.regen_budget)
        except ParseError as exc:
            out.rejections.append(str(exc))
    return out


def _edit_text(client: ChatClient, case: EvalCase, lang: str, source: str) -> str:
    if lang in case.edit:
        return case.edit[lang].text
    return translate(client, case.edit[source].text, source, lang)


def realize(client: ChatClient, slot: Slot, content: SourceContent, config: BuildConfig) -> ParallelSample | None:
    src = config.source_lang
    if slot.scope == "out":
        pair = content.out
        quality = None
    else:
        picked = content.in_with if slot.with_edit else content.in_without
        if picked is None:
            return None
        pair, quality = picked[:2], picked[2]
    if pair is None:
        return None
    query = translate(client, pair[0], src, slot.query_lang)
    answer = translate(client, pair[1], src, slot.query_lang)
    edit_text = _edit_text(client, slot.case, slot.edit_lang, src) if slot.with_edit else None
    return ParallelSample(
        id=slot.id,
        source_tag=slot.case.source_tag,
        edit_lang=slot.edit_lang,
        query_lang=slot.query_lang,
        scope=slot.scope,
        with_edit=slot.with_edit,
        edit_text=edit_text,
        query=query,
        answer=answer,
        quality=quality,
    )


@dataclass
class BuildResult:
    samples: list[ParallelSample]
    stats: DatasetStats
    shortfalls: list[str]
    rejections: list[str]
    service_calls: int
    cache_hits: int

    def __iter__(self):
        return iter(self.samples)


def assemble(config: BuildConfig, cases: Sequence[EvalCase], client: ChatClient) -> BuildResult:
    """Build the dataset; output is sorted by sample id whatever the request order."""
    calls0, hits0 = client.calls, client.cache_hits
    planned, shortfalls = plan_slots(config, cases)
    slots = [s for s in planned if not dropped(s, config.drops)]

    need: dict[str, set[str]] = {}
    by_id: dict[str, EvalCase] = {}
    for s in slots:
        by_id[s.case.id] = s.case
        need.setdefault(s.case.id, set()).add("out" if s.scope == "out" else quadrant_key(s.scope, s.with_edit))

    workers = max(1, config.max_in_flight)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        ids = sorted(need)
        contents = dict(zip(ids, pool.map(lambda i: source_content(client, by_id[i], config, need[i]), ids)))
        slots.sort(key=lambda s: s.id)
        realized = list(pool.map(lambda s: realize(client, s, contents[s.case.id], config), slots))

    samples = [r for r in realized if r is not None]
    rejections = [r for i in sorted(contents) for r in contents[i].rejections]
    for s, r in zip(slots, realized):
        if r is None:
            shortfalls.append(f"{s.id}: no sample after quality control")
    for msg in rejections:
        log.info("rejected: %s", msg)
    if shortfalls:
        warnings.warn(f"{len(shortfalls)} quota shortfall(s); first: {shortfalls[0]}", QuotaShortfall, stacklevel=2)
    return BuildResult(
        samples=samples,
        stats=compute_stats(samples),
        shortfalls=shortfalls,
        rejections=rejections,
        service_calls=client.calls - calls0,
        cache_hits=client.cache_hits - hits0,
    )
