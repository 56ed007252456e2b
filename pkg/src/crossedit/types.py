"""Domain records, the line-delimited dataset schema and dataset statistics.

Every record here is an immutable value. ``parse_sample`` and
``serialize_sample`` are exact inverses on canonical lines, which is what the
builder writes, so dataset files can be streamed, sharded and re-joined
without drift.
"""

from __future__ import annotations

import json
import re
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from typing import Any

from .errors import MalformedRecord, SchemaViolation

SOURCE_TAGS = ("zsre", "halluedit", "ripple", "wikibio", "mquake", "counterfact", "synthetic")
LONG_TEXT_TAGS = frozenset({"mquake", "counterfact"})
SCOPES = ("in", "out")
QUADRANTS = (("in", True), ("in", False), ("out", True), ("out", False))

RECORD_FIELDS = (
    "id",
    "source_tag",
    "edit_lang",
    "query_lang",
    "scope",
    "with_edit",
    "edit_text",
    "query",
    "answer",
    "quality",
)
QUALITY_FIELDS = ("syntactic", "lexical", "faithfulness", "overall")

_LANG_RE = re.compile(r"^[a-z0-9]+$")
# bracketed field markers and language markers stay whole
_TOKEN_RE = re.compile(r"\[[^\]\n]+\]:|⟨\w+⟩|\w+|[^\w\s]")


def toy_tokenize(text: str) -> list[str]:
    """Whitespace + punctuation split; never fails."""
    return _TOKEN_RE.findall(text)


def check_lang(code: Any, field_name: str = "lang") -> str:
    if not isinstance(code, str) or not _LANG_RE.match(code):
        raise SchemaViolation(field_name, f"invalid language code {code!r}")
    return code


@dataclass(frozen=True)
class EditDescriptor:
    id: str
    lang: str
    subject: str
    prompt: str
    target_new: str
    target_old: str | None = None
    implicit_subject: bool = False

    def __post_init__(self):
        check_lang(self.lang)
        if not self.prompt:
            raise SchemaViolation("prompt", "empty")
        if not self.target_new:
            raise SchemaViolation("target_new", "empty")
        if not self.implicit_subject and self.subject not in self.prompt:
            raise SchemaViolation("subject", "not found in prompt and not marked implicit")

    @property
    def text(self) -> str:
        """The descriptor as it appears in prompts: question then new answer."""
        return f"{self.prompt} {self.target_new}"

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "id": self.id,
            "lang": self.lang,
            "subject": self.subject,
            "prompt": self.prompt,
            "target_new": self.target_new,
            "target_old": self.target_old,
        }
        if self.implicit_subject:
            d["implicit_subject"] = True
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EditDescriptor:
        return cls(
            id=str(d["id"]),
            lang=d["lang"],
            subject=d["subject"],
            prompt=d["prompt"],
            target_new=d["target_new"],
            target_old=d.get("target_old"),
            implicit_subject=bool(d.get("implicit_subject", False)),
        )


@dataclass(frozen=True)
class Probe:
    query: str
    answer: str


@dataclass(frozen=True)
class EvalCase:
    """An edit in several languages plus its generality/locality/portability probes."""

    edit: Mapping[str, EditDescriptor]
    rephrases: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    locality_probes: Mapping[str, tuple[Probe, ...]] = field(default_factory=dict)
    portability_probes: Mapping[str, tuple[Probe, ...]] = field(default_factory=dict)
    source_tag: str = "synthetic"

    @property
    def id(self) -> str:
        return next(iter(self.edit.values())).id

    @property
    def langs(self) -> list[str]:
        return list(self.edit)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "source_tag": self.source_tag,
            "edit": {lang: e.to_dict() for lang, e in self.edit.items()},
            "rephrases": {lang: list(v) for lang, v in self.rephrases.items()},
            "locality_probes": {
                lang: [[p.query, p.answer] for p in v] for lang, v in self.locality_probes.items()
            },
            "portability_probes": {
                lang: [[p.query, p.answer] for p in v] for lang, v in self.portability_probes.items()
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EvalCase:
        def probes(m):
            return {lang: tuple(Probe(q, a) for q, a in v) for lang, v in (m or {}).items()}

        case = cls(
            edit={lang: EditDescriptor.from_dict(e) for lang, e in d["edit"].items()},
            rephrases={lang: tuple(v) for lang, v in (d.get("rephrases") or {}).items()},
            locality_probes=probes(d.get("locality_probes")),
            portability_probes=probes(d.get("portability_probes")),
            source_tag=d.get("source_tag", "synthetic"),
        )
        validate_eval_case(case)
        return case


def validate_eval_case(case: EvalCase) -> None:
    """Pure structural check of an EvalCase; raises SchemaViolation."""
    if not case.edit:
        raise SchemaViolation("edit", "no descriptors")
    ids = {e.id for e in case.edit.values()}
    if len(ids) != 1:
        raise SchemaViolation("edit", f"descriptors disagree on id: {sorted(ids)}")
    for lang, e in case.edit.items():
        check_lang(lang, "edit")
        if e.lang != lang:
            raise SchemaViolation("edit", f"descriptor under key {lang!r} has lang {e.lang!r}")
    if case.source_tag not in SOURCE_TAGS:
        raise SchemaViolation("source_tag", repr(case.source_tag))
    for name in ("rephrases", "locality_probes", "portability_probes"):
        m = getattr(case, name)
        missing = set(case.edit) - set(m)
        if missing:
            raise SchemaViolation(name, f"missing languages {sorted(missing)}")


def load_cases(path) -> list[EvalCase]:
    """Read EvalCases from a JSON list or a one-case-per-line file."""
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        if text.lstrip().startswith("["):
            raw = json.loads(text)
        else:
            raw = [json.loads(line) for line in text.splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"{path}: {exc}") from exc
    out = []
    for d in raw:
        if not isinstance(d, dict):
            raise MalformedRecord(f"{path}: case is not an object")
        try:
            out.append(EvalCase.from_dict(d))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaViolation("case", str(exc)) from exc
    return out


def dump_cases(cases: Iterable[EvalCase], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for case in cases:
            f.write(json.dumps(case.to_dict(), ensure_ascii=False, separators=(",", ":")) + "\n")


@dataclass(frozen=True)
class QualityScore:
    syntactic: int
    lexical: int
    faithfulness: int
    overall: int

    def __post_init__(self):
        for name in QUALITY_FIELDS:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or not 1 <= v <= 10:
                raise SchemaViolation(f"quality.{name}", f"{v!r} not an integer in [1, 10]")

    def to_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in QUALITY_FIELDS}


@dataclass(frozen=True)
class ParallelSample:
    id: str
    source_tag: str
    edit_lang: str
    query_lang: str
    scope: str
    with_edit: bool
    edit_text: str | None
    query: str
    answer: str
    quality: QualityScore | None = None
    extra: tuple[tuple[str, Any], ...] = ()

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise SchemaViolation("id", "must be a non-empty string")
        if self.source_tag not in SOURCE_TAGS:
            raise SchemaViolation("source_tag", repr(self.source_tag))
        check_lang(self.edit_lang, "edit_lang")
        check_lang(self.query_lang, "query_lang")
        if self.scope not in SCOPES:
            raise SchemaViolation("scope", repr(self.scope))
        if not isinstance(self.with_edit, bool):
            raise SchemaViolation("with_edit", "must be boolean")
        if self.with_edit:
            if not isinstance(self.edit_text, str) or not self.edit_text:
                raise SchemaViolation("edit_text", "required when with_edit is true")
        elif self.edit_text is not None:
            raise SchemaViolation("edit_text", "must be absent when with_edit is false")
        for name in ("query", "answer"):
            if not isinstance(getattr(self, name), str) or not getattr(self, name):
                raise SchemaViolation(name, "must be a non-empty string")
        if self.quality is not None and not isinstance(self.quality, QualityScore):
            raise SchemaViolation("quality", "must be a QualityScore")

    @property
    def monolingual(self) -> bool:
        return self.edit_lang == self.query_lang

    @property
    def quadrant(self) -> tuple[str, bool]:
        return (self.scope, self.with_edit)


def parse_sample(line: str, strict: bool = True) -> ParallelSample:
    """Parse one dataset line.

    Unknown keys raise in strict mode and are carried through (in order) in
    lenient mode so that re-serialization is lossless.
    """
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(str(exc)) from exc
    if not isinstance(obj, dict):
        raise MalformedRecord("record is not an object")
    missing = [k for k in RECORD_FIELDS if k not in obj]
    if missing:
        raise SchemaViolation(missing[0], "missing field")
    extra = tuple((k, v) for k, v in obj.items() if k not in RECORD_FIELDS)
    if extra and strict:
        raise SchemaViolation(extra[0][0], "unknown field")
    q = obj["quality"]
    if q is not None:
        if not isinstance(q, dict) or set(q) != set(QUALITY_FIELDS):
            raise SchemaViolation("quality", "expected the four integer scores")
        q = QualityScore(**{k: q[k] for k in QUALITY_FIELDS})
    return ParallelSample(
        id=obj["id"],
        source_tag=obj["source_tag"],
        edit_lang=obj["edit_lang"],
        query_lang=obj["query_lang"],
        scope=obj["scope"],
        with_edit=obj["with_edit"],
        edit_text=obj["edit_text"],
        query=obj["query"],
        answer=obj["answer"],
        quality=q,
        extra=extra,
    )


def serialize_sample(sample: ParallelSample) -> str:
    obj: dict[str, Any] = {
        "id": sample.id,
        "source_tag": sample.source_tag,
        "edit_lang": sample.edit_lang,
        "query_lang": sample.query_lang,
        "scope": sample.scope,
        "with_edit": sample.with_edit,
        "edit_text": sample.edit_text,
        "query": sample.query,
        "answer": sample.answer,
        "quality": sample.quality.to_dict() if sample.quality else None,
    }
    obj.update(sample.extra)
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def read_samples(path, strict: bool = True) -> list[ParallelSample]:
    with open(path, encoding="utf-8") as f:
        return [parse_sample(line.rstrip("\n"), strict) for line in f if line.strip()]


def write_samples(samples: Iterable[ParallelSample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(serialize_sample(s) + "\n")


@dataclass
class QuadrantCounts:
    in_with: int = 0
    in_without: int = 0
    out_with: int = 0
    out_without: int = 0
    token_sum: int = 0

    @property
    def total(self) -> int:
        return self.in_with + self.in_without + self.out_with + self.out_without

    @property
    def avg_token_length(self) -> float:
        return self.token_sum / self.total if self.total else 0.0

    def add(self, scope: str, with_edit: bool, tokens: int) -> None:
        attr = f"{scope}_{'with' if with_edit else 'without'}"
        setattr(self, attr, getattr(self, attr) + 1)
        self.token_sum += tokens

    def merged(self, other: QuadrantCounts) -> QuadrantCounts:
        return QuadrantCounts(
            self.in_with + other.in_with,
            self.in_without + other.in_without,
            self.out_with + other.out_with,
            self.out_without + other.out_without,
            self.token_sum + other.token_sum,
        )


@dataclass
class DatasetStats:
    """Per (source_tag, lang) quadrant counts; lang is the query language."""

    rows: dict[tuple[str, str], QuadrantCounts] = field(default_factory=dict)

    def row(self, source_tag: str, lang: str) -> QuadrantCounts:
        return self.rows.get((source_tag, lang), QuadrantCounts())

    @property
    def total(self) -> int:
        return sum(r.total for r in self.rows.values())

    def merge(self, other: DatasetStats) -> DatasetStats:
        keys = sorted(set(self.rows) | set(other.rows))
        return DatasetStats({k: self.row(*k).merged(other.row(*k)) for k in keys})

    def to_dict(self) -> list[dict[str, Any]]:
        out = []
        for (tag, lang), r in sorted(self.rows.items()):
            out.append(
                {
                    "source_tag": tag,
                    "lang": lang,
                    "in_with_edit": r.in_with,
                    "in_without_edit": r.in_without,
                    "out_with_edit": r.out_with,
                    "out_without_edit": r.out_without,
                    "total": r.total,
                    "avg_token_length": round(r.avg_token_length, 2),
                }
            )
        return out


def sample_token_count(sample: ParallelSample, tokenizer: Callable[[str], list] = toy_tokenize) -> int:
    n = len(tokenizer(sample.query)) + len(tokenizer(sample.answer))
    if sample.edit_text:
        n += len(tokenizer(sample.edit_text))
    return n


def compute_stats(
    samples: Iterable[ParallelSample], tokenizer: Callable[[str], list] = toy_tokenize
) -> DatasetStats:
    stats = DatasetStats()
    for s in samples:
        key = (s.source_tag, s.query_lang)
        row = stats.rows.setdefault(key, QuadrantCounts())
        row.add(s.scope, s.with_edit, sample_token_count(s, tokenizer))
    return stats
