"""The four editing metrics, their cross-lingual forms, and report tables.

Every metric is a mean over cases of a per-case score, and every per-case
score is a mean of ``token_match`` over that case's probes. Monolingual and
cross-lingual evaluation share one code path: the direction is just the pair
(edit_lang, test_lang).
"""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Protocol

from .errors import AllCasesSkipped, DuplicateKey, EmptyGold, MissingLanguage
from .types import EvalCase

METRICS = ("reliability", "generality", "locality", "portability")


class Answerer(Protocol):
    """What the metrics need from a (possibly edited) model."""

    def generate(self, query: str) -> list[str]: ...

    def tokenize(self, text: str) -> list[str]: ...


def token_match(predicted: Sequence, gold: Sequence, exact: bool = False) -> float:
    """Fraction of gold positions reproduced at the same index.

    Positions past the end of ``predicted`` count as misses. With ``exact``
    the score is 1.0 only when every gold position matches.
    """
    if not gold:
        raise EmptyGold("gold answer has no tokens")
    hits = sum(1 for i, g in enumerate(gold) if i < len(predicted) and predicted[i] == g)
    if exact:
        return float(hits == len(gold))
    return hits / len(gold)


def _agreement(edited: Sequence, base: Sequence, exact: bool) -> float:
    # an empty base decode has no positions to score; agree only with another empty decode
    if not base:
        return float(not edited)
    return token_match(edited, base, exact)


@dataclass(frozen=True)
class MetricValue:
    name: str
    edit_lang: str
    test_lang: str
    value: float
    n_cases: int

    def __post_init__(self):
        if self.name not in METRICS:
            raise ValueError(f"unknown metric {self.name!r}")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"{self.name} value {self.value} outside [0, 1]")
        if self.n_cases < 1:
            raise ValueError("n_cases must be at least 1")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.edit_lang, self.test_lang, self.name)


def _require(case: EvalCase, *langs: str) -> None:
    for lang in langs:
        if lang not in case.edit:
            raise MissingLanguage(case.id, lang)


def _mean_over_cases(name, cases, edit_lang, test_lang, per_case) -> MetricValue:
    scores = []
    for case in cases:
        _require(case, edit_lang, test_lang)
        s = per_case(case)
        if s is not None:
            scores.append(s)
    if not scores:
        raise AllCasesSkipped(f"{name}: no case has probes for {test_lang!r}")
    return MetricValue(name, edit_lang, test_lang, sum(scores) / len(scores), len(scores))


def _probe_mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def reliability(edited_model: Answerer, cases: Sequence[EvalCase], edit_lang: str, test_lang: str,
                exact: bool = False) -> MetricValue:
    def score(case):
        d = case.edit[test_lang]
        return token_match(edited_model.generate(d.prompt), edited_model.tokenize(d.target_new), exact)

    return _mean_over_cases("reliability", cases, edit_lang, test_lang, score)


def generality(edited_model: Answerer, cases: Sequence[EvalCase], edit_lang: str, test_lang: str,
               exact: bool = False) -> MetricValue:
    def score(case):
        gold = edited_model.tokenize(case.edit[test_lang].target_new)
        return _probe_mean(
            [token_match(edited_model.generate(q), gold, exact) for q in case.rephrases.get(test_lang, ())]
        )

    return _mean_over_cases("generality", cases, edit_lang, test_lang, score)


def locality(edited_model: Answerer, base_model: Answerer, cases: Sequence[EvalCase], edit_lang: str,
             test_lang: str, exact: bool = False) -> MetricValue:
    """Agreement between edited and unedited greedy decodes on out-of-scope probes."""

    def score(case):
        return _probe_mean(
            [
                _agreement(edited_model.generate(p.query), base_model.generate(p.query), exact)
                for p in case.locality_probes.get(test_lang, ())
            ]
        )

    return _mean_over_cases("locality", cases, edit_lang, test_lang, score)


def portability(edited_model: Answerer, cases: Sequence[EvalCase], edit_lang: str, test_lang: str,
                exact: bool = False) -> MetricValue:
    def score(case):
        return _probe_mean(
            [
                token_match(edited_model.generate(p.query), edited_model.tokenize(p.answer), exact)
                for p in case.portability_probes.get(test_lang, ())
            ]
        )

    return _mean_over_cases("portability", cases, edit_lang, test_lang, score)


def round_percent(value: float) -> Decimal:
    """``value`` in [0, 1] as a percentage, rounded half-to-even to 2 decimals."""
    return (Decimal(repr(value)) * 100).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN)


@dataclass
class ReportTable:
    """Metric cells keyed by (edit_lang, test_lang, metric).

    Averages are always recomputed from the cells.
    """

    cells: dict[tuple[str, str, str], float] = field(default_factory=dict)
    n_cases: dict[tuple[str, str, str], int] = field(default_factory=dict)
    title: str = ""

    def edit_langs(self) -> list[str]:
        return sorted({k[0] for k in self.cells})

    def test_langs(self) -> list[str]:
        return sorted({k[1] for k in self.cells})

    def metrics(self) -> list[str]:
        present = {k[2] for k in self.cells}
        return [m for m in METRICS if m in present]

    def get(self, edit_lang: str, test_lang: str, metric: str) -> float | None:
        return self.cells.get((edit_lang, test_lang, metric))

    def avg(self, edit_lang: str) -> float:
        """Unweighted mean of every cell with this edit language."""
        vals = [v for (e, _, _), v in self.cells.items() if e == edit_lang]
        if not vals:
            raise KeyError(edit_lang)
        return sum(vals) / len(vals)

    def lang_avg(self, edit_lang: str, metric: str) -> float:
        """Mean of one metric over all test languages for this edit language."""
        vals = [v for (e, _, m), v in self.cells.items() if e == edit_lang and m == metric]
        if not vals:
            raise KeyError((edit_lang, metric))
        return sum(vals) / len(vals)

    def rows(self) -> tuple[list[str], list[list]]:
        """Header and rows in the published shape: one row per edit language."""
        tests, metrics = self.test_langs(), self.metrics()
        header = ["edit_lang"]
        header += [f"{t}/{m}" for t in tests for m in metrics]
        header += [f"avg/{m}" for m in metrics] + ["Avg."]
        out = []
        for e in self.edit_langs():
            row: list = [e]
            row += [self.get(e, t, m) for t in tests for m in metrics]
            row += [self._safe(self.lang_avg, e, m) for m in metrics]
            row.append(self.avg(e))
            out.append(row)
        return header, out

    @staticmethod
    def _safe(fn, *args):
        try:
            return fn(*args)
        except KeyError:
            return None

    def formatted_rows(self) -> tuple[list[str], list[list[str]]]:
        header, rows = self.rows()
        fmt = [[r[0]] + ["-" if v is None else str(round_percent(v)) for v in r[1:]] for r in rows]
        return header, fmt

    def to_text(self) -> str:
        header, rows = self.formatted_rows()
        widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
        lines = []
        if self.title:
            lines.append(self.title)
        for r in [header, *rows]:
            lines.append("  ".join(str(x).rjust(w) if i else str(x).ljust(w) for i, (x, w) in enumerate(zip(r, widths))))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        header, rows = self.formatted_rows()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "title": self.title,
            "cells": [
                {
                    "edit_lang": e, "test_lang": t, "metric": m,
                    "value": float(round_percent(v)), "n_cases": self.n_cases.get((e, t, m)),
                }
                for (e, t, m), v in sorted(self.cells.items())
            ],
            "averages": [
                {
                    "edit_lang": e,
                    "Avg.": float(round_percent(self.avg(e))),
                    **{f"avg/{m}": float(round_percent(self.lang_avg(e, m)))
                       for m in self.metrics() if self._safe(self.lang_avg, e, m) is not None},
                }
                for e in self.edit_langs()
            ],
        }
        return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "cells": [[e, t, m, v, self.n_cases.get((e, t, m))] for (e, t, m), v in sorted(self.cells.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ReportTable:
        t = cls(title=d.get("title", ""))
        for e, te, m, v, n in d["cells"]:
            t.cells[(e, te, m)] = v
            if n is not None:
                t.n_cases[(e, te, m)] = n
        return t

    def render(self, fmt: str) -> str:
        if fmt == "text":
            return self.to_text()
        if fmt == "csv":
            return self.to_csv()
        if fmt == "json":
            return self.to_json()
        raise ValueError(f"unknown report format {fmt!r}")


def aggregate(values: Iterable[MetricValue], title: str = "") -> ReportTable:
    table = ReportTable(title=title)
    for v in values:
        if v.key in table.cells:
            raise DuplicateKey(f"duplicate cell {v.key}")
        table.cells[v.key] = v.value
        table.n_cases[v.key] = v.n_cases
    return table


def delta_table(table: ReportTable, reference: ReportTable, title: str = "") -> ReportTable:
    """Cell-wise ``table - reference`` over shared keys; values may be negative."""
    out = ReportTable(title=title)
    for k in sorted(set(table.cells) & set(reference.cells)):
        out.cells[k] = table.cells[k] - reference.cells[k]
    return out


def evaluate_direction(
    edited_model: Answerer,
    base_model: Answerer,
    cases: Sequence[EvalCase],
    edit_lang: str,
    test_lang: str,
    metrics: Sequence[str] = METRICS,
    exact: bool = False,
) -> list[MetricValue]:
    """All requested metrics for one direction; metrics with no probes are left out."""
    out = []
    for name in metrics:
        try:
            if name == "reliability":
                out.append(reliability(edited_model, cases, edit_lang, test_lang, exact))
            elif name == "generality":
                out.append(generality(edited_model, cases, edit_lang, test_lang, exact))
            elif name == "locality":
                out.append(locality(edited_model, base_model, cases, edit_lang, test_lang, exact))
            elif name == "portability":
                out.append(portability(edited_model, cases, edit_lang, test_lang, exact))
            else:
                raise ValueError(f"unknown metric {name!r}")
        except AllCasesSkipped:
            continue
    return out
