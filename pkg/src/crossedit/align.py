"""Alignment scores: how well a response explains the gold target-language answer.

A translator force-decodes the gold answer conditioned on the model's
response; the mean per-token log-probability is the score. Responses already
in the target language and matching the gold score highest, correct answers
in another language score lower, and unrelated text scores lowest.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import httpx

from .errors import ContextOverflow, EmptyGold, EmptyResponses, ServiceError, UnsupportedPair
from .types import toy_tokenize


@runtime_checkable
class Translator(Protocol):
    languages: frozenset[str]
    context_limit: int
    concurrent_safe: bool

    def forced_score(self, src_text: str, tgt_text: str, tgt_lang: str) -> list[float]:
        """Per-token log P(tgt token | src_text, earlier tgt tokens)."""
        ...


@dataclass(frozen=True)
class AlignmentScore:
    value: float
    n_tokens: int
    raw: bool = False

    @property
    def total(self) -> float:
        return self.value if self.raw else self.value * self.n_tokens


class ToyTranslator:
    """Deterministic word-translation table in the style of IBM Model 1.

    Each source token ``r`` emits a target token from ``t(.|r)``: mass
    ``p_self`` on ``r`` itself, ``p_translate`` shared by its lexicon
    equivalents, and the rest spread uniformly over the target vocabulary
    (plus one bucket for unknown tokens). A NULL source word emits uniformly.
    The probability of a gold token is the average of ``t(g|r)`` over the
    response tokens and NULL, so the score ignores response word order.
    """

    concurrent_safe = True

    def __init__(
        self,
        vocabulary: Iterable[str],
        lexicon: Mapping[str, Iterable[str]],
        languages: Iterable[str],
        p_self: float = 0.5,
        p_translate: float = 0.3,
        context_limit: int = 512,
        tokenize: Callable[[str], list[str]] = toy_tokenize,
    ):
        if p_self < 0 or p_translate < 0 or p_self + p_translate >= 1:
            raise ValueError("p_self + p_translate must lie in [0, 1)")
        self.vocabulary = frozenset(vocabulary)
        self.lexicon = {k: frozenset(v) for k, v in lexicon.items()}
        self.languages = frozenset(languages)
        self.p_self = p_self
        self.p_translate = p_translate
        self.context_limit = context_limit
        self.tokenize = tokenize
        self._n_symbols = len(self.vocabulary) + 1

    def _known(self, tok: str) -> bool:
        return tok in self.vocabulary

    def emit(self, gold: str, source: str | None) -> float:
        """t(gold | source); ``source=None`` is the NULL word."""
        floor_share = 1.0 / self._n_symbols
        if source is None or not self._known(source):
            return floor_share
        equivalents = self.lexicon.get(source, frozenset())
        self_mass = self.p_self
        trans_mass = self.p_translate if equivalents else 0.0
        rest = 1.0 - self_mass - trans_mass
        p = rest * floor_share
        if gold == source:
            p += self_mass
        if gold in equivalents:
            p += trans_mass / len(equivalents)
        return p

    def forced_score(self, src_text: str, tgt_text: str, tgt_lang: str) -> list[float]:
        if tgt_lang not in self.languages:
            raise UnsupportedPair(f"toy translator has no target language {tgt_lang!r}")
        src = self.tokenize(src_text)
        tgt = self.tokenize(tgt_text)
        if len(src) + len(tgt) > self.context_limit:
            raise ContextOverflow(len(src) + len(tgt), self.context_limit)
        sources: list[str | None] = [None, *src]
        return [math.log(sum(self.emit(g, r) for r in sources) / len(sources)) for g in tgt]


class HttpTranslator:
    """Adapter for a translation service.

    Wire contract: POST ``{src_text, tgt_text, tgt_lang}`` and receive
    ``{token_logprobs: [...]}``.
    """

    concurrent_safe = True

    def __init__(
        self,
        endpoint: str,
        languages: Iterable[str],
        context_limit: int = 1024,
        timeout: float = 30.0,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.languages = frozenset(languages)
        self.context_limit = context_limit
        self._client = client or httpx.Client(timeout=timeout)

    def forced_score(self, src_text: str, tgt_text: str, tgt_lang: str) -> list[float]:
        if tgt_lang not in self.languages:
            raise UnsupportedPair(f"translator does not serve {tgt_lang!r}")
        try:
            r = self._client.post(self.endpoint, json={"src_text": src_text, "tgt_text": tgt_text, "tgt_lang": tgt_lang})
            r.raise_for_status()
            body = r.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise ServiceError(f"translator request failed: {exc}") from exc
        lps = body.get("token_logprobs")
        if not isinstance(lps, list):
            raise ServiceError("translator response lacks token_logprobs")
        return [float(x) for x in lps]


def alignment_score(
    translator: Translator, response: str, gold_target: str, tgt: str, raw: bool = False
) -> AlignmentScore:
    """Mean log P(gold | response) per gold token; ``raw`` returns the plain sum."""
    if not gold_target.strip():
        raise EmptyGold("gold target is empty")
    lps = translator.forced_score(response, gold_target, tgt)
    if not lps:
        raise EmptyGold("gold target has no tokens")
    total = math.fsum(lps)
    return AlignmentScore(total if raw else total / len(lps), len(lps), raw)


def rank(
    responses: Sequence[str], gold_target: str, translator: Translator, tgt: str, raw: bool = False
) -> list[int]:
    """Indices of ``responses`` by descending score; ties keep input order."""
    if not responses:
        raise EmptyResponses("nothing to rank")
    scores = [alignment_score(translator, r, gold_target, tgt, raw).value for r in responses]
    return sorted(range(len(responses)), key=lambda i: -scores[i])
