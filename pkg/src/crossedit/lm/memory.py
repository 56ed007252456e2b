"""External edit memory: store descriptors, retrieve by similarity, prepend to queries."""

from __future__ import annotations

import logging
import math
from collections import Counter
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

from ..types import EditDescriptor
from ..xeit import build_prompt
from .model import ScoringModel, greedy_decode
from .vocab import Vocab

log = logging.getLogger(__name__)

Retriever = Callable[[str, EditDescriptor], float]


def char_ngrams(text: str, n: int = 3) -> Counter:
    s = f" {text.lower()} "
    return Counter(s[i : i + n] for i in range(max(0, len(s) - n + 1)))


def ngram_cosine(a: str, b: str, n: int = 3) -> float:
    ca, cb = char_ngrams(a, n), char_ngrams(b, n)
    dot = sum(v * cb[g] for g, v in ca.items() if g in cb)
    if not dot:
        return 0.0
    na = math.sqrt(sum(v * v for v in ca.values()))
    nb = math.sqrt(sum(v * v for v in cb.values()))
    return dot / (na * nb)


def trigram_retriever(query: str, edit: EditDescriptor) -> float:
    return ngram_cosine(query, edit.prompt, 3)


@dataclass
class EditMemory:
    retriever: Retriever = trigram_retriever
    edits: list[EditDescriptor] = field(default_factory=list)

    def insert(self, edit: EditDescriptor) -> None:
        self.edits.append(edit)

    def extend(self, edits: Sequence[EditDescriptor]) -> None:
        self.edits.extend(edits)

    def clear(self) -> None:
        self.edits.clear()

    def __len__(self) -> int:
        return len(self.edits)

    def retrieve(self, query: str, k: int) -> list[EditDescriptor]:
        """Top-``k`` descriptors; equal scores keep insertion order."""
        scored = sorted(
            ((-self.retriever(query, e), i) for i, e in enumerate(self.edits)),
        )
        return [self.edits[i] for _, i in scored[:k]]


@dataclass(frozen=True)
class RetrievedPrompt:
    text: str
    retrieved: tuple[EditDescriptor, ...]
    empty_memory: bool = False


def retrieve_and_prompt(memory: EditMemory, query: str, k: int) -> RetrievedPrompt:
    if not len(memory):
        log.debug("empty edit memory; query left unmodified")
        return RetrievedPrompt(build_prompt(query), (), empty_memory=True)
    hits = memory.retrieve(query, k)
    return RetrievedPrompt(build_prompt(query, [e.text for e in hits]), tuple(hits))


class EditedModel:
    """Answers text queries with a scoring model, optionally through an edit memory.

    With ``memory=None`` this is the unedited model: queries are formatted
    without any edit block.
    """

    def __init__(
        self,
        model: ScoringModel,
        vocab: Vocab,
        memory: EditMemory | None = None,
        top_k: int = 1,
        max_new: int = 64,
    ):
        self.model = model
        self.vocab = vocab
        self.memory = memory
        self.top_k = top_k
        self.max_new = max_new

    @property
    def concurrent_safe(self) -> bool:
        return bool(getattr(self.model, "concurrent_safe", False))

    def tokenize(self, text: str) -> list[str]:
        return self.vocab.tokenize(text)

    def prompt_ids(self, query: str) -> list[int]:
        if self.memory is None:
            return self.vocab.encode(build_prompt(query))
        hits = self.memory.retrieve(query, self.top_k) if len(self.memory) else []
        # lowest-ranked descriptors go first when the prompt would not fit
        budget = self.model.context_limit - self.max_new
        while True:
            ids = self.vocab.encode(build_prompt(query, [e.text for e in hits]))
            if len(ids) <= budget or not hits:
                return ids
            hits = hits[:-1]

    def generate(self, query: str) -> list[str]:
        ids = greedy_decode(self.model, self.prompt_ids(query), self.max_new)
        return self.vocab.decode(ids)
