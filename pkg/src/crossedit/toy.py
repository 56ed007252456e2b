"""A tiny two-language fact world for desk-scale end-to-end runs.

Subjects are syllable pairs shared by both languages; relations, objects and
object regions have one surface form per language. Answers always start with
a language marker token (``⟨en⟩`` / ``⟨zh⟩``), which makes "answered in the
right language" a one-token check.

Background facts are a fixed function of (first syllable, relation), so a
small model can learn them; edits swap the object for another one of the
same relation.
"""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from .align import ToyTranslator
from .lm.vocab import SPECIALS, Vocab
from .types import EditDescriptor, EvalCase, ParallelSample, Probe

LANGS = ("en", "zh")
SYLLABLES = ("ka", "to", "mi", "re", "su", "no", "ha", "ri", "bo", "te", "lu", "sa", "vi", "ne", "po", "da")

# relation -> (main form, synonym form) per language
RELATIONS = {
    "en": (("capital", "seat"), ("field", "domain"), ("employer", "company"), ("birthplace", "hometown")),
    "zh": (("首都", "都城"), ("领域", "专业"), ("雇主", "公司"), ("出生地", "故乡")),
}
OBJECTS = {
    "en": (
        "paris", "rome", "oslo", "lima", "cairo", "quito",
        "physics", "music", "law", "poetry", "botany", "chess",
        "acme", "globex", "initech", "umbrella", "hooli", "vandelay",
        "kyoto", "dakar", "perth", "tunis", "hanoi", "sofia",
    ),
    "zh": (
        "巴黎", "罗马", "奥斯陆", "利马", "开罗", "基多",
        "物理", "音乐", "法律", "诗歌", "植物学", "象棋",
        "艾克米", "环球", "英泰", "伞社", "呼哩", "万德",
        "京都", "达喀尔", "珀斯", "突尼斯", "河内", "索非亚",
    ),
}
REGIONS = {"en": ("north", "south", "east", "west"), "zh": ("北", "南", "东", "西")}
REGION_WORD = {"en": "region", "zh": "区域"}
OBJECTS_PER_RELATION = 6
MARKERS = {lang: f"⟨{lang}⟩" for lang in LANGS}
FIELD_MARKERS = ("[Edit description]:", "[Query]:", "[Answer]:")


def other_lang(lang: str) -> str:
    return "zh" if lang == "en" else "en"


@dataclass(frozen=True)
class ToyFact:
    subject: tuple[int, int]
    relation: int
    new_object: int
    old_object: int


class ToyWorld:
    """Surface realization of toy facts in both languages."""

    def subject(self, s: tuple[int, int]) -> str:
        return f"{SYLLABLES[s[0]]} {SYLLABLES[s[1]]}"

    def background(self, s: tuple[int, int], rel: int) -> int:
        return rel * OBJECTS_PER_RELATION + (s[0] * 5 + rel) % OBJECTS_PER_RELATION

    def region(self, obj: int) -> int:
        return (obj * 7 + 1) % len(REGIONS["en"])

    def prompt(self, s, rel: int, lang: str) -> str:
        if lang == "en":
            return f"{self.subject(s)} {RELATIONS['en'][rel][0]} ?"
        return f"{self.subject(s)} 的 {RELATIONS['zh'][rel][0]} ?"

    def rephrase(self, s, rel: int, lang: str) -> str:
        if lang == "en":
            return f"{RELATIONS['en'][rel][1]} of {self.subject(s)} ?"
        return f"{RELATIONS['zh'][rel][1]} 是 {self.subject(s)} ?"

    def region_query(self, s, rel: int, lang: str) -> str:
        if lang == "en":
            return f"{self.subject(s)} {RELATIONS['en'][rel][0]} {REGION_WORD['en']} ?"
        return f"{self.subject(s)} 的 {RELATIONS['zh'][rel][0]} {REGION_WORD['zh']} ?"

    def object_answer(self, obj: int, lang: str) -> str:
        return f"{MARKERS[lang]} {OBJECTS[lang][obj]}"

    def region_answer(self, obj: int, lang: str) -> str:
        return f"{MARKERS[lang]} {REGIONS[lang][self.region(obj)]}"

    def descriptor(self, fact: ToyFact, lang: str, fact_id: str) -> EditDescriptor:
        return EditDescriptor(
            id=fact_id,
            lang=lang,
            subject=self.subject(fact.subject),
            prompt=self.prompt(fact.subject, fact.relation, lang),
            target_new=self.object_answer(fact.new_object, lang),
            target_old=self.object_answer(fact.old_object, lang),
        )

    def vocab(self) -> Vocab:
        texts: list[str] = list(FIELD_MARKERS) + ["?", "of", "的", "是"]
        texts += list(MARKERS.values()) + list(SYLLABLES)
        for lang in LANGS:
            texts += [w for pair in RELATIONS[lang] for w in pair]
            texts += list(OBJECTS[lang]) + list(REGIONS[lang]) + [REGION_WORD[lang]]
        return Vocab.from_texts(texts)

    def lexicon(self) -> dict[str, set[str]]:
        """Word-level equivalents across the two languages."""
        pairs = [(MARKERS["en"], MARKERS["zh"]), (REGION_WORD["en"], REGION_WORD["zh"]), ("of", "是")]
        for (en_main, en_syn), (zh_main, zh_syn) in zip(RELATIONS["en"], RELATIONS["zh"]):
            pairs += [(en_main, zh_main), (en_syn, zh_syn)]
        pairs += list(zip(OBJECTS["en"], OBJECTS["zh"]))
        pairs += list(zip(REGIONS["en"], REGIONS["zh"]))
        lex: dict[str, set[str]] = {}
        for a, b in pairs:
            lex.setdefault(a, set()).add(b)
            lex.setdefault(b, set()).add(a)
        return lex

    def translator(self, **kwargs) -> ToyTranslator:
        words = self.vocab().itos[len(SPECIALS):]
        return ToyTranslator(words, self.lexicon(), LANGS, **kwargs)

    # -- fact sampling ---------------------------------------------------

    def sample_facts(self, n: int, seed: int) -> list[ToyFact]:
        """``n`` edits over distinct subjects.

        Each old object cycles through a shuffled list of its replacements, so
        a few hundred edits cover every (old, new) object pair.
        """
        rng = np.random.default_rng(seed)
        n_subjects = len(SYLLABLES) ** 2
        if n > n_subjects:
            raise ValueError(f"at most {n_subjects} distinct subjects")
        picks = rng.choice(n_subjects, size=n, replace=False)
        cycles: dict[int, list[int]] = {}
        facts = []
        for p in picks:
            s = (int(p) // len(SYLLABLES), int(p) % len(SYLLABLES))
            rel = int(rng.integers(len(RELATIONS["en"])))
            old = self.background(s, rel)
            if not cycles.get(old):
                cycles[old] = [int(x) for x in rng.permutation(np.arange(1, OBJECTS_PER_RELATION))]
            shift = cycles[old].pop()
            base = rel * OBJECTS_PER_RELATION
            new = base + (old - base + shift) % OBJECTS_PER_RELATION
            facts.append(ToyFact(s, rel, new, old))
        return facts

    def _out_of_scope(
        self, fact: ToyFact, rng: np.random.Generator, per_kind: int = 1
    ) -> list[tuple[tuple[int, int], int]]:
        """Same subject with another relation, and another subject entirely."""
        n_rel = len(RELATIONS["en"])
        same, other = [], []
        for _ in range(per_kind):
            rel2 = (fact.relation + int(rng.integers(1, n_rel))) % n_rel
            same.append((fact.subject, rel2))
            while True:
                p = int(rng.integers(len(SYLLABLES) ** 2))
                s2 = (p // len(SYLLABLES), p % len(SYLLABLES))
                if s2 != fact.subject:
                    break
            other.append((s2, int(rng.integers(n_rel))))
        return same + other

    # -- benchmark cases ---------------------------------------------------

    def eval_cases(self, n: int, seed: int, prefix: str = "toy") -> list[EvalCase]:
        rng = np.random.default_rng(seed + 7919)
        cases = []
        for i, fact in enumerate(self.sample_facts(n, seed)):
            fid = f"{prefix}-{i:05d}"
            outs = self._out_of_scope(fact, rng)
            cases.append(
                EvalCase(
                    edit={lang: self.descriptor(fact, lang, fid) for lang in LANGS},
                    rephrases={lang: (self.rephrase(fact.subject, fact.relation, lang),) for lang in LANGS},
                    locality_probes={
                        lang: tuple(
                            Probe(self.prompt(s, r, lang), self.object_answer(self.background(s, r), lang))
                            for s, r in outs
                        )
                        for lang in LANGS
                    },
                    portability_probes={
                        lang: (
                            Probe(
                                self.region_query(fact.subject, fact.relation, lang),
                                self.region_answer(fact.new_object, lang),
                            ),
                        )
                        for lang in LANGS
                    },
                )
            )
        return cases

    # -- training data -----------------------------------------------------

    def parallel_samples(
        self,
        n: int,
        seed: int,
        prefix: str = "train",
        distractors: int = 1,
        quadrants: Iterable[str] = ("in:w", "in:wo", "out:w", "out:wo"),
        untranslated: float = 0.0,
    ) -> list[ParallelSample]:
        """XE-IT training records for ``n`` edits.

        ``quadrants`` selects scope:edit-presence cells. ``untranslated`` is the
        fraction of cross-lingual in-scope answers left in the edit language,
        mimicking a translation step that silently failed.
        """
        keep = set(quadrants)
        leak_rng = np.random.default_rng(seed + 15485863)
        rng = np.random.default_rng(seed + 104729)
        samples = []
        for i, fact in enumerate(self.sample_facts(n, seed)):
            fid = f"{prefix}-{i:05d}"
            for qlang in LANGS:
                in_scope = [
                    (self.prompt(fact.subject, fact.relation, qlang), "obj"),
                    (self.rephrase(fact.subject, fact.relation, qlang), "obj"),
                    (self.region_query(fact.subject, fact.relation, qlang), "region"),
                ]
                for elang in LANGS:
                    edit_text = self.descriptor(fact, elang, fid).text
                    sec = f"{fid}:{elang}>{qlang}"
                    outs = self._out_of_scope(fact, rng, distractors)
                    for j, (q, kind) in enumerate(in_scope):
                        answer = self.object_answer if kind == "obj" else self.region_answer
                        alang = qlang
                        if elang != qlang and untranslated and leak_rng.random() < untranslated:
                            alang = elang
                        samples.append(
                            ParallelSample(
                                f"{sec}:in:w:{j}", "synthetic", elang, qlang, "in", True,
                                edit_text, q, answer(fact.new_object, alang),
                            )
                        )
                        samples.append(
                            ParallelSample(
                                f"{sec}:in:wo:{j}", "synthetic", elang, qlang, "in", False,
                                None, q, answer(fact.old_object, qlang),
                            )
                        )
                    for j, (s, r) in enumerate(outs):
                        q = self.prompt(s, r, qlang)
                        a = self.object_answer(self.background(s, r), qlang)
                        samples.append(
                            ParallelSample(f"{sec}:out:w:{j}", "synthetic", elang, qlang, "out", True, edit_text, q, a)
                        )
                        samples.append(
                            ParallelSample(f"{sec}:out:wo:{j}", "synthetic", elang, qlang, "out", False, None, q, a)
                        )
        return [s for s in samples if f"{s.scope}:{'w' if s.with_edit else 'wo'}" in keep]


def marker_of(tokens: Iterable[str]) -> str | None:
    for t in tokens:
        for lang, m in MARKERS.items():
            if t == m:
                return lang
        return None
    return None
