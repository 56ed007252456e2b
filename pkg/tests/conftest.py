from __future__ import annotations

import pytest

from crossedit.lm.model import ToyLM, ToyLMConfig
from crossedit.toy import ToyWorld
from crossedit.types import EditDescriptor, EvalCase, Probe


@pytest.fixture(scope="session")
def world():
    return ToyWorld()


@pytest.fixture(scope="session")
def toy_vocab(world):
    return world.vocab()


@pytest.fixture
def small_model(toy_vocab):
    cfg = ToyLMConfig(vocab_size=len(toy_vocab), hidden=16, n_layers=2, n_heads=2, mlp_hidden=16, context_limit=96, seed=3)
    return ToyLM(cfg)


def make_case(i: int, langs=("en", "zh"), tag: str = "zsre", old: bool = True) -> EvalCase:
    cid = f"case-{i:03d}"
    edit = {
        lang: EditDescriptor(
            cid, lang, f"subj{i}", f"where is subj{i} {lang} ?", f"place{i} {lang}",
            f"old{i} {lang}" if old else None,
        )
        for lang in langs
    }
    return EvalCase(
        edit=edit,
        rephrases={lang: (f"subj{i} located where {lang} ?",) for lang in langs},
        locality_probes={lang: (Probe(f"who wrote book{i} {lang} ?", f"author{i}"),) for lang in langs},
        portability_probes={lang: (Probe(f"region of subj{i} {lang} ?", f"north {lang}"),) for lang in langs},
        source_tag=tag,
    )


@pytest.fixture
def cases():
    return [make_case(i) for i in range(6)]
