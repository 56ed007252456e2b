"""Prompt templates stored as package data.

The generation templates end with a ``[Generated ...]: <slot>`` line; that
last slot is where the service's completion goes, so rendering drops it and
leaves the field marker open.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources

LANGUAGE_NAMES = {"en": "English", "zh": "Chinese", "de": "German", "fr": "French", "es": "Spanish", "ja": "Japanese"}


def language_name(code: str) -> str:
    return LANGUAGE_NAMES.get(code, code)


def language_code(name: str) -> str:
    return {v: k for k, v in LANGUAGE_NAMES.items()}.get(name, name)


TEMPLATE_NAMES = ("query_gen", "answer_gen", "out_of_scope_gen", "judge", "score", "translate")

# placeholders each template must contain (the completion slot excluded)
REQUIRED = {
    "query_gen": ("<instruct>", "<subject>"),
    "answer_gen": ("<instruct>", "<question>", "<subject>", "<new answer>"),
    "out_of_scope_gen": ("<question>", "<subject>", "<new answer>"),
    "judge": ("<instruct>", "<question>", "<answer>"),
    "score": ("<instruct>", "<question>", "<answer>"),
    "translate": ("<source language>", "<target language>", "<text>"),
}

_SLOT_RE = re.compile(r"(\[Generated [A-Za-z]+\]: )<[a-z ]+>\n?\Z")
_PLACEHOLDER_RE = re.compile(r"<(instruct|subject|question|answer|new answer|source language|target language|text)>")


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown template {name!r}")
    return resources.files(__package__).joinpath("templates").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def template_path(name: str):
    return resources.files(__package__).joinpath("templates").joinpath(f"{name}.txt")


def check_template(name: str, body: str) -> None:
    prompt = _SLOT_RE.sub(r"\1", body)
    missing = [p for p in REQUIRED[name] if p not in prompt]
    if missing:
        raise ValueError(f"template {name!r} lacks {missing}")


def render(name: str, **values: str) -> str:
    """Fill a template; keyword ``new_answer`` fills ``<new answer>`` and so on."""
    body = load_template(name)
    check_template(name, body)
    prompt = _SLOT_RE.sub(r"\1", body)
    filled = {k.replace("_", " "): v for k, v in values.items()}
    missing = [p for p in REQUIRED[name] if p[1:-1] not in filled]
    if missing:
        raise KeyError(f"{name}: no value for {missing}")

    def sub(m: re.Match) -> str:
        key = m.group(1)
        return filled[key] if key in filled else m.group(0)

    return _PLACEHOLDER_RE.sub(sub, prompt)
