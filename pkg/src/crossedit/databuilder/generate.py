"""One function per prompt: render the template, call the service, parse the reply."""

from __future__ import annotations

import re

from ..errors import JudgeAmbiguous, ParseError, ScoreParseError
from ..types import EditDescriptor, QualityScore
from .client import ChatClient
from .templates import language_name, render

_NEW_Q = re.compile(r"New question:\s*(.+)")
_NEW_A = re.compile(r"New answer:\s*(.+)")
_SCORE_LINE = re.compile(
    r"\[?\s*Sentence complexity:\s*(?P<syntactic>[^;\]]+);\s*"
    r"Vocabulary richness:\s*(?P<lexical>[^;\]]+);\s*"
    r"Faithfulness:\s*(?P<faithfulness>[^;\]]+);\s*"
    r"Overall score:\s*(?P<overall>[^;\]\n]+?)\s*\]?\s*$",
    re.M,
)
_OVERALL_ONLY = re.compile(r"Overall score:\s*([^;\]\n]+)")


def instruct_text(edit: EditDescriptor) -> str:
    return edit.text


def _completion(client: ChatClient, prompt: str, attempt: int) -> str:
    # attempt 0 keeps the plain request so its cache key is stable across builds
    params = {"seed": attempt} if attempt else {}
    return client.prompt(prompt, **params).strip()


def generate_query(client: ChatClient, edit: EditDescriptor, attempt: int = 0) -> str:
    prompt = render("query_gen", instruct=instruct_text(edit), subject=edit.subject)
    return _completion(client, prompt, attempt)


def generate_answer(client: ChatClient, edit: EditDescriptor, question: str, attempt: int = 0) -> str:
    prompt = render(
        "answer_gen", instruct=instruct_text(edit), question=question, subject=edit.subject,
        new_answer=edit.target_new,
    )
    return _completion(client, prompt, attempt)


def parse_out_of_scope(completion: str) -> tuple[str, str]:
    q = _NEW_Q.findall(completion)
    a = _NEW_A.findall(completion)
    if not q or not a:
        raise ParseError("completion lacks 'New question:' or 'New answer:'")
    return q[-1].strip(), a[-1].strip()


def generate_out_of_scope(client: ChatClient, edit: EditDescriptor, max_attempts: int = 3) -> tuple[str, str]:
    prompt = render("out_of_scope_gen", question=edit.prompt, subject=edit.subject, new_answer=edit.target_new)
    err: ParseError | None = None
    for attempt in range(max_attempts):
        try:
            return parse_out_of_scope(_completion(client, prompt, attempt))
        except ParseError as exc:
            err = exc
    raise ParseError(f"{edit.id}: out-of-scope fields missing after {max_attempts} attempts") from err


def parse_judgement(completion: str) -> bool:
    t, f = "[T]" in completion, "[F]" in completion
    if t == f:
        raise JudgeAmbiguous(f"judge output has {'both' if t else 'neither'} of [T]/[F]")
    return t


def judge_sample(client: ChatClient, edit: EditDescriptor, question: str, answer: str) -> bool:
    prompt = render("judge", instruct=instruct_text(edit), question=question, answer=answer)
    return parse_judgement(_completion(client, prompt, 0))


def _score_int(raw: str, name: str) -> int:
    raw = raw.strip()
    try:
        v = float(raw)
    except ValueError as exc:
        raise ScoreParseError(f"{name}: {raw!r} is not a number") from exc
    if not v.is_integer():
        raise ScoreParseError(f"{name}: {raw!r} is not an integer score")
    if not 1 <= v <= 10:
        raise ScoreParseError(f"{name}: {raw!r} outside 1..10")
    return int(v)


def parse_scores(completion: str) -> QualityScore:
    m = None
    for m in _SCORE_LINE.finditer(completion):
        pass
    if m is None:
        lone = _OVERALL_ONLY.search(completion)
        if lone:
            _score_int(lone.group(1), "overall")
        raise ScoreParseError("no four-score line in completion")
    return QualityScore(**{k: _score_int(v, k) for k, v in m.groupdict().items()})


def score_sample(client: ChatClient, edit: EditDescriptor, question: str, answer: str) -> QualityScore:
    prompt = render("score", instruct=instruct_text(edit), question=question, answer=answer)
    return parse_scores(_completion(client, prompt, 0))


def translate(client: ChatClient, text: str, src: str, tgt: str) -> str:
    if src == tgt:
        return text
    prompt = render(
        "translate", source_language=language_name(src), target_language=language_name(tgt), text=text,
    )
    return _completion(client, prompt, 0)
