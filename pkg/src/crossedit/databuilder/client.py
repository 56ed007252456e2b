"""Chat-completion client with retries, bounded parallelism and a response cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from pathlib import Path
from typing import Any

import httpx

from ..errors import EmptyCompletion, ServiceError
from .templates import language_code

log = logging.getLogger(__name__)

API_KEY_ENV = "CROSSEDIT_API_KEY"

Transport = Callable[[dict], dict]


class TransientError(Exception):
    """A failure worth retrying (timeouts, 429, 5xx)."""


class HttpTransport:
    def __init__(self, endpoint: str, api_key: str | None = None, timeout: float = 60.0,
                 client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._client = client or httpx.Client(timeout=timeout)

    def __call__(self, payload: dict) -> dict:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            r = self._client.post(self.endpoint, json=payload, headers=headers)
        except httpx.TransportError as exc:
            raise TransientError(str(exc)) from exc
        if r.status_code == 429 or r.status_code >= 500:
            raise TransientError(f"HTTP {r.status_code}")
        if r.status_code >= 400:
            raise ServiceError(f"HTTP {r.status_code}: {r.text[:200]}")
        try:
            return r.json()
        except ValueError as exc:
            raise ServiceError("response is not JSON") from exc


def request_key(model: str, messages: Sequence[Mapping[str, str]], params: Mapping[str, Any]) -> str:
    doc = {"model": model, "messages": list(messages), "params": dict(params)}
    blob = json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _completion_text(body: Any) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ServiceError("malformed chat response") from exc
    if not isinstance(content, str):
        raise ServiceError("completion content is not text")
    return content


class ChatClient:
    """Sends chat requests; identical requests are answered from the cache.

    ``calls`` counts requests that reached the transport (retries included),
    ``cache_hits`` counts requests served from disk or memory.
    """

    def __init__(
        self,
        transport: Transport,
        model: str = "default",
        cache_dir=None,
        max_in_flight: int = 8,
        max_attempts: int = 5,
        backoff_base: float = 1.0,
        backoff_factor: float = 2.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.transport = transport
        self.model = model
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.max_in_flight = max_in_flight
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self._sleep = sleep
        self._slots = threading.Semaphore(max_in_flight)
        self._lock = threading.Lock()
        self._memory: dict[str, str] = {}
        self.calls = 0
        self.cache_hits = 0

    @classmethod
    def http(cls, endpoint: str, model: str, timeout: float = 60.0, **kwargs) -> ChatClient:
        return cls(HttpTransport(endpoint, timeout=timeout), model=model, **kwargs)

    def _cache_file(self, key: str) -> Path | None:
        return self.cache_dir / f"{key}.json" if self.cache_dir else None

    def _lookup(self, key: str) -> str | None:
        with self._lock:
            if key in self._memory:
                self.cache_hits += 1
                return self._memory[key]
        path = self._cache_file(key)
        if path and path.exists():
            text = json.loads(path.read_text(encoding="utf-8"))["content"]
            with self._lock:
                self._memory[key] = text
                self.cache_hits += 1
            return text
        return None

    def _store(self, key: str, text: str) -> None:
        with self._lock:
            self._memory[key] = text
        path = self._cache_file(key)
        if path is None:
            return
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump({"key": key, "content": text}, f, ensure_ascii=False)
        os.replace(tmp, path)

    def complete(self, messages: Sequence[Mapping[str, str]], temperature: float = 0.0,
                 max_tokens: int = 1024, **params: Any) -> str:
        sampling = {"temperature": temperature, "max_tokens": max_tokens, **params}
        key = request_key(self.model, messages, sampling)
        cached = self._lookup(key)
        if cached is not None:
            return cached
        payload = {"model": self.model, "messages": list(messages), **sampling}
        text = self._send(payload)
        if not text.strip():
            raise EmptyCompletion("service returned an empty completion")
        self._store(key, text)
        return text

    def prompt(self, content: str, **params: Any) -> str:
        return self.complete([{"role": "user", "content": content}], **params)

    def _send(self, payload: dict) -> str:
        delay = self.backoff_base
        for attempt in range(1, self.max_attempts + 1):
            with self._lock:
                self.calls += 1
            try:
                with self._slots:
                    return _completion_text(self.transport(payload))
            except TransientError as exc:
                if attempt == self.max_attempts:
                    raise ServiceError(f"giving up after {attempt} attempts: {exc}") from exc
                log.warning("transient failure (%s), retrying in %.1fs", exc, delay)
                self._sleep(delay)
                delay *= self.backoff_factor
        raise AssertionError("unreachable")


# -- offline mock ----------------------------------------------------------

_LAST = {
    "edit": re.compile(r"\[Edit description\]: (.*)\n"),
    "question": re.compile(r"\[Question\]: (.*)\n"),
    "subject": re.compile(r"\[Subject\]: (.*)\n"),
    "answer": re.compile(r"\[Answer\]: (.*)\n"),
    "changed": re.compile(r"\[Changed Answer\]: (.*)\n?"),
    "related": re.compile(r"question related to (.*?)\. The question should not reveal"),
    "secondary": re.compile(r"with (.*?) as secondary, avoiding unrelated content\.\n"),
}
_TRANSLATE_RE = re.compile(r"^Translate the following text from (\S+) to (\S+)\. Output only the translation\.\n\n(.*)\n\Z", re.S)


def _last(name: str, text: str) -> str:
    found = _LAST[name].findall(text)
    return found[-1] if found else ""


class MockTransport:
    """Deterministic stand-in for a chat service.

    Recognizes each bundled template from the prompt text and answers with a
    templated completion. Translations come back as ``⟦tgt:text⟧``. ``judge``
    and ``score`` may be callables of the prompt for tests that need rejections.
    """

    def __init__(self, score: int | Callable[[str], int] = 8, judge: bool | Callable[[str], bool] = True,
                 fail_first: int = 0):
        self.score = score
        self.judge = judge
        self.fail_first = fail_first
        self.requests = 0
        self._lock = threading.Lock()

    def __call__(self, payload: dict) -> dict:
        with self._lock:
            self.requests += 1
            n = self.requests
        if n <= self.fail_first:
            raise TransientError("mock outage")
        prompt = payload["messages"][-1]["content"]
        return {"choices": [{"message": {"role": "assistant", "content": self.reply(prompt, payload)}}]}

    def reply(self, prompt: str, payload: dict) -> str:
        m = _TRANSLATE_RE.match(prompt)
        if m:
            return f"⟦{language_code(m.group(2))}:{m.group(3)}⟧"
        if prompt.endswith("[Generated Question]: "):
            subject = _last("related", prompt)
            edit = _last("edit", prompt)
            tag = hashlib.sha256(f"{edit}|{payload.get('seed', 0)}".encode()).hexdigest()[:6]
            return f"Which fact about {subject} does the record {tag} describe?"
        if prompt.endswith("[Generated Answer]: "):
            return f"{_last('secondary', prompt)}."
        if "[Changed Answer]:" in prompt:
            subject = _last("subject", prompt)
            return (
                "Irrelevant attribute recalled: place of origin\n"
                f"New question: Where does {subject} come from?\n"
                f"New answer: the origin of {subject}"
            )
        if "output \"[T]\"" in prompt:
            ok = self.judge(prompt) if callable(self.judge) else self.judge
            return "The answer follows the edit description. [T]" if ok else "[F] The answer ignores the edit."
        if "[Sentence complexity: score;" in prompt:
            s = self.score(prompt) if callable(self.score) else self.score
            return f"[Sentence complexity: {s}; Vocabulary richness: {s}; Faithfulness: {s}; Overall score: {s}]"
        return "OK"
