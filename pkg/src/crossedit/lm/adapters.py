"""ScoringModel over a remote chat service that exposes token log-probabilities.

The request is the usual chat document plus two extension fields: the prompt
as token ids and the scoring mode. Two modes are used:

``{"logprobs": "next", "prompt_token_ids": [...]}`` returns
``{"next_token_logprobs": [v_0, ..., v_{V-1}]}``;
``{"logprobs": "forced", "prompt_token_ids": [...], "target_token_ids": [...]}``
returns ``{"token_logprobs": [...]}`` with one entry per target token.
"""

from __future__ import annotations

import time
from collections.abc import Callable, Sequence

import numpy as np

from ..databuilder.client import HttpTransport, Transport, TransientError
from ..errors import ModelError, ServiceError
from .model import score_sequence
from .vocab import Vocab


class ChatLogprobModel:
    def __init__(
        self,
        transport: Transport,
        vocab: Vocab,
        model: str = "default",
        context_limit: int = 4096,
        concurrent_safe: bool = True,
        max_attempts: int = 5,
        backoff_base: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.transport = transport
        self.vocab = vocab
        self.model = model
        self.context_limit = context_limit
        self.concurrent_safe = concurrent_safe
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._sleep = sleep

    @classmethod
    def http(cls, endpoint: str, vocab: Vocab, model: str = "default", timeout: float = 60.0, **kwargs):
        return cls(HttpTransport(endpoint, timeout=timeout), vocab, model=model, **kwargs)

    vocab_size = property(lambda self: len(self.vocab))
    eos_id = property(lambda self: self.vocab.eos_id)

    def _post(self, ids: Sequence[int], **extra) -> dict:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": self.vocab.detokenize(ids)}],
            "temperature": 0.0,
            "max_tokens": 0,
            "prompt_token_ids": list(ids),
            **extra,
        }
        delay = self.backoff_base
        for attempt in range(1, self.max_attempts + 1):
            try:
                return self.transport(payload)
            except TransientError as exc:
                if attempt == self.max_attempts:
                    raise ServiceError(f"logprob request failed after {attempt} attempts: {exc}") from exc
                self._sleep(delay)
                delay *= 2
        raise AssertionError("unreachable")

    def next_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        body = self._post(prefix, logprobs="next")
        lp = np.asarray(body.get("next_token_logprobs", ()), dtype=np.float64)
        if lp.shape != (self.vocab_size,):
            raise ModelError(f"expected {self.vocab_size} log-probs, got shape {lp.shape}")
        return lp

    def score_tokens(self, context: Sequence[int], target: Sequence[int]) -> list[float]:
        body = self._post(context, logprobs="forced", target_token_ids=list(target))
        lps = body.get("token_logprobs")
        if not isinstance(lps, list) or len(lps) != len(target):
            raise ModelError("forced-scoring response does not match the target length")
        return [float(x) for x in lps]


class LocalLogprobTransport:
    """Serves the extension protocol from an in-process model; for tests and dry runs."""

    def __init__(self, model):
        self.model = model
        self.requests = 0

    def __call__(self, payload: dict) -> dict:
        self.requests += 1
        ids = payload["prompt_token_ids"]
        if payload.get("logprobs") == "forced":
            return {"token_logprobs": score_sequence(self.model, ids, payload["target_token_ids"])}
        return {"next_token_logprobs": self.model.next_logprobs(ids).tolist()}
