from __future__ import annotations

import json
from collections.abc import Iterable

from ..types import toy_tokenize

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


class Vocab:
    """Word-level vocabulary over the toy tokenizer."""

    def __init__(self, tokens: Iterable[str]):
        seen = list(SPECIALS)
        for t in tokens:
            if t not in seen:
                seen.append(t)
        self.itos = seen
        self.stoi = {t: i for i, t in enumerate(seen)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def bos_id(self) -> int:
        return self.stoi[BOS]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    def tokenize(self, text: str) -> list[str]:
        return toy_tokenize(text)

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(t, self.unk_id) for t in toy_tokenize(text)]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(t for t in self.decode(ids) if t not in SPECIALS)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.itos, f, ensure_ascii=False)

    @classmethod
    def load(cls, path) -> Vocab:
        with open(path, encoding="utf-8") as f:
            itos = json.load(f)
        if list(itos[: len(SPECIALS)]) != list(SPECIALS):
            raise ValueError("vocabulary file does not start with the special tokens")
        return cls(itos)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> Vocab:
        toks: list[str] = []
        seen = set()
        for text in texts:
            for t in toy_tokenize(text):
                if t not in seen:
                    seen.add(t)
                    toks.append(t)
        return cls(toks)
