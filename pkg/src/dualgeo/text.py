"""Word-level tokenizer with positional number mapping, and the text vocabulary."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable

from .knowledge import KNOWLEDGE_SEPARATOR

_TOKEN_RE = re.compile(r"\[KSEP\]|\d+(?:\.\d+)?|[A-Za-z]+|\S")
_NUM_RE = re.compile(r"^\d+(?:\.\d+)?$")

PAD_WORD, UNK_WORD = "[PAD]", "[UNK]"


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def map_numbers(text: str) -> tuple[list[str], list[float]]:
    """Tokenize and replace the i-th numeral (text order) with ``N_i``.

    Mapping is purely positional: repeated values still get fresh slots.
    """
    tokens, values = [], []
    for tok in tokenize(text):
        if _NUM_RE.match(tok):
            tokens.append(f"N_{len(values)}")
            values.append(float(tok))
        else:
            tokens.append(tok)
    return tokens, values


class TextVocabulary:
    def __init__(self, words: Iterable[str], max_numbers: int = 16):
        base = [PAD_WORD, UNK_WORD, KNOWLEDGE_SEPARATOR] + [f"N_{i}" for i in range(max_numbers)]
        extra = sorted(set(words) - set(base))
        self.words = base + extra
        self.word_to_id = {w: i for i, w in enumerate(self.words)}
        self.pad_id = 0
        self.unk_id = 1

    def __len__(self):
        return len(self.words)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.word_to_id.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.words[i] for i in ids]

    @classmethod
    def build(cls, texts: Iterable[str]) -> "TextVocabulary":
        words = set()
        for t in texts:
            words.update(map_numbers(t)[0])
        return cls(words)

    def to_list(self) -> list[str]:
        return list(self.words)

    @classmethod
    def from_list(cls, words: list[str]) -> "TextVocabulary":
        vocab = cls(words)
        if vocab.words != list(words):
            raise ValueError("text vocabulary list is not in canonical order")
        return vocab

    def save(self, path):
        Path(path).write_text(json.dumps(self.words, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TextVocabulary":
        return cls.from_list(json.loads(Path(path).read_text(encoding="utf-8")))
