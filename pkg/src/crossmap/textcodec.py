"""Word-level tokenization and fixed-length instruction encoding."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import NEG_INF

PAD, CLS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<cls>", "<eos>", "<unk>")
MAX_LEN = 42
MAX_CONTENT = MAX_LEN - 2

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    """Lowercase, then split into words and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


class Vocabulary:
    def __init__(self, token_to_id: dict[str, int]):
        for i, tok in enumerate(RESERVED):
            if token_to_id.get(tok) != i:
                raise ValueError(f"reserved token {tok} must have id {i}")
        ids = sorted(token_to_id.values())
        if ids != list(range(len(ids))):
            raise ValueError("vocabulary ids must be contiguous from 0")
        self.token_to_id = dict(token_to_id)
        self.id_to_token = {i: t for t, i in token_to_id.items()}

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.token_to_id == other.token_to_id

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, sort_keys=True, indent=0)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls({k: int(v) for k, v in json.loads(text).items()})

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text())


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Assign ids by descending frequency, ties broken lexicographically."""
    counts: Counter = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        counts.update(tokenize(text))
    if n_docs == 0:
        raise ValueError("corpus must be non-empty")
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count and tok not in RESERVED),
        key=lambda t: (-counts[t], t),
    )
    mapping = {tok: i for i, tok in enumerate(RESERVED)}
    for tok in kept:
        mapping[tok] = len(mapping)
    return Vocabulary(mapping)


@dataclass(frozen=True)
class EncodedInstruction:
    ids: np.ndarray
    attention_mask: np.ndarray
    length: int


def encode(vocab: Vocabulary, text: str) -> EncodedInstruction:
    tokens = tokenize(text)[:MAX_CONTENT]
    ids = [CLS] + [vocab.token_to_id.get(t, UNK) for t in tokens] + [EOS]
    length = len(ids)
    ids = ids + [PAD] * (MAX_LEN - length)
    mask = np.where(np.arange(MAX_LEN) < length, 0.0, NEG_INF)
    return EncodedInstruction(np.asarray(ids, dtype=np.int64), mask, length)


def decode(vocab: Vocabulary, ids: Sequence[int]) -> str:
    """Join content tokens with single spaces; stops at the first EOS.

    UNK renders as ``<unk>``.
    """
    words = []
    for i in ids:
        i = int(i)
        if i not in vocab.id_to_token:
            raise KeyError(f"unknown token id {i}")
        if i == EOS:
            break
        if i in (PAD, CLS):
            continue
        words.append(vocab.id_to_token[i])
    return " ".join(words)
