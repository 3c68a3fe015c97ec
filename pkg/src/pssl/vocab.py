from __future__ import annotations

from collections import Counter
from typing import Iterable, Mapping, Sequence

from .logs import Document, QueryEvent

PAD, UNK, USER = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "[User]")


class Vocabulary:
    """Token <-> id mapping with reserved ids PAD=0, UNK=1, USER=2."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, terms: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in terms]

    @classmethod
    def from_counts(cls, counts: Mapping[str, int], min_count: int = 1) -> "Vocabulary":
        if min_count < 1:
            raise ValueError("min_count must be >= 1")
        kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED]
        kept.sort(key=lambda t: (-counts[t], t))
        return cls(kept)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for t in self.tokens[len(RESERVED):]:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])


def token_counts(events: Mapping[str, list[QueryEvent]], corpus: Mapping[str, Document]) -> Counter:
    """Query terms per event plus terms of each distinct candidate document."""
    counts: Counter = Counter()
    docs: set[str] = set()
    for evs in events.values():
        for ev in evs:
            counts.update(ev.terms)
            docs.update(ev.doc_ids)
    for d in sorted(docs):
        if d in corpus:
            counts.update(corpus[d].terms)
    return counts


def build_vocab(events: Mapping[str, list[QueryEvent]], corpus: Mapping[str, Document],
                min_count: int = 1) -> Vocabulary:
    return Vocabulary.from_counts(token_counts(events, corpus), min_count)
