from __future__ import annotations

import math
from collections import Counter, defaultdict
from typing import Iterable, Mapping

from .logs import Document


class BM25Index:
    """Okapi BM25 over a document store.

    idf uses the non-negative ``log(1 + (N - df + 0.5) / (df + 0.5))`` form;
    query terms are treated as a set.
    """

    def __init__(self, corpus: Mapping[str, Document], k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self.n_docs = len(corpus)
        self.doc_len: dict[str, int] = {}
        self.tf: dict[str, Counter] = {}
        self.postings: dict[str, list[str]] = defaultdict(list)
        total = 0
        for doc_id in sorted(corpus):
            terms = corpus[doc_id].terms
            self.doc_len[doc_id] = len(terms)
            total += len(terms)
            tf = Counter(terms)
            self.tf[doc_id] = tf
            for t in tf:
                self.postings[t].append(doc_id)
        self.avgdl = total / self.n_docs if self.n_docs else 0.0

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def _term_score(self, term: str, doc_id: str) -> float:
        tf = self.tf[doc_id].get(term, 0)
        if tf == 0:
            return 0.0
        norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[doc_id] / self.avgdl)
        return self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm)

    def score(self, terms: Iterable[str], doc_id: str) -> float:
        if doc_id not in self.tf:
            return 0.0
        return sum(self._term_score(t, doc_id) for t in dict.fromkeys(terms))

    def scores(self, terms: Iterable[str]) -> dict[str, float]:
        """Scores of every document matching at least one query term."""
        terms = list(dict.fromkeys(terms))
        matched = set()
        for t in terms:
            matched.update(self.postings.get(t, ()))
        return {d: self.score(terms, d) for d in matched}

    def top_k(self, terms: Iterable[str], k: int) -> list[tuple[str, int]]:
        terms = list(terms)
        if not terms:
            raise ValueError("empty query")
        scored = sorted(self.scores(terms).items(), key=lambda kv: (-kv[1], kv[0]))
        return [(d, rank) for rank, (d, _) in enumerate(scored[:k], 1)]


def bm25_candidates(query_terms, index: BM25Index, k: int) -> list[tuple[str, int]]:
    """Top-k (doc_id, original_rank) by BM25; ties broken by doc_id."""
    return index.top_k(query_terms, k)
