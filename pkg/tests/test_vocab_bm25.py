import math

import numpy as np
import pytest

from pssl.bm25 import BM25Index, bm25_candidates
from pssl.logs import Document, QueryEvent
from pssl.vocab import PAD, UNK, USER, Vocabulary, build_vocab, token_counts


def corpus_from(texts):
    return {f"d{i}": Document(f"d{i}", tuple(t.split())) for i, t in enumerate(texts)}


def bm25_oracle(query, doc_terms, all_docs, k1=1.2, b=0.75):
    """Textbook scalar Okapi BM25, written without the index."""
    n = len(all_docs)
    avgdl = sum(len(d) for d in all_docs) / n
    score = 0.0
    for term in set(query):
        df = sum(1 for d in all_docs if term in d)
        tf = doc_terms.count(term)
        if tf == 0:
            continue
        idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
        score += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(doc_terms) / avgdl))
    return score


def test_reserved_ids_and_unknown_tokens():
    v = Vocabulary(["b", "a"])
    assert (v.id("<pad>"), v.id("<unk>"), v.id("[User]")) == (PAD, UNK, USER)
    assert v.encode(["a", "zzz"]) == [4, UNK]
    assert len(v) == 5


def test_from_counts_orders_by_frequency_then_token():
    v = Vocabulary.from_counts({"x": 2, "b": 3, "a": 3, "rare": 1}, min_count=2)
    assert v.tokens[3:] == ["a", "b", "x"]
    with pytest.raises(ValueError):
        Vocabulary.from_counts({}, min_count=0)


def test_vocab_save_load_roundtrip(tmp_path):
    v = Vocabulary(["z", "y", "x"])
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == v


def test_token_counts_count_each_candidate_doc_once():
    corpus = corpus_from(["apple pie", "car"])
    evs = {"u": [QueryEvent("u", 1, "apple", (("d0", 1),), ()),
                 QueryEvent("u", 2, "apple", (("d0", 1),), ())]}
    c = token_counts(evs, corpus)
    assert c == {"apple": 3, "pie": 1}
    assert "car" not in build_vocab(evs, corpus)


def test_bm25_matches_scalar_oracle_on_random_corpora():
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(12)]
    for _ in range(30):
        texts = [" ".join(rng.choice(words, size=rng.integers(1, 9))) for _ in range(rng.integers(2, 15))]
        corpus = corpus_from(texts)
        index = BM25Index(corpus)
        docs = [list(corpus[d].terms) for d in sorted(corpus)]
        query = list(rng.choice(words, size=rng.integers(1, 4)))
        for doc_id in corpus:
            want = bm25_oracle(query, list(corpus[doc_id].terms), docs)
            assert index.score(query, doc_id) == pytest.approx(want, abs=1e-12)


def test_repeated_query_terms_count_once():
    index = BM25Index(corpus_from(["a b", "b c"]))
    assert index.score(["a", "a"], "d0") == index.score(["a"], "d0")


def test_idf_is_positive_even_for_common_terms():
    index = BM25Index(corpus_from(["a", "a", "a b"]))
    assert index.idf("a") > 0


def test_top_k_breaks_ties_by_doc_id():
    index = BM25Index(corpus_from(["x y", "x y", "x", "z"]))
    top = bm25_candidates(["x"], index, 3)
    assert top == [("d2", 1), ("d0", 2), ("d1", 3)]
    with pytest.raises(ValueError):
        index.top_k([], 3)


def test_scores_only_cover_matching_docs():
    index = BM25Index(corpus_from(["x", "y"]))
    assert set(index.scores(["x"])) == {"d0"}
    assert index.score(["x"], "missing") == 0.0
