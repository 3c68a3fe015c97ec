"""Brute-force reference implementations shared by unit and acceptance tests."""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np

from pssl.logs import QueryEvent, sessionize


def random_log(rng: np.random.Generator, max_events: int = 500) -> dict[str, list[QueryEvent]]:
    """Small random click log with heavy query/doc reuse so pairs actually occur."""
    n_users = int(rng.integers(2, 9))
    queries = [f"q{i}" if i % 3 else f"q{i} x" for i in range(int(rng.integers(2, 8)))]
    docs = [f"d{i}" for i in range(int(rng.integers(3, 10)))]
    total = int(rng.integers(n_users, max_events + 1))
    per_user = rng.multinomial(total - n_users, np.ones(n_users) / n_users) + 1
    events = {}
    for u, count in enumerate(per_user):
        user = f"u{u}"
        stamps = np.sort(rng.integers(0, 10 * count, size=count))
        evs = []
        for ts in stamps:
            k = int(rng.integers(1, min(5, len(docs)) + 1))
            cands = list(rng.choice(docs, size=k, replace=False))
            n_clicks = int(rng.integers(0, k + 1))
            clicked = list(rng.choice(cands, size=n_clicks, replace=False))
            q = queries[int(rng.integers(len(queries)))]
            evs.append(QueryEvent(user, int(ts), q, tuple((d, i) for i, d in enumerate(cands, 1)),
                                  tuple((d, None) for d in clicked)))
        events[user] = evs
    return sessionize(events)


def entropy_bits(query, events) -> float:
    counts = {}
    for evs in events.values():
        for e in evs:
            if e.query == query:
                for d, _ in e.clicks:
                    counts[d] = counts.get(d, 0) + 1
    total = sum(counts.values())
    return -sum(c / total * math.log2(c / total) for c in counts.values())


def brute_doc_pairs(events) -> set:
    out = set()
    for u, evs in events.items():
        for e in evs:
            clicked = {d for d, _ in e.clicks}
            for a in clicked:
                for b in clicked:
                    if a < b:
                        out.add((u, e.query, frozenset((a, b))))
    return out


def brute_query_pairs(events) -> set:
    out = set()
    for u, evs in events.items():
        for e1 in evs:
            for e2 in evs:
                if e1.query >= e2.query:
                    continue
                for d in {d for d, _ in e1.clicks} & {d for d, _ in e2.clicks}:
                    out.add((u, frozenset((e1.query, e2.query)), d))
    return out


def brute_user_pairs(events, threshold: float = 1.0) -> set:
    clicked = {}
    for u, evs in events.items():
        for e in evs:
            for d, _ in e.clicks:
                clicked.setdefault((u, e.query), set()).add(d)
    queries = {q for (_, q) in clicked}
    ambiguous = {q for q in queries if entropy_bits(q, events) > threshold}
    out = set()
    for ua, ub in combinations(sorted(events), 2):
        for q in ambiguous:
            for d in clicked.get((ua, q), set()) & clicked.get((ub, q), set()):
                out.add((frozenset((ua, ub)), q, d))
    return out


# ranking metrics ---------------------------------------------------------------

def brute_ap(labels) -> float:
    """Mean over relevant positions of precision at that cutoff, by explicit slicing."""
    labels = list(labels)
    rel_positions = [k for k in range(len(labels)) if labels[k]]
    if not rel_positions:
        return 0.0
    return sum(sum(labels[:k + 1]) / (k + 1) for k in rel_positions) / len(rel_positions)


def brute_rr(labels) -> float:
    for k, rel in enumerate(labels):
        if rel:
            return 1.0 / (k + 1)
    return 0.0


def brute_p_improve(original, reranked, relevant) -> float:
    """(corrected - broken) / inverse pairs of the original order, pair by pair."""
    pos_o = {d: i for i, d in enumerate(original)}
    pos_r = {d: i for i, d in enumerate(reranked)}
    total = corrected = broken = 0
    for a in original:
        for b in original:
            if a in relevant and b not in relevant:
                total += 1
                if pos_o[a] > pos_o[b] and pos_r[a] < pos_r[b]:
                    corrected += 1
                if pos_o[a] < pos_o[b] and pos_r[a] > pos_r[b]:
                    broken += 1
    return 0.0 if total == 0 else (corrected - broken) / total
