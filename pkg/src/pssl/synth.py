"""Deterministic synthetic query logs with planted per-user intents.

Every user has a home topic. Ambiguous one-word queries are shared by two
topics; their candidate documents tie under BM25, and each user clicks the
documents of their home-topic intent. Ordinary queries are 1-4 words drawn
from a target document, which yields re-finding (query pairs) and optional
second clicks (document pairs).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bm25 import BM25Index
from .logs import WEEK_SECS, Document, QueryEvent, sessionize, write_documents, write_events
from .mining import mine_document_pairs, mine_query_pairs, user_pair_anchors


class InfeasibleConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 120
    n_topics: int = 6
    words_per_topic: int = 30
    docs_per_topic: int = 30
    doc_len: int = 8
    queries_per_user: int = 40
    ambiguous_fraction: float = 0.25
    n_ambiguous: int = 6
    docs_per_intent: int = 2
    refind_rate: float = 0.3
    multi_click_rate: float = 0.3
    session_continue: float = 0.35
    max_session_len: int = 3
    preference_noise: float = 0.02
    off_topic_rate: float = 0.1
    position_bias: float = 0.0
    record_dwell: bool = False
    candidates: int = 10
    weeks: int = 13
    start_time: int = 1_141_171_200
    seed: int = 0
    min_dp: int = 1
    min_qp: int = 1
    min_up: int = 1

    def validate(self) -> None:
        counts = ("n_users", "n_topics", "words_per_topic", "docs_per_topic", "doc_len",
                  "queries_per_user", "docs_per_intent", "max_session_len", "candidates", "weeks")
        for name in counts:
            if getattr(self, name) < 1:
                raise InfeasibleConfigError(f"{name} must be >= 1")
        for name in ("ambiguous_fraction", "refind_rate", "multi_click_rate", "session_continue",
                     "preference_noise", "off_topic_rate", "position_bias"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InfeasibleConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.ambiguous_fraction > 0:
            if self.n_topics < 2:
                raise InfeasibleConfigError("ambiguous queries need at least two topics")
            if self.n_ambiguous < 1:
                raise InfeasibleConfigError("ambiguous_fraction > 0 needs n_ambiguous >= 1")
        if self.ambiguous_fraction >= 1.0:
            raise InfeasibleConfigError("ambiguous_fraction must be < 1 so users build topical history")
        if self.doc_len < 2:
            raise InfeasibleConfigError("doc_len must be >= 2")


@dataclass
class PlantedTruth:
    home_topic: dict[str, int] = field(default_factory=dict)
    preference: dict[tuple[str, str], int] = field(default_factory=dict)
    intents: dict[str, tuple[int, int]] = field(default_factory=dict)
    doc_topic: dict[str, int] = field(default_factory=dict)
    doc_query: dict[str, str] = field(default_factory=dict)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["kind", "key", "attribute", "value"])
            for u in sorted(self.home_topic):
                w.writerow(["user", u, "home_topic", self.home_topic[u]])
            for (u, q) in sorted(self.preference):
                w.writerow(["preference", u, q, self.preference[(u, q)]])
            for q in sorted(self.intents):
                w.writerow(["query", q, "intents", ",".join(map(str, self.intents[q]))])
            for d in sorted(self.doc_topic):
                w.writerow(["doc", d, "topic", self.doc_topic[d]])
            for d in sorted(self.doc_query):
                w.writerow(["doc", d, "ambiguous_query", self.doc_query[d]])

    @classmethod
    def read(cls, path) -> "PlantedTruth":
        t = cls()
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh, delimiter="\t"))[1:]
        for kind, key, attr, value in rows:
            if kind == "user":
                t.home_topic[key] = int(value)
            elif kind == "preference":
                t.preference[(key, attr)] = int(value)
            elif kind == "query":
                a, b = value.split(",")
                t.intents[key] = (int(a), int(b))
            elif attr == "topic":
                t.doc_topic[key] = int(value)
            else:
                t.doc_query[key] = value
        return t

    def intent_docs(self, query: str, topic: int) -> set[str]:
        return {d for d, q in self.doc_query.items() if q == query and self.doc_topic[d] == topic}


@dataclass
class SynthLog:
    corpus: dict[str, Document]
    events: dict[str, list[QueryEvent]]
    truth: PlantedTruth


def _topic_word(t: int, j: int) -> str:
    return f"t{t}w{j}"


def generate_log(cfg: SynthConfig) -> SynthLog:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    T, W = cfg.n_topics, cfg.words_per_topic
    zipf = 1.0 / np.arange(1, W + 1) ** 0.8
    zipf /= zipf.sum()
    truth = PlantedTruth()

    # ambiguous words and their two intents
    n_amb = cfg.n_ambiguous if cfg.ambiguous_fraction > 0 else 0
    amb_words = [f"amb{k}" for k in range(n_amb)]
    for k, w in enumerate(amb_words):
        a = k % T
        b = (a + 1 + (k // T) % (T - 1)) % T
        truth.intents[w] = (a, b)

    # documents: drawn with raw names first, ids assigned by a random permutation
    raw_docs: list[tuple[tuple[str, ...], int, str | None]] = []
    for t in range(T):
        for _ in range(cfg.docs_per_topic):
            idx = rng.choice(W, size=cfg.doc_len, p=zipf)
            raw_docs.append((tuple(_topic_word(t, j) for j in idx), t, None))
    for w in amb_words:
        for t in truth.intents[w]:
            for _ in range(cfg.docs_per_intent):
                idx = rng.choice(W, size=cfg.doc_len - 1, replace=False, p=zipf)
                raw_docs.append(((w, *(_topic_word(t, j) for j in idx)), t, w))
    ids = rng.permutation(len(raw_docs))
    corpus: dict[str, Document] = {}
    topic_docs: dict[int, list[str]] = {t: [] for t in range(T)}
    for (terms, t, w), i in zip(raw_docs, ids):
        doc_id = f"d{i:05d}"
        corpus[doc_id] = Document(doc_id, terms)
        truth.doc_topic[doc_id] = t
        topic_docs[t].append(doc_id)
        if w is not None:
            truth.doc_query[doc_id] = w
    for t in topic_docs:
        topic_docs[t].sort()
    amb_docs = {w: sorted(d for d, q in truth.doc_query.items() if q == w) for w in amb_words}
    index = BM25Index(corpus, 1.2, 0.75)

    span = cfg.weeks * WEEK_SECS
    events: dict[str, list[QueryEvent]] = {}
    deferred = []  # ambiguous events, filled in once their intent order is known
    width = len(str(cfg.n_users - 1))
    for u in range(cfg.n_users):
        user = f"u{u:0{width}d}"
        home = u % T
        truth.home_topic[user] = home
        my_amb = [w for w in amb_words if home in truth.intents[w]]
        for w in my_amb:
            truth.preference[(user, w)] = home
        favorites: list[str] = []
        plans = []  # list of sessions, each a list of (kind, payload)
        n_left = cfg.queries_per_user
        while n_left > 0:
            if my_amb and rng.random() < cfg.ambiguous_fraction:
                plans.append([("amb", my_amb[rng.integers(len(my_amb))])])
                n_left -= 1
                continue
            length = 1
            while length < min(cfg.max_session_len, n_left) and rng.random() < cfg.session_continue:
                length += 1
            plans.append([("topic", None)] * length)
            n_left -= length
        starts = np.sort(rng.uniform(0, span - 3600, size=len(plans)).astype(np.int64))
        user_events = []
        last_t = -1
        for plan, start in zip(plans, starts):
            t = max(int(start), last_t + 1)
            prev_terms: list[str] = []
            target = None
            for kind, payload in plan:
                if kind == "amb":
                    deferred.append((t, user, len(user_events), payload, home))
                    ev = None
                else:
                    if target is None:
                        target = _pick_target(cfg, rng, home, favorites, topic_docs, T)
                    terms = _query_terms(rng, corpus[target].terms, prev_terms)
                    prev_terms = terms
                    ev = _topic_event(cfg, rng, user, t, terms, target, index, truth)
                    for d in ev.clicked:
                        if d not in favorites and truth.doc_topic[d] == home:
                            favorites.append(d)
                user_events.append(ev)
                last_t = t
                t += int(rng.integers(20, 120))
        events[user] = user_events
    # Which intent is listed first is balanced in blocks of two over global time,
    # so every time window shows the preferred intent first about half the time.
    deferred.sort(key=lambda x: (x[0], x[1]))
    for k, (t, user, pos, word, home) in enumerate(deferred):
        if k % 2 == 0:
            first = bool(rng.integers(2))
        else:
            first = not first
        events[user][pos] = _ambiguous_event(cfg, rng, user, t, word, home, amb_docs[word], truth, first)
    events = sessionize(events)
    log = SynthLog(corpus, events, truth)
    _check_minimums(cfg, log)
    return log


def _pick_target(cfg, rng, home, favorites, topic_docs, n_topics) -> str:
    if favorites and rng.random() < cfg.refind_rate:
        return favorites[rng.integers(len(favorites))]
    topic = home
    if n_topics > 1 and rng.random() < cfg.off_topic_rate:
        topic = (home + 1 + rng.integers(n_topics - 1)) % n_topics
    docs = topic_docs[topic]
    return docs[rng.integers(len(docs))]


def _query_terms(rng, doc_terms, prev: list[str]) -> list[str]:
    # ambiguous words are reserved for the ambiguous queries themselves
    vocab = [t for t in dict.fromkeys(doc_terms) if not t.startswith("amb")]
    if prev and len(prev) < 4:
        extra = [t for t in vocab if t not in prev]
        if extra:
            return prev + [extra[rng.integers(len(extra))]]
    n = int(min(len(vocab), rng.integers(1, 4)))
    pick = rng.choice(len(vocab), size=n, replace=False)
    return [vocab[i] for i in sorted(pick)]


def _dwell(cfg, rng, satisfied: bool) -> int | None:
    if not cfg.record_dwell:
        return None
    return int(rng.integers(30, 300)) if satisfied else int(rng.integers(2, 30))


def _bias_click(cfg, rng, cands, clicks):
    if cfg.position_bias and rng.random() < cfg.position_bias:
        top = cands[0][0]
        if all(top != d for d, _ in clicks):
            clicks.append((top, _dwell(cfg, rng, False)))


def _ambiguous_event(cfg, rng, user, t, word, home, docs, truth, pref_first) -> QueryEvent:
    mine = [d for d in docs if truth.doc_topic[d] == home]
    rest = [d for d in docs if truth.doc_topic[d] != home]
    lead, follow = (mine, rest) if pref_first else (rest, mine)
    order = [d for pair in zip(lead, follow) for d in pair]
    cands = tuple((d, r) for r, d in enumerate(order, 1))
    if rng.random() < cfg.preference_noise:
        other = [d for d in docs if truth.doc_topic[d] != home]
        chosen = [other[rng.integers(len(other))]]
    else:
        chosen = [d for d in docs if truth.doc_topic[d] == home]
    clicks = [(d, _dwell(cfg, rng, True)) for d in chosen]
    _bias_click(cfg, rng, cands, clicks)
    return _event(user, t, word, cands, clicks)


def _topic_event(cfg, rng, user, t, terms, target, index, truth) -> QueryEvent:
    cands = tuple(index.top_k(terms, cfg.candidates))
    docs = [d for d, _ in cands]
    topic = truth.doc_topic[target]
    clicks = []
    if target in docs:
        clicks.append(target)
    else:
        same = [d for d in docs if truth.doc_topic[d] == topic]
        if same:
            clicks.append(same[0])
    if clicks and rng.random() < cfg.multi_click_rate:
        extra = [d for d in docs if truth.doc_topic[d] == topic and d not in clicks]
        if extra:
            clicks.append(extra[0])
    clicks = [(d, _dwell(cfg, rng, True)) for d in clicks]
    _bias_click(cfg, rng, cands, clicks)
    return _event(user, t, " ".join(terms), cands, clicks)


def _event(user, t, query, cands, clicks) -> QueryEvent:
    # clicks in rank order, as a TSV round trip would produce them
    rank = dict(cands)
    return QueryEvent(user, t, query, cands, tuple(sorted(clicks, key=lambda c: rank[c[0]])))


def _check_minimums(cfg: SynthConfig, log: SynthLog) -> None:
    n_dp = len(mine_document_pairs(log.events))
    n_qp = len(mine_query_pairs(log.events))
    anchors = user_pair_anchors(log.events)
    n_up = sum(len(u) * (len(u) - 1) // 2 for u in anchors.values())
    for name, got, need in (("document", n_dp, cfg.min_dp), ("query", n_qp, cfg.min_qp),
                            ("user", n_up, cfg.min_up)):
        if got < need:
            raise InfeasibleConfigError(f"generated {got} {name} pairs, fewer than the required {need}")


def generate(cfg: SynthConfig, out_dir) -> dict[str, Path]:
    """Write events.tsv, docs.tsv and truth.tsv into ``out_dir``."""
    log = generate_log(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"events": out / "events.tsv", "docs": out / "docs.tsv", "truth": out / "truth.tsv"}
    write_events(paths["events"], log.events)
    write_documents(paths["docs"], log.corpus)
    log.truth.write(paths["truth"])
    return paths
