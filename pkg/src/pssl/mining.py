"""Self-supervised pair mining from query logs.

Self-contrastive pairs come from one user's log (document pairs, query
pairs, sequence-augmentation pairs); user pairs come from two users who
clicked the same document under the same ambiguous query.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, replace
from itertools import combinations
from typing import Iterator, Mapping, Sequence

import numpy as np

from .logs import (Behavior, HistoryView, QueryEvent, UserHistory, build_history,
                   click_entropies, history_views)

logger = logging.getLogger(__name__)

DP, QP, SAP, UP = "dp", "qp", "sap", "up"
TASKS = (DP, QP, SAP, UP)

BEHAVIOR_DELETE = "behavior-delete"
BEHAVIOR_REORDER = "behavior-reorder"
SESSION_DELETE = "session-delete"
STRATEGIES = (BEHAVIOR_DELETE, BEHAVIOR_REORDER, SESSION_DELETE)


@dataclass(frozen=True)
class DocPair:
    user_id: str
    query: str
    doc_i: str
    doc_j: str


@dataclass(frozen=True)
class QueryPair:
    user_id: str
    query_i: str
    query_j: str
    shared_doc: str


@dataclass(frozen=True)
class UserPair:
    user_i: str
    user_j: str
    query: str
    shared_doc: str
    index_i: int
    index_j: int
    history_i: HistoryView
    history_j: HistoryView


@dataclass(frozen=True)
class SapInstance:
    user_id: str
    history: UserHistory
    strategy_i: str
    strategy_j: str
    seed_i: int
    seed_j: int


# ----------------------------------------------------------------------------
# miners
# ----------------------------------------------------------------------------

def mine_document_pairs(events: Mapping[str, list[QueryEvent]]) -> list[DocPair]:
    """Every unordered pair of documents clicked within one query event."""
    pairs = []
    for user in sorted(events):
        for ev in events[user]:
            for a, b in combinations(ev.clicked, 2):
                pairs.append(DocPair(user, ev.query, a, b))
    return pairs


def mine_query_pairs(events: Mapping[str, list[QueryEvent]]) -> list[QueryPair]:
    """Pairs of distinct query strings under which one user clicked the same document."""
    pairs = []
    for user in sorted(events):
        by_doc: dict[str, dict[str, None]] = defaultdict(dict)
        for ev in events[user]:
            for d in ev.clicked:
                by_doc[d].setdefault(ev.query)
        for doc in sorted(by_doc):
            for qa, qb in combinations(by_doc[doc], 2):
                pairs.append(QueryPair(user, qa, qb, doc))
    return pairs


def user_pair_anchors(events: Mapping[str, list[QueryEvent]], entropy_threshold: float = 1.0,
                      entropies: Mapping[str, float] | None = None) -> dict[tuple[str, str], dict[str, int]]:
    """(ambiguous query, clicked doc) -> user -> index of the user's first such event."""
    if entropies is None:
        entropies = click_entropies(events)
    ambiguous = {q for q, h in entropies.items() if h > entropy_threshold}
    anchors: dict[tuple[str, str], dict[str, int]] = defaultdict(dict)
    for user in sorted(events):
        for idx, ev in enumerate(events[user]):
            if ev.query not in ambiguous:
                continue
            for d in ev.clicked:
                anchors[(ev.query, d)].setdefault(user, idx)
    return anchors


def mine_user_pairs(events: Mapping[str, list[QueryEvent]], entropy_threshold: float = 1.0,
                    max_long: int = 50, max_short: int = 20,
                    entropies: Mapping[str, float] | None = None) -> list[UserPair]:
    """Pairs of users who clicked the same document under the same ambiguous query.

    Only queries with click entropy strictly above ``entropy_threshold`` are
    used. Each user is anchored at their earliest such event, and histories
    hold only behaviors before it. One pair per (user_i, user_j, query, doc).
    """
    anchors = user_pair_anchors(events, entropy_threshold, entropies)
    pairs = []
    for (query, doc) in sorted(anchors):
        users = anchors[(query, doc)]
        for ui, uj in combinations(sorted(users), 2):
            ii, ij = users[ui], users[uj]
            pairs.append(UserPair(
                ui, uj, query, doc, ii, ij,
                history_views(events[ui], ii, max_long, max_short),
                history_views(events[uj], ij, max_long, max_short),
            ))
    return pairs


def mine_sap_instances(events: Mapping[str, list[QueryEvent]], seed: int = 0,
                       max_behaviors: int = 70) -> list[SapInstance]:
    """One augmentation instance per user over their most recent behaviors."""
    rng = np.random.default_rng(seed)
    out = []
    for user in sorted(events):
        hist = build_history(user, events[user])
        if not hist.behaviors:
            continue
        hist = UserHistory(user, hist.behaviors[-max_behaviors:])
        si, sj = rng.integers(len(STRATEGIES), size=2)
        seeds = rng.integers(2**31 - 1, size=2)
        out.append(SapInstance(user, hist, STRATEGIES[si], STRATEGIES[sj], int(seeds[0]), int(seeds[1])))
    return out


# ----------------------------------------------------------------------------
# sequence augmentation
# ----------------------------------------------------------------------------

def augment_sequence(history: UserHistory, strategy: str, ratio: float = 0.5, seed=None) -> UserHistory:
    """Return an augmented copy of ``history``.

    behavior-delete drops floor(ratio*n) behaviors (keeping at least one);
    behavior-reorder shuffles the contents of floor(ratio*n) positions while
    session labels stay in place; session-delete drops random whole sessions
    until at least ``ratio`` of the behaviors are gone or one session is left.
    """
    bs = history.behaviors
    n = len(bs)
    if n == 0:
        raise ValueError("cannot augment an empty history")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = int(np.floor(ratio * n))
    if strategy == BEHAVIOR_DELETE:
        k = min(k, n - 1)
        drop = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
        kept = tuple(b for i, b in enumerate(bs) if i not in drop)
    elif strategy == BEHAVIOR_REORDER:
        kept = list(bs)
        if k >= 2:
            pos = np.sort(rng.choice(n, size=k, replace=False))
            perm = pos[rng.permutation(k)]
            for dst, src in zip(pos, perm):
                kept[dst] = replace(bs[dst], kind=bs[src].kind, key=bs[src].key)
        kept = tuple(kept)
    elif strategy == SESSION_DELETE:
        sessions = list(dict.fromkeys(b.session_id for b in bs))
        sizes = {s: sum(1 for b in bs if b.session_id == s) for s in sessions}
        order = [sessions[i] for i in rng.permutation(len(sessions))]
        deleted: set[int] = set()
        removed = 0
        for s in order:
            if removed >= ratio * n or len(deleted) == len(sessions) - 1:
                break
            deleted.add(s)
            removed += sizes[s]
        kept = tuple(b for b in bs if b.session_id not in deleted)
    else:
        raise ValueError(f"unknown augmentation strategy {strategy!r}")
    return UserHistory(history.user_id, kept)


# ----------------------------------------------------------------------------
# batches
# ----------------------------------------------------------------------------

@dataclass
class PretrainBatch:
    task: str
    items: list
    augmented: list[tuple[UserHistory, UserHistory]] | None = None

    def __len__(self) -> int:
        return len(self.items)

    def negatives(self, k: int, mode: str = "both") -> list[tuple[str, int]]:
        """Negative pool of anchor ``k`` as (side, index); side 'a' = anchors, 'b' = positives."""
        n = len(self.items)
        others = [m for m in range(n) if m != k]
        if mode == "both":
            return [("a", m) for m in others] + [("b", m) for m in others]
        if mode == "one":
            return [("b", m) for m in others]
        raise ValueError(f"unknown negative mode {mode!r}")


class BatchStream:
    """Endless stream of size-``n`` batches, reshuffled every epoch.

    The final short chunk of each epoch is dropped. SAP augmentations are
    drawn when a batch is produced: the instance's own strategies/seeds in
    the first epoch, fresh draws from the epoch RNG afterwards.
    """

    def __init__(self, task: str, items: Sequence, n: int, seed: int = 0, ratio: float = 0.5):
        if n < 2:
            raise ValueError("batch size must be >= 2")
        self.task = task
        self.items = list(items)
        self.n = n
        self.seed = seed
        self.ratio = ratio
        self.epoch = 0

    @property
    def batches_per_epoch(self) -> int:
        return len(self.items) // self.n

    def epoch_batches(self, epoch: int) -> list[PretrainBatch]:
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(self.items))
        out = []
        for start in range(0, self.batches_per_epoch * self.n, self.n):
            chunk = [self.items[i] for i in order[start:start + self.n]]
            aug = None
            if self.task == SAP:
                aug = [self._augment(inst, epoch, rng) for inst in chunk]
            out.append(PretrainBatch(self.task, chunk, aug))
        return out

    def _augment(self, inst: SapInstance, epoch: int, rng: np.random.Generator):
        if epoch == 0:
            si, sj, seed_i, seed_j = inst.strategy_i, inst.strategy_j, inst.seed_i, inst.seed_j
        else:
            a, b = rng.integers(len(STRATEGIES), size=2)
            si, sj = STRATEGIES[a], STRATEGIES[b]
            seed_i, seed_j = (int(s) for s in rng.integers(2**31 - 1, size=2))
        return (augment_sequence(inst.history, si, self.ratio, seed_i),
                augment_sequence(inst.history, sj, self.ratio, seed_j))

    def __iter__(self) -> Iterator[PretrainBatch]:
        if self.batches_per_epoch == 0:
            return
        while True:
            yield from self.epoch_batches(self.epoch)
            self.epoch += 1


def build_pretrain_batches(items: Sequence, n: int, seed: int = 0, task: str = DP,
                           ratio: float = 0.5) -> list[PretrainBatch]:
    """One epoch of shuffled batches; empty (with a warning) when fewer than ``n`` items."""
    if len(items) < n:
        logger.warning("task %s has %d items, fewer than batch size %d; skipped", task, len(items), n)
        return []
    return BatchStream(task, items, n, seed, ratio).epoch_batches(0)


# ----------------------------------------------------------------------------
# TSV persistence
# ----------------------------------------------------------------------------

PAIR_COLUMNS = {
    DP: ("user_id", "query", "doc_i", "doc_j"),
    QP: ("user_id", "query_i", "query_j", "shared_doc"),
    UP: ("user_i", "user_j", "query", "shared_doc", "event_index_i", "event_index_j"),
    SAP: ("user_id", "n_behaviors", "strategy_i", "strategy_j", "seed_i", "seed_j"),
}


def _row(task: str, p) -> tuple:
    if task == DP:
        return p.user_id, p.query, p.doc_i, p.doc_j
    if task == QP:
        return p.user_id, p.query_i, p.query_j, p.shared_doc
    if task == UP:
        return p.user_i, p.user_j, p.query, p.shared_doc, p.index_i, p.index_j
    return p.user_id, len(p.history), p.strategy_i, p.strategy_j, p.seed_i, p.seed_j


def write_pairs(path, task: str, pairs: Sequence) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(PAIR_COLUMNS[task])
        for p in pairs:
            w.writerow(_row(task, p))


def read_pairs(path, task: str, events: Mapping[str, list[QueryEvent]] | None = None,
               max_long: int = 50, max_short: int = 20) -> list:
    """Load mined pairs; UP and SAP rows are re-attached to histories from ``events``."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    header, rows = rows[0], rows[1:]
    if tuple(header) != PAIR_COLUMNS[task]:
        raise ValueError(f"{path}: unexpected header {header}")
    if task == DP:
        return [DocPair(*r) for r in rows]
    if task == QP:
        return [QueryPair(*r) for r in rows]
    if events is None:
        raise ValueError(f"task {task} needs the event log to rebuild histories")
    out = []
    for r in rows:
        if task == UP:
            ui, uj, q, d, ii, ij = r
            ii, ij = int(ii), int(ij)
            out.append(UserPair(ui, uj, q, d, ii, ij,
                                history_views(events[ui], ii, max_long, max_short),
                                history_views(events[uj], ij, max_long, max_short)))
        else:
            user, nb, si, sj, seed_i, seed_j = r
            hist = build_history(user, events[user])
            hist = UserHistory(user, hist.behaviors[-int(nb):])
            out.append(SapInstance(user, hist, si, sj, int(seed_i), int(seed_j)))
    return out


def behavior_multiset(behaviors: Sequence[Behavior]) -> list[tuple[str, str]]:
    return sorted((b.kind, b.key) for b in behaviors)
