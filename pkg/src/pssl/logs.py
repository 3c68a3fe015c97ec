"""Query-log records, TSV ingest/emit and preprocessing."""

from __future__ import annotations

import bisect
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

logger = logging.getLogger(__name__)

EVENT_COLUMNS = ("user_id", "timestamp", "query", "doc_id", "orig_rank", "clicked", "dwell_secs")
WEEK_SECS = 7 * 86400
SAT_DWELL_SECS = 30

_NON_ALNUM = re.compile(r"[^0-9a-z]+")


class LogFormatError(ValueError):
    """A log file line does not follow the TSV schema."""

    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


class DocumentConflictError(ValueError):
    pass


class NoClicksError(ValueError):
    """Click entropy requested for a query that was never clicked."""


class SplitError(ValueError):
    pass


def normalize(text: str) -> str:
    """Lowercase, replace non-alphanumerics with spaces, collapse whitespace."""
    return " ".join(_NON_ALNUM.sub(" ", text.lower()).split())


@dataclass(frozen=True)
class Document:
    doc_id: str
    terms: tuple[str, ...]


@dataclass(frozen=True)
class QueryEvent:
    user_id: str
    timestamp: int
    query: str
    candidates: tuple[tuple[str, int], ...]
    clicks: tuple[tuple[str, int | None], ...]
    session_id: int = -1

    @property
    def terms(self) -> tuple[str, ...]:
        return tuple(self.query.split())

    @property
    def doc_ids(self) -> tuple[str, ...]:
        return tuple(d for d, _ in self.candidates)

    @property
    def clicked(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for d, _ in self.clicks:
            seen.setdefault(d)
        return tuple(seen)

    def relevant(self, sat_dwell: int = SAT_DWELL_SECS) -> frozenset[str]:
        """Clicked docs, restricted to SAT clicks (dwell >= sat_dwell) when dwell is recorded."""
        return frozenset(d for d, dwell in self.clicks if dwell is None or dwell >= sat_dwell)


Events = dict[str, list[QueryEvent]]


@dataclass
class IngestReport:
    n_events: int = 0
    n_rows: int = 0
    dropped_events: Counter = field(default_factory=Counter)
    dropped_documents: int = 0

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped_events.values())


# ----------------------------------------------------------------------------
# ingest / emit
# ----------------------------------------------------------------------------

def read_documents(path, report: IngestReport | None = None) -> dict[str, Document]:
    corpus: dict[str, Document] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or (lineno == 1 and line.startswith("doc_id\t")):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise LogFormatError(path, lineno, f"expected 2 columns, found {len(parts)}")
            doc_id, text = parts
            terms = tuple(normalize(text).split())
            if not terms:
                if report is not None:
                    report.dropped_documents += 1
                continue
            prev = corpus.get(doc_id)
            if prev is not None and prev.terms != terms:
                raise DocumentConflictError(f"{path}:{lineno}: doc {doc_id!r} redefined with different text")
            corpus[doc_id] = Document(doc_id, terms)
    if report is not None and report.dropped_documents:
        logger.warning("dropped %d empty documents", report.dropped_documents)
    return corpus


def _parse_row(path, lineno: int, line: str):
    parts = line.split("\t")
    if len(parts) != len(EVENT_COLUMNS):
        raise LogFormatError(path, lineno, f"expected {len(EVENT_COLUMNS)} columns, found {len(parts)}")
    user, ts, query, doc, rank, clicked, dwell = parts
    try:
        ts_i, rank_i, clicked_i, dwell_i = int(ts), int(rank), int(clicked), int(dwell)
    except ValueError as exc:
        raise LogFormatError(path, lineno, f"non-integer field: {exc}") from None
    if clicked_i not in (0, 1):
        raise LogFormatError(path, lineno, f"clicked must be 0 or 1, got {clicked_i}")
    if not user or not doc:
        raise LogFormatError(path, lineno, "empty user_id or doc_id")
    return user, ts_i, query, doc, rank_i, clicked_i, dwell_i


def _build_event(key, rows, corpus) -> tuple[QueryEvent | None, str | None]:
    user, ts, raw_query = key
    query = normalize(raw_query)
    if not query:
        return None, "empty query"
    cands = [(doc, rank) for doc, rank, _, _ in rows if rank >= 1]
    clicks = [(doc, None if dwell < 0 else dwell) for doc, _, clicked, dwell in rows if clicked]
    if not cands:
        return None, "no candidates"
    if sorted(r for _, r in cands) != list(range(1, len(cands) + 1)):
        return None, "ranks not a permutation"
    cand_ids = {d for d, _ in cands}
    if len(cand_ids) != len(cands):
        return None, "duplicate candidate"
    if any(d not in cand_ids for d, _ in clicks):
        return None, "click outside candidates"
    if corpus is not None and any(d not in corpus for d in cand_ids):
        return None, "unknown document"
    cands.sort(key=lambda c: c[1])
    return QueryEvent(user, ts, query, tuple(cands), tuple(clicks)), None


def read_events(path, corpus: Mapping[str, Document] | None = None,
                report: IngestReport | None = None) -> Events:
    """Parse an events TSV. Schema errors raise; invariant violations drop the event."""
    report = report if report is not None else IngestReport()
    events: dict[str, list[QueryEvent]] = defaultdict(list)
    key = None
    rows: list = []

    def flush():
        if key is None:
            return
        ev, reason = _build_event(key, rows, corpus)
        if ev is None:
            report.dropped_events[reason] += 1
        else:
            events[ev.user_id].append(ev)
            report.n_events += 1

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if lineno == 1 and line.startswith("user_id\t"):
                continue
            user, ts, query, doc, rank, clicked, dwell = _parse_row(path, lineno, line)
            report.n_rows += 1
            row_key = (user, ts, query)
            if row_key != key or any(r[0] == doc for r in rows):
                flush()
                key, rows = row_key, []
            rows.append((doc, rank, clicked, dwell))
        flush()
    if report.n_dropped:
        logger.warning("dropped %d malformed events: %s", report.n_dropped, dict(report.dropped_events))
    return sort_events(events)


def sort_events(events: Mapping[str, Iterable[QueryEvent]]) -> Events:
    return {u: sorted(events[u], key=lambda e: e.timestamp) for u in sorted(events)}


@dataclass
class IngestResult:
    corpus: dict[str, Document]
    events: Events
    report: IngestReport


def ingest_log(events_path, docs_path) -> IngestResult:
    report = IngestReport()
    corpus = read_documents(docs_path, report)
    events = read_events(events_path, corpus, report)
    return IngestResult(corpus, events, report)


def write_events(path, events: Mapping[str, Iterable[QueryEvent]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(EVENT_COLUMNS) + "\n")
        for user in sorted(events):
            for ev in events[user]:
                dwell = {}
                for d, dw in ev.clicks:
                    dwell.setdefault(d, dw)
                for doc, rank in ev.candidates:
                    clicked = doc in dwell
                    dw = dwell.get(doc)
                    fh.write(f"{ev.user_id}\t{ev.timestamp}\t{ev.query}\t{doc}\t{rank}\t"
                             f"{int(clicked)}\t{-1 if dw is None else dw}\n")


def write_documents(path, corpus: Mapping[str, Document]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("doc_id\ttext\n")
        for doc_id in sorted(corpus):
            fh.write(f"{doc_id}\t{' '.join(corpus[doc_id].terms)}\n")


# ----------------------------------------------------------------------------
# sessions and click entropy
# ----------------------------------------------------------------------------

def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def sessionize(events: Mapping[str, list[QueryEvent]], sim_threshold: float = 0.5,
               max_gap: int | None = None) -> Events:
    """Assign per-user session ids; a new session starts when consecutive queries
    have word-set Jaccard similarity below ``sim_threshold`` (or exceed ``max_gap`` seconds)."""
    out: Events = {}
    for user, evs in events.items():
        session = 0
        res = []
        for i, ev in enumerate(evs):
            if i > 0:
                prev = evs[i - 1]
                same = jaccard(prev.terms, ev.terms) >= sim_threshold
                if max_gap is not None and ev.timestamp - prev.timestamp > max_gap:
                    same = False
                if not same:
                    session += 1
            res.append(replace(ev, session_id=session))
        out[user] = res
    return out


def _entropy(counts: Iterable[int]) -> float:
    counts = [c for c in counts if c > 0]
    total = sum(counts)
    h = 0.0
    for c in counts:
        p = c / total
        h -= p * math.log2(p)
    return max(h, 0.0)


def click_counts(events: Mapping[str, list[QueryEvent]]) -> dict[str, Counter]:
    table: dict[str, Counter] = defaultdict(Counter)
    for evs in events.values():
        for ev in evs:
            for doc, _ in ev.clicks:
                table[ev.query][doc] += 1
    return dict(table)


def click_entropy(query: str, events: Mapping[str, list[QueryEvent]]) -> float:
    """Entropy in bits of the click distribution over documents for an exact query string."""
    counts: Counter = Counter()
    for evs in events.values():
        for ev in evs:
            if ev.query == query:
                counts.update(d for d, _ in ev.clicks)
    if not counts:
        raise NoClicksError(f"query {query!r} has no clicks")
    return _entropy(counts.values())


def click_entropies(events: Mapping[str, list[QueryEvent]]) -> dict[str, float]:
    """Click entropy of every clicked query string."""
    return {q: _entropy(c.values()) for q, c in click_counts(events).items()}


# ----------------------------------------------------------------------------
# temporal split
# ----------------------------------------------------------------------------

@dataclass
class Splits:
    background: Events
    train: Events
    valid: Events
    test: Events
    boundaries: tuple[float, float, float]
    removed_users: tuple[str, ...] = ()

    NAMES = ("background", "train", "valid", "test")

    def __getitem__(self, name: str) -> Events:
        if name not in self.NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def merged(self, *names: str) -> Events:
        """Per-user time-ordered union of the named pieces."""
        out: dict[str, list[QueryEvent]] = defaultdict(list)
        for name in names:
            for u, evs in self[name].items():
                out[u].extend(evs)
        return sort_events(out)

    def split_of(self) -> dict[tuple[str, int], str]:
        """(user_id, timestamp) -> split name, used for labelling events."""
        label = {}
        for name in self.NAMES:
            for u, evs in self[name].items():
                for ev in evs:
                    label[(u, ev.timestamp)] = name
        return label


def temporal_split(events: Mapping[str, list[QueryEvent]], background_fraction: float = 5 / 13,
                   ratios: tuple[float, float, float] = (4, 1, 1)) -> Splits:
    """Background = earliest ``background_fraction`` of the time span; the rest
    is cut into train/valid/test by ``ratios``. Users with empty background or
    train are removed."""
    stamps = [ev.timestamp for evs in events.values() for ev in evs]
    if not stamps:
        raise SplitError("empty log")
    t0, t1 = min(stamps), max(stamps)
    if t1 <= t0:
        raise SplitError("log spans a single instant; cannot form temporal splits")
    span = t1 - t0
    b = t0 + background_fraction * span
    rest = t1 - b
    total = float(sum(ratios))
    e1 = b + rest * ratios[0] / total
    e2 = b + rest * (ratios[0] + ratios[1]) / total
    pieces: list[dict[str, list[QueryEvent]]] = [defaultdict(list) for _ in range(4)]
    for user, evs in events.items():
        for ev in evs:
            t = ev.timestamp
            idx = 0 if t < b else 1 if t < e1 else 2 if t < e2 else 3
            pieces[idx][user].append(ev)
    if any(not p for p in pieces):
        raise SplitError("time span too short to form four non-empty splits")
    removed = tuple(sorted(u for u in events if not pieces[0].get(u) or not pieces[1].get(u)))
    kept = [sort_events({u: evs for u, evs in p.items() if u not in removed}) for p in pieces]
    return Splits(*kept, boundaries=(b, e1, e2), removed_users=removed)


# ----------------------------------------------------------------------------
# histories
# ----------------------------------------------------------------------------

QUERY = "query"
CLICK = "click"


@dataclass(frozen=True)
class Behavior:
    kind: str
    key: str  # normalized query string or doc_id
    timestamp: int
    session_id: int


@dataclass(frozen=True)
class UserHistory:
    user_id: str
    behaviors: tuple[Behavior, ...]

    @property
    def session_boundaries(self) -> tuple[int, ...]:
        out = []
        for i, b in enumerate(self.behaviors):
            if i == 0 or b.session_id != self.behaviors[i - 1].session_id:
                out.append(i)
        return tuple(out)

    def __len__(self) -> int:
        return len(self.behaviors)


@dataclass(frozen=True)
class HistoryView:
    long_term: tuple[Behavior, ...]
    short_term: tuple[Behavior, ...]

    @property
    def empty(self) -> bool:
        return not self.long_term and not self.short_term


def event_behaviors(ev: QueryEvent) -> list[Behavior]:
    out = [Behavior(QUERY, ev.query, ev.timestamp, ev.session_id)]
    out.extend(Behavior(CLICK, d, ev.timestamp, ev.session_id) for d in ev.clicked)
    return out


def build_history(user_id: str, events: Iterable[QueryEvent]) -> UserHistory:
    """Interleaved query/click sequence ``q1, d11, d12, q2, ...``."""
    behaviors: list[Behavior] = []
    for ev in events:
        behaviors.extend(event_behaviors(ev))
    return UserHistory(user_id, tuple(behaviors))


def prior_count(events: list[QueryEvent], index: int) -> int:
    """Number of events of the user strictly earlier in time than ``events[index]``."""
    t = events[index].timestamp
    stamps = [e.timestamp for e in events[:index]]
    return bisect.bisect_left(stamps, t)


def history_views(events: list[QueryEvent], index: int, max_long: int = 50,
                  max_short: int = 20) -> HistoryView:
    """Long/short-term views of the behaviors before ``events[index]``.

    Only events with an earlier timestamp contribute. Short-term is the part
    inside the current session, long-term everything before it; truncation
    keeps the most recent behaviors.
    """
    current = events[index]
    prior = events[:prior_count(events, index)]
    long_b: list[Behavior] = []
    short_b: list[Behavior] = []
    for ev in prior:
        target = short_b if ev.session_id == current.session_id else long_b
        target.extend(event_behaviors(ev))
    return HistoryView(_tail(long_b, max_long), _tail(short_b, max_short))


def split_history(history: UserHistory, max_long: int = 50, max_short: int = 20) -> HistoryView:
    """Views of a whole history: its last session is short-term, the rest long-term."""
    bs = history.behaviors
    if not bs:
        return HistoryView((), ())
    last = bs[-1].session_id
    i = len(bs)
    while i > 0 and bs[i - 1].session_id == last:
        i -= 1
    return HistoryView(_tail(bs[:i], max_long), _tail(bs[i:], max_short))


def _tail(items, n: int) -> tuple:
    items = tuple(items)
    if n <= 0:
        return ()
    return items[-n:]


# ----------------------------------------------------------------------------
# statistics
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetStats:
    n_users: int
    n_queries: int
    n_sessions: int
    avg_query_length: float
    avg_clicks_per_query: float


def log_stats(events: Mapping[str, list[QueryEvent]]) -> DatasetStats:
    n_q = n_terms = n_clicks = 0
    sessions = set()
    users = 0
    for user, evs in events.items():
        counted = [ev for ev in evs if ev.candidates]
        if counted:
            users += 1
        for ev in counted:
            n_q += 1
            n_terms += len(ev.terms)
            n_clicks += len(ev.clicks)
            sessions.add((user, ev.session_id))
    return DatasetStats(
        n_users=users,
        n_queries=n_q,
        n_sessions=len(sessions),
        avg_query_length=n_terms / n_q if n_q else 0.0,
        avg_clicks_per_query=n_clicks / n_q if n_q else 0.0,
    )
