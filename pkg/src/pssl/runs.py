"""Ranked result lists and their on-disk forms (run files, qrels, query tables)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence


@dataclass(frozen=True)
class Candidate:
    doc_id: str
    orig_rank: int
    score: float
    relevant: bool


@dataclass(frozen=True)
class RankedList:
    """Candidates of one query event in re-ranked order (index 0 = new rank 1)."""
    qid: str
    user_id: str
    query: str
    candidates: tuple[Candidate, ...]

    @property
    def labels(self) -> list[bool]:
        return [c.relevant for c in self.candidates]

    @property
    def original(self) -> list[Candidate]:
        return sorted(self.candidates, key=lambda c: c.orig_rank)

    @property
    def original_labels(self) -> list[bool]:
        return [c.relevant for c in self.original]

    @property
    def doc_ids(self) -> list[str]:
        return [c.doc_id for c in self.candidates]

    @property
    def relevant(self) -> frozenset[str]:
        return frozenset(c.doc_id for c in self.candidates if c.relevant)


def rank_candidates(qid: str, user_id: str, query: str, doc_ids: Sequence[str],
                    orig_ranks: Sequence[int], scores: Sequence[float],
                    relevant: Iterable[str] = ()) -> RankedList:
    """Sort by descending score, ties by ascending original rank."""
    rel = set(relevant)
    cands = [Candidate(d, int(r), float(s), d in rel) for d, r, s in zip(doc_ids, orig_ranks, scores)]
    cands.sort(key=lambda c: (-c.score, c.orig_rank))
    return RankedList(qid, user_id, query, tuple(cands))


def make_qid(user_id: str, index: int) -> str:
    return f"{user_id}#{index}"


def write_run(path, lists: Sequence[RankedList], tag: str = "pssl", original: bool = False) -> None:
    """Tab-separated ``qid doc_id rank score tag``; ``original=True`` writes the input ordering."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for rl in lists:
            cands = rl.original if original else rl.candidates
            for rank, c in enumerate(cands, 1):
                score = -float(c.orig_rank) if original else c.score
                w.writerow([rl.qid, c.doc_id, rank, repr(score), tag])


def read_run(path) -> dict[str, list[tuple[str, int, float]]]:
    out: dict[str, list[tuple[str, int, float]]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if len(row) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 columns, got {len(row)}")
            qid, doc, rank, score, _ = row
            out.setdefault(qid, []).append((doc, int(rank), float(score)))
    for rows in out.values():
        rows.sort(key=lambda r: r[1])
    return out


def write_qrels(path, lists: Sequence[RankedList]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for rl in lists:
            for c in rl.original:
                w.writerow([rl.qid, 0, c.doc_id, int(c.relevant)])


def read_qrels(path) -> dict[str, set[str]]:
    out: dict[str, set[str]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            qid, _, doc, rel = row
            rels = out.setdefault(qid, set())
            if int(rel) > 0:
                rels.add(doc)
    return out


def write_queries(path, lists: Sequence[RankedList], entropies: Mapping[str, float]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["qid", "user_id", "query", "click_entropy"])
        for rl in lists:
            h = entropies.get(rl.query)
            w.writerow([rl.qid, rl.user_id, rl.query, "" if h is None else repr(h)])


def read_queries(path) -> dict[str, tuple[str, str, float | None]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    out = {}
    for qid, user, query, h in rows[1:]:
        out[qid] = (user, query, float(h) if h else None)
    return out


def assemble_lists(run: Mapping[str, list], original: Mapping[str, list], qrels: Mapping[str, set],
                   queries: Mapping[str, tuple] | None = None) -> list[RankedList]:
    """Rebuild RankedLists from a re-ranked run, the original run and qrels."""
    lists = []
    for qid in sorted(run):
        if qid not in original:
            raise ValueError(f"query {qid!r} missing from the original run")
        orig_rank = {doc: rank for doc, rank, _ in original[qid]}
        if set(orig_rank) != {doc for doc, _, _ in run[qid]}:
            raise ValueError(f"query {qid!r}: candidate sets differ between runs")
        rel = qrels.get(qid, set())
        user, query = ("", "") if not queries or qid not in queries else queries[qid][:2]
        cands = tuple(Candidate(doc, orig_rank[doc], score, doc in rel) for doc, _, score in run[qid])
        lists.append(RankedList(qid, user, query, cands))
    return lists
