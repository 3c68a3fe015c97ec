"""Ranking metrics, P-improve, entropy buckets and representation analyses."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .runs import RankedList


def average_precision(labels: Sequence[bool]) -> float:
    # exact rational sum, rounded once: AP of [1, 0, 1] is the float nearest 5/6
    hits = 0
    total = Fraction(0)
    for i, rel in enumerate(labels, 1):
        if rel:
            hits += 1
            total += Fraction(hits, i)
    return float(total / hits) if hits else 0.0


def reciprocal_rank(labels: Sequence[bool]) -> float:
    for i, rel in enumerate(labels, 1):
        if rel:
            return 1.0 / i
    return 0.0


def precision_at_1(labels: Sequence[bool]) -> float:
    return 1.0 if labels and labels[0] else 0.0


@dataclass(frozen=True)
class RankingMetrics:
    map: float
    mrr: float
    p1: float
    n_evaluated: int
    n_excluded: int


def compute_ranking_metrics(lists: Iterable[Sequence[bool]]) -> RankingMetrics:
    """MAP/MRR/P@1 over label lists given in ranked order.

    Lists without a relevant item are skipped and counted in ``n_excluded``.
    """
    ap, rr, p1 = [], [], []
    excluded = 0
    for labels in lists:
        labels = list(labels)
        if not any(labels):
            excluded += 1
            continue
        ap.append(average_precision(labels))
        rr.append(reciprocal_rank(labels))
        p1.append(precision_at_1(labels))
    if not ap:
        raise ValueError("no evaluable ranked list (none has a relevant item)")
    n = len(ap)
    return RankingMetrics(sum(ap) / n, sum(rr) / n, sum(p1) / n, n, excluded)


@dataclass(frozen=True)
class PairCounts:
    total: int
    inverse: int
    corrected: int
    broken: int

    @property
    def value(self) -> float:
        if not self.total:
            raise ValueError("no relevant/non-relevant pairs")
        return (self.corrected - self.broken) / self.total


def pair_counts(original: Sequence[Sequence[str]], reranked: Sequence[Sequence[str]],
                relevance: Sequence[Iterable[str]]) -> PairCounts:
    total = inverse = corrected = broken = 0
    for orig, new, rel in zip(original, reranked, relevance, strict=True):
        rel = set(rel)
        if set(orig) != set(new):
            raise ValueError("original and re-ranked lists hold different documents")
        po = {d: i for i, d in enumerate(orig)}
        pn = {d: i for i, d in enumerate(new)}
        pos = [d for d in orig if d in rel]
        neg = [d for d in orig if d not in rel]
        for r in pos:
            for n in neg:
                total += 1
                was_ok = po[r] < po[n]
                now_ok = pn[r] < pn[n]
                inverse += not was_ok
                corrected += (not was_ok) and now_ok
                broken += was_ok and not now_ok
    return PairCounts(total, inverse, corrected, broken)


def p_improve(original: Sequence[Sequence[str]], reranked: Sequence[Sequence[str]],
              relevance: Sequence[Iterable[str]]) -> float:
    """(inverse pairs corrected - correct pairs broken) / all relevant/non-relevant pairs."""
    return pair_counts(original, reranked, relevance).value


@dataclass(frozen=True)
class BucketReport:
    n: int
    map_original: float
    map_reranked: float

    @property
    def delta(self) -> float:
        return self.map_reranked - self.map_original


LOW, HIGH = "entropy<=t", "entropy>t"


def entropy_split_report(lists: Sequence[RankedList], entropies: Mapping[str, float],
                         threshold: float = 1.0) -> dict[str, BucketReport]:
    """MAP of original vs re-ranked order per click-entropy bucket; empty buckets are absent."""
    buckets: dict[str, list[RankedList]] = {LOW: [], HIGH: []}
    for rl in lists:
        if not rl.relevant or rl.query not in entropies:
            continue
        buckets[HIGH if entropies[rl.query] > threshold else LOW].append(rl)
    out = {}
    for name, items in buckets.items():
        if not items:
            continue
        orig = compute_ranking_metrics(rl.original_labels for rl in items)
        new = compute_ranking_metrics(rl.labels for rl in items)
        out[name] = BucketReport(len(items), orig.map, new.map)
    return out


@dataclass
class MetricsReport:
    split: str
    reranked: RankingMetrics
    original: RankingMetrics
    pairs: PairCounts | None = None
    buckets: dict[str, BucketReport] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        pi = self.pairs.value if self.pairs and self.pairs.total else None
        rows = []
        for system, m in (("original", self.original), ("reranked", self.reranked)):
            rows.append({"split": self.split, "system": system, "bucket": "all", "n": m.n_evaluated,
                         "map": m.map, "mrr": m.mrr, "p1": m.p1,
                         "p_improve": pi if system == "reranked" else None})
        for name, b in self.buckets.items():
            rows.append({"split": self.split, "system": "original", "bucket": name, "n": b.n,
                         "map": b.map_original, "mrr": None, "p1": None, "p_improve": None})
            rows.append({"split": self.split, "system": "reranked", "bucket": name, "n": b.n,
                         "map": b.map_reranked, "mrr": None, "p1": None, "p_improve": None})
        return rows

    def table(self) -> str:
        lines = ["P-improve = (inverse pairs corrected - correct pairs broken) / all rel-nonrel pairs",
                 f"{'split':<8}{'system':<10}{'bucket':<12}{'n':>6}{'MAP':>9}{'MRR':>9}{'P@1':>9}{'P-imp':>9}"]
        fmt = lambda v: f"{v:9.4f}" if v is not None else f"{'-':>9}"  # noqa: E731
        for r in self.rows():
            lines.append(f"{r['split']:<8}{r['system']:<10}{r['bucket']:<12}{r['n']:>6}"
                         f"{fmt(r['map'])}{fmt(r['mrr'])}{fmt(r['p1'])}{fmt(r['p_improve'])}")
        lines.append(f"excluded (no relevant candidate): {self.reranked.n_excluded}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        write_rows(path, self.rows())


def write_rows(path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                        for k, v in r.items()})


def metrics_report(lists: Sequence[RankedList], split: str = "test",
                   entropies: Mapping[str, float] | None = None, threshold: float = 1.0) -> MetricsReport:
    new = compute_ranking_metrics(rl.labels for rl in lists)
    orig = compute_ranking_metrics(rl.original_labels for rl in lists)
    judged = [rl for rl in lists if rl.relevant]
    pairs = pair_counts([[c.doc_id for c in rl.original] for rl in judged],
                        [rl.doc_ids for rl in judged], [rl.relevant for rl in judged])
    buckets = entropy_split_report(lists, entropies, threshold) if entropies else {}
    return MetricsReport(split, new, orig, pairs, buckets)


# ----------------------------------------------------------------------------
# representation analyses
# ----------------------------------------------------------------------------

HIST_WIDTH = 0.025
HIST_BINS = 80


def cosine_histogram(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Counts of pairwise cosines over [-1, 1] in 80 bins of width 0.025."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    unit = v / np.maximum(norms, 1e-12)[:, None]
    sims = unit @ unit.T
    iu = np.triu_indices(len(v), k=1)
    vals = np.clip(sims[iu], -1.0, 1.0)
    edges = np.linspace(-1.0, 1.0, HIST_BINS + 1)
    idx = np.minimum(np.floor((vals + 1.0) / HIST_WIDTH).astype(np.int64), HIST_BINS - 1)
    return np.bincount(idx, minlength=HIST_BINS), edges


def sample_population(population: Sequence, k: int | None, seed: int = 0) -> list:
    pop = list(population)
    if k is None:
        return pop
    if k > len(pop):
        raise ValueError(f"sample of {k} exceeds population of {len(pop)}")
    rng = np.random.default_rng(seed)
    return [pop[i] for i in sorted(rng.choice(len(pop), size=k, replace=False))]


def write_histogram(path, hists: Mapping[str, np.ndarray], edges: np.ndarray) -> None:
    names = list(hists)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", *names])
        for i in range(HIST_BINS):
            w.writerow([f"{edges[i]:.3f}", f"{edges[i + 1]:.3f}", *(int(hists[n][i]) for n in names)])


def write_vectors(path, texts: Sequence[str], vectors: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_text", *(f"v{i + 1}" for i in range(vectors.shape[1]))])
        for t, row in zip(texts, vectors):
            w.writerow([t, *(repr(float(x)) for x in row)])
