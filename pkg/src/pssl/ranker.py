"""Stage two: feature extraction, score fusion, pairwise fine-tuning and re-ranking."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .bm25 import BM25Index
from .encoders import N_FEATURES, Model, SentenceBank, TokenLookup, mlp
from .logs import SAT_DWELL_SECS, HistoryView, QueryEvent, history_views, prior_count
from .metrics import compute_ranking_metrics
from .runs import RankedList, make_qid, rank_candidates

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("user_clicks_doc", "user_clicks_doc_query", "user_query_count", "bm25",
                 "inv_rank", "max_word_cos", "mean_word_cos", "term_coverage")


# ----------------------------------------------------------------------------
# features
# ----------------------------------------------------------------------------

class FeatureExtractor:
    """Raw (unstandardized) 8-dim features of every candidate of an event."""

    def __init__(self, bm25: BM25Index, lookup: TokenLookup, word_emb: np.ndarray):
        self.bm25 = bm25
        self.lookup = lookup
        emb = np.asarray(word_emb, dtype=np.float64)
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        self.unit = emb / np.maximum(norms, 1e-12)

    def _word_cos(self, q_ids, d_ids) -> tuple[float, float]:
        if not q_ids or not d_ids:
            return 0.0, 0.0
        sims = self.unit[list(q_ids)] @ self.unit[list(d_ids)].T
        return float(sims.max()), float(sims.mean())

    def features(self, events: Sequence[QueryEvent], index: int) -> np.ndarray:
        ev = events[index]
        prior = events[:prior_count(events, index)]
        clicks_any: Counter = Counter()
        clicks_q: Counter = Counter()
        q_count = 0
        for p in prior:
            same = p.query == ev.query
            q_count += same
            for d in p.clicked:
                clicks_any[d] += 1
                if same:
                    clicks_q[d] += 1
        q_terms = set(ev.terms)
        q_ids = self.lookup.query(ev.query)
        out = np.zeros((len(ev.candidates), N_FEATURES))
        for row, (doc_id, rank) in enumerate(ev.candidates):
            doc = self.bm25.tf.get(doc_id, {})
            mx, mean = self._word_cos(q_ids, self.lookup.doc(doc_id))
            cover = sum(t in doc for t in q_terms) / len(q_terms) if q_terms else 0.0
            out[row] = (clicks_any[doc_id], clicks_q[doc_id], q_count,
                        self.bm25.score(ev.terms, doc_id), 1.0 / rank, mx, mean, cover)
        return out


def extract_features(events: Sequence[QueryEvent], index: int, bm25: BM25Index,
                     lookup: TokenLookup, word_emb: np.ndarray) -> np.ndarray:
    return FeatureExtractor(bm25, lookup, word_emb).features(events, index)


def fit_standardizer(raw: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    stacked = np.concatenate([r for r in raw if len(r)], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


# ----------------------------------------------------------------------------
# prepared events
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class EventRecord:
    qid: str
    user_id: str
    index: int
    query: str
    query_ids: tuple[int, ...]
    view: HistoryView
    doc_ids: tuple[str, ...]
    orig_ranks: np.ndarray
    features: np.ndarray  # raw, (C, 8)
    relevant: np.ndarray  # bool, (C,)

    @property
    def n_pairs(self) -> int:
        r = int(self.relevant.sum())
        return r * (len(self.relevant) - r)


def prepare_records(events: Mapping[str, list[QueryEvent]], selected: Mapping[str, list[QueryEvent]],
                    extractor: FeatureExtractor, lookup: TokenLookup, max_long: int = 50,
                    max_short: int = 20, sat_dwell: int = SAT_DWELL_SECS) -> list[EventRecord]:
    """Records for the events in ``selected``, with histories drawn from the full ``events``."""
    out = []
    for user in sorted(selected):
        full = events[user]
        pos = {id(ev): i for i, ev in enumerate(full)}
        for ev in selected[user]:
            i = pos.get(id(ev))
            if i is None:
                i = full.index(ev)
            rel = ev.relevant(sat_dwell)
            out.append(EventRecord(
                make_qid(user, i), user, i, ev.query, lookup.query(ev.query),
                history_views(full, i, max_long, max_short), ev.doc_ids,
                np.array([r for _, r in ev.candidates], dtype=np.int64),
                extractor.features(full, i),
                np.array([d in rel for d in ev.doc_ids], dtype=bool),
            ))
    return out


# ----------------------------------------------------------------------------
# scoring
# ----------------------------------------------------------------------------

def personalized_score(user_vec: Tensor, doc_vec: Tensor) -> Tensor:
    return ad.cosine(user_vec, doc_vec)


def adhoc_score(model: Model, sim_qd: Tensor, features: Tensor) -> Tensor:
    """Outer MLP over [Sim(q, d), inner MLP(features)]; inputs (K,) and (K, 8) -> (K,)."""
    k = features.shape[0]
    inner = mlp(features, model.store, "feat")
    return mlp(ad.concat([sim_qd.reshape(k, 1), inner], axis=1), model.store, "adhoc").reshape(k)


def final_score(model: Model, pscore: Tensor, ascore: Tensor) -> Tensor:
    k = pscore.shape[0]
    x = ad.concat([pscore.reshape(k, 1), ascore.reshape(k, 1)], axis=1)
    return mlp(x, model.store, "fuse").reshape(k)


def pairwise_rank_loss(score_i: Tensor, score_j: Tensor) -> Tensor:
    """-log sigmoid(s_i - s_j) for relevant i over non-relevant j (elementwise)."""
    return -ad.log_sigmoid(score_i - score_j)


def standardize(model: Model, raw: np.ndarray) -> np.ndarray:
    mean = model.store["feat.mean"].data.astype(np.float64)
    std = model.store["feat.std"].data.astype(np.float64)
    return ((raw - mean) / std).astype(model.dtype)


@dataclass
class Scores:
    final: Tensor
    pscore: Tensor
    ascore: Tensor
    offsets: np.ndarray  # record r owns final[offsets[r]:offsets[r+1]]


def score_records(model: Model, records: Sequence[EventRecord], lookup: TokenLookup) -> Scores:
    bank = SentenceBank()
    items, q_rows, d_rows, owner = [], [], [], []
    for r, rec in enumerate(records):
        items.append(bank.add_view(rec.view, lookup, rec.query_ids))
        q_rows.append(bank.add(rec.query_ids))
        for d in rec.doc_ids:
            d_rows.append(bank.add(lookup.doc(d)))
            owner.append(r)
    vec = bank.encode(model)
    users = model.encode_sequences(vec, items)
    owner = np.array(owner)
    docs = vec[np.array(d_rows)]
    pscore = personalized_score(users[owner], docs)
    sim = ad.cosine(vec[np.array(q_rows)][owner], docs)
    feats = Tensor(np.concatenate([standardize(model, rec.features) for rec in records], axis=0))
    ascore = adhoc_score(model, sim, feats)
    final = final_score(model, pscore, ascore)
    offsets = np.concatenate([[0], np.cumsum([len(rec.doc_ids) for rec in records])])
    return Scores(final, pscore, ascore, offsets)


def rerank(model: Model, records: Sequence[EventRecord], lookup: TokenLookup,
           chunk: int = 64) -> list[RankedList]:
    """Re-rank every record; ties in score keep the original order."""
    out = []
    with ad.no_grad():
        for start in range(0, len(records), chunk):
            part = records[start:start + chunk]
            s = score_records(model, part, lookup)
            vals = s.final.data.astype(np.float64)
            for r, rec in enumerate(part):
                seg = vals[s.offsets[r]:s.offsets[r + 1]]
                rel = [d for d, f in zip(rec.doc_ids, rec.relevant) if f]
                out.append(rank_candidates(rec.qid, rec.user_id, rec.query, rec.doc_ids,
                                           rec.orig_ranks, seg, rel))
    return out


def original_lists(records: Sequence[EventRecord]) -> list[RankedList]:
    """The input ranking expressed as RankedLists (score = -original rank)."""
    return [rank_candidates(rec.qid, rec.user_id, rec.query, rec.doc_ids, rec.orig_ranks,
                            -rec.orig_ranks.astype(float),
                            [d for d, f in zip(rec.doc_ids, rec.relevant) if f])
            for rec in records]


def evaluate_map(model: Model, records: Sequence[EventRecord], lookup: TokenLookup) -> float:
    return compute_ranking_metrics(rl.labels for rl in rerank(model, records, lookup)).map


# ----------------------------------------------------------------------------
# fine-tuning
# ----------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    steps: int = 500
    lr: float = 3e-4
    batch_events: int = 16
    max_pairs: int = 10
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.batch_events < 1 or self.max_pairs < 1:
            raise ValueError("finetune steps/batch_events/max_pairs must be positive")


@dataclass
class FinetuneResult:
    curve: list[dict]
    validation: list[dict]
    best_step: int
    best_map: float | None


def _sample_pairs(rec: EventRecord, cap: int, rng) -> list[tuple[int, int]]:
    pos = np.flatnonzero(rec.relevant)
    neg = np.flatnonzero(~rec.relevant)
    pairs = [(int(i), int(j)) for i in pos for j in neg]
    if len(pairs) > cap:
        pick = np.sort(rng.choice(len(pairs), size=cap, replace=False))
        pairs = [pairs[k] for k in pick]
    return pairs


def set_standardizer(model: Model, records: Sequence[EventRecord]) -> None:
    mean, std = fit_standardizer([r.features for r in records])
    model.store["feat.mean"].data[...] = mean
    model.store["feat.std"].data[...] = std


def finetune_run(model: Model, train: Sequence[EventRecord], valid: Sequence[EventRecord],
                 lookup: TokenLookup, cfg: FinetuneConfig, log_path=None,
                 checkpoint_path=None) -> FinetuneResult:
    """Pairwise fine-tuning of the whole network; the model ends at its best-validation state."""
    usable = [r for r in train if r.n_pairs > 0]
    if not usable:
        raise ValueError("no trainable (relevant, non-relevant) pairs in the training split")
    set_standardizer(model, train)
    model.set_embeddings_trainable(True)
    store = model.store
    store.reset_optimizer()
    rng = np.random.default_rng([cfg.seed, 7])
    curve, validation = [], []
    best_map, best_step, best_state = None, 0, None

    def validate(step):
        nonlocal best_map, best_step, best_state
        if not any(r.relevant.any() for r in valid):
            return
        m = evaluate_map(model, valid, lookup)
        validation.append({"step": step, "valid_map": m})
        logger.info("finetune step %d valid MAP %.4f", step, m)
        if best_map is None or m > best_map:
            best_map, best_step = m, step
            best_state = {n: t.data.copy() for n, t in store.items()}

    validate(0)
    for step in range(1, cfg.steps + 1):
        batch_idx = rng.choice(len(usable), size=min(cfg.batch_events, len(usable)), replace=False)
        batch = [usable[k] for k in batch_idx]
        s = score_records(model, batch, lookup)
        gi, gj = [], []
        for r, rec in enumerate(batch):
            base = int(s.offsets[r])
            for i, j in _sample_pairs(rec, cfg.max_pairs, rng):
                gi.append(base + i)
                gj.append(base + j)
        loss = pairwise_rank_loss(s.final[np.array(gi)], s.final[np.array(gj)]).mean()
        loss.backward()
        names = [n for n, t in store.items() if t.requires_grad and t.grad is not None]
        store.adam_step(cfg.lr, names)
        store.zero_grad()
        curve.append({"step": step, "loss": loss.item(), "pairs": len(gi)})
        if step % cfg.eval_every == 0 or step == cfg.steps:
            validate(step)
    if best_state is not None:
        for n, arr in best_state.items():
            store[n].data[...] = arr
    else:
        best_step = cfg.steps
    if log_path:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "pairs", "valid_map"])
            vmap = {v["step"]: v["valid_map"] for v in validation}
            if 0 in vmap:
                w.writerow([0, "", 0, repr(vmap[0])])
            for row in curve:
                v = vmap.get(row["step"])
                w.writerow([row["step"], repr(row["loss"]), row["pairs"], "" if v is None else repr(v)])
    if checkpoint_path:
        checkpoint.save(checkpoint_path, model, {"stage": "finetune", "best_step": best_step,
                                                 "valid_map": best_map})
    return FinetuneResult(curve, validation, best_step, best_map)
