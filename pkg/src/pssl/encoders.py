"""Sentence and hierarchical sequence encoders plus the ranking heads' parameters."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .logs import CLICK, Behavior, Document, HistoryView
from .vocab import PAD, Vocabulary

MASK_VALUE = -1e9
N_FEATURES = 8


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    emb_dim: int = 32
    hidden: int = 64
    heads: int = 2
    layers: int = 2
    ff_dim: int = 128
    mlp_units: int = 32
    max_sentence_len: int = 20
    max_long: int = 50
    max_short: int = 20

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PRESETS = {
    "desk": dict(emb_dim=32, hidden=64, heads=2, layers=2, ff_dim=128, mlp_units=32,
                 max_long=30, max_short=10),
    # 512 is not divisible by 6 heads; 510 is the nearest width that is.
    "paper": dict(emb_dim=100, hidden=510, heads=6, layers=6, ff_dim=2040, mlp_units=128),
}


def preset(name: str, vocab_size: int, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(vocab_size=vocab_size, **{**PRESETS[name], **overrides})


# ----------------------------------------------------------------------------
# parameter initialisation
# ----------------------------------------------------------------------------

def _uniform(rng, shape, dtype, scale=0.05):
    return rng.uniform(-scale, scale, size=shape).astype(dtype)


def _xavier(rng, fan_in, fan_out, dtype):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def _add_stack(store: ParamStore, prefix: str, cfg: ModelConfig, rng, dtype, max_len: int):
    h, f = cfg.hidden, cfg.ff_dim
    store.add(f"{prefix}.pos", Tensor(_uniform(rng, (max_len, h), dtype), requires_grad=True))
    for i in range(cfg.layers):
        p = f"{prefix}.l{i}"
        for w in ("Wq", "Wk", "Wv", "Wo"):
            store.add(f"{p}.{w}", Tensor(_xavier(rng, h, h, dtype), requires_grad=True))
            store.add(f"{p}.b{w[1]}", Tensor(np.zeros(h, dtype), requires_grad=True))
        store.add(f"{p}.ln1.g", Tensor(np.ones(h, dtype), requires_grad=True))
        store.add(f"{p}.ln1.b", Tensor(np.zeros(h, dtype), requires_grad=True))
        store.add(f"{p}.W1", Tensor(_xavier(rng, h, f, dtype), requires_grad=True))
        store.add(f"{p}.b1", Tensor(np.zeros(f, dtype), requires_grad=True))
        store.add(f"{p}.W2", Tensor(_xavier(rng, f, h, dtype), requires_grad=True))
        store.add(f"{p}.b2", Tensor(np.zeros(h, dtype), requires_grad=True))
        store.add(f"{p}.ln2.g", Tensor(np.ones(h, dtype), requires_grad=True))
        store.add(f"{p}.ln2.b", Tensor(np.zeros(h, dtype), requires_grad=True))


def _add_mlp(store: ParamStore, prefix: str, n_in: int, units: int, rng, dtype):
    store.add(f"{prefix}.W1", Tensor(_xavier(rng, n_in, units, dtype), requires_grad=True))
    store.add(f"{prefix}.b1", Tensor(np.zeros(units, dtype), requires_grad=True))
    store.add(f"{prefix}.W2", Tensor(_xavier(rng, units, 1, dtype), requires_grad=True))
    store.add(f"{prefix}.b2", Tensor(np.zeros(1, dtype), requires_grad=True))


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    if cfg.hidden % cfg.heads:
        raise ValueError(f"hidden size {cfg.hidden} not divisible by {cfg.heads} heads")
    rng = np.random.default_rng(seed)
    store = ParamStore()
    emb = _uniform(rng, (cfg.vocab_size, cfg.emb_dim), dtype)
    emb[PAD] = 0.0
    store.add("emb", Tensor(emb, requires_grad=True))
    if cfg.emb_dim != cfg.hidden:
        store.add("sent.proj.W", Tensor(_xavier(rng, cfg.emb_dim, cfg.hidden, dtype), requires_grad=True))
        store.add("sent.proj.b", Tensor(np.zeros(cfg.hidden, dtype), requires_grad=True))
    _add_stack(store, "sent", cfg, rng, dtype, cfg.max_sentence_len)
    _add_stack(store, "short", cfg, rng, dtype, cfg.max_short + 2)
    _add_stack(store, "long", cfg, rng, dtype, cfg.max_long + 1)
    store.add("user", Tensor(_uniform(rng, (cfg.hidden,), dtype), requires_grad=True))
    _add_mlp(store, "feat", N_FEATURES, cfg.mlp_units, rng, dtype)
    _add_mlp(store, "adhoc", 2, cfg.mlp_units, rng, dtype)
    _add_mlp(store, "fuse", 2, cfg.mlp_units, rng, dtype)
    # frozen copy of the initial word embeddings for the matching features
    store.add("feat.emb", Tensor(emb.copy()))
    store.add("feat.mean", Tensor(np.zeros(N_FEATURES, dtype)))
    store.add("feat.std", Tensor(np.ones(N_FEATURES, dtype)))
    return store


SENTENCE_PREFIXES = ("sent.",)
SEQUENCE_PREFIXES = ("short.", "long.", "user")
HEAD_PREFIXES = ("feat.W", "feat.b", "adhoc.", "fuse.")


def param_names(store: ParamStore, prefixes: Sequence[str]) -> list[str]:
    return [n for n in store if n.startswith(tuple(prefixes)) and store[n].requires_grad]


# ----------------------------------------------------------------------------
# building blocks
# ----------------------------------------------------------------------------

def attention_block(x: Tensor, mask: np.ndarray, store: ParamStore, prefix: str, heads: int) -> Tensor:
    """Post-norm transformer encoder layer over ``x`` of shape (B, L, h).

    ``mask`` is a boolean (B, L) array marking real (non-PAD) positions.
    """
    B, L, h = x.shape
    if h % heads:
        raise ValueError(f"hidden size {h} not divisible by {heads} heads")
    dh = h // heads
    P = lambda n: store[f"{prefix}.{n}"]  # noqa: E731

    def split(t):
        return t.reshape(B, L, heads, dh).transpose(0, 2, 1, 3)

    q = split(x @ P("Wq") + P("bq"))
    k = split(x @ P("Wk") + P("bk"))
    v = split(x @ P("Wv") + P("bv"))
    bias = np.where(mask, 0.0, MASK_VALUE).astype(x.dtype)[:, None, None, :]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + Tensor(bias)
    attn = ad.softmax(scores, axis=-1)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, L, h)
    x = ad.layer_norm(x + (ctx @ P("Wo") + P("bo")), P("ln1.g"), P("ln1.b"))
    ff = ad.relu(x @ P("W1") + P("b1")) @ P("W2") + P("b2")
    return ad.layer_norm(x + ff, P("ln2.g"), P("ln2.b"))


def transformer(x: Tensor, mask: np.ndarray, store: ParamStore, prefix: str, cfg: ModelConfig) -> Tensor:
    L = x.shape[1]
    pos = store[f"{prefix}.pos"]
    if L > pos.shape[0]:
        raise ValueError(f"{prefix}: sequence length {L} exceeds {pos.shape[0]} positions")
    x = x + pos[:L]
    for i in range(cfg.layers):
        x = attention_block(x, mask, store, f"{prefix}.l{i}", cfg.heads)
    return x


def mlp(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """One hidden tanh layer, linear scalar output: (..., n_in) -> (..., 1)."""
    hid = ad.tanh(x @ store[f"{prefix}.W1"] + store[f"{prefix}.b1"])
    return hid @ store[f"{prefix}.W2"] + store[f"{prefix}.b2"]


def _pad(seqs: Sequence[Sequence[int]], fill: int, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    L = max([min_len] + [len(s) for s in seqs])
    ids = np.full((len(seqs), L), fill, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


# ----------------------------------------------------------------------------
# encoders
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SeqItem:
    """Rows (into a sentence-vector table) of a user's long/short history and query."""
    long_rows: tuple[int, ...]
    short_rows: tuple[int, ...]
    query_row: int | None = None


class Model:
    def __init__(self, cfg: ModelConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        return cls(cfg, init_params(cfg, seed, dtype))

    @property
    def dtype(self):
        return self.store["emb"].dtype

    def set_embeddings_trainable(self, flag: bool) -> None:
        self.store["emb"].requires_grad = flag

    def embed_tokens(self, ids) -> Tensor:
        return ad.embedding(self.store["emb"], ids, padding_idx=PAD)

    def encode_sentences(self, id_lists: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray]:
        """Sum-pooled transformer outputs, (n, hidden). Also returns a flag per empty input."""
        cfg = self.cfg
        seqs = [list(s)[:cfg.max_sentence_len] for s in id_lists]
        ids, mask = _pad(seqs, PAD)
        ids = np.where(mask, ids, PAD)
        x = self.embed_tokens(ids)
        if "sent.proj.W" in self.store:
            x = x @ self.store["sent.proj.W"] + self.store["sent.proj.b"]
        x = transformer(x, mask, self.store, "sent", cfg)
        pooled = (x * Tensor(mask[..., None].astype(self.dtype))).sum(axis=1)
        return pooled, ~mask.any(axis=1)

    def sentence_encode(self, ids: Sequence[int]) -> Tensor:
        return self.encode_sentences([ids])[0][0]

    def encode_sequences(self, vectors: Tensor, items: Sequence[SeqItem]) -> Tensor:
        """Hierarchical user encoding, (len(items), hidden).

        Short-term input: [short-term behaviors, query (if any), [User]]; its
        last position gives the session state, which is appended to the
        long-term behaviors and read off the long transformer's last position.
        """
        cfg = self.cfg
        n_vec = vectors.shape[0]
        h = cfg.hidden
        zero = Tensor(np.zeros((1, h), self.dtype))
        user = self.store["user"].reshape(1, h)
        short_seqs, long_seqs = [], []
        for it in items:
            if not it.long_rows and not it.short_rows and it.query_row is None:
                raise ValueError("sequence encoder needs a history or a query")
            s = list(it.short_rows[-cfg.max_short:])
            if it.query_row is not None:
                s.append(it.query_row)
            s.append(n_vec)  # [User]
            short_seqs.append(s)
            long_seqs.append(list(it.long_rows[-cfg.max_long:]))
        table = ad.concat([vectors, user, zero], axis=0)
        ids, mask = _pad(short_seqs, n_vec + 1)
        xs = transformer(ad.embedding(table, ids), mask, self.store, "short", cfg)
        B = len(items)
        rows = np.arange(B)
        session_state = xs[rows, mask.sum(axis=1) - 1]
        long_full = [s + [n_vec + b] for b, s in enumerate(long_seqs)]
        table2 = ad.concat([vectors, session_state, zero], axis=0)
        ids2, mask2 = _pad(long_full, n_vec + B)
        xl = transformer(ad.embedding(table2, ids2), mask2, self.store, "long", cfg)
        return xl[rows, mask2.sum(axis=1) - 1]


class TokenLookup:
    """Resolves queries, documents and behaviors to (truncated) token-id tuples."""

    def __init__(self, vocab: Vocabulary, corpus: Mapping[str, Document], max_len: int = 20):
        self.vocab = vocab
        self.corpus = corpus
        self.max_len = max_len
        self._q: dict[str, tuple[int, ...]] = {}
        self._d: dict[str, tuple[int, ...]] = {}

    def query(self, q: str) -> tuple[int, ...]:
        ids = self._q.get(q)
        if ids is None:
            ids = self._q[q] = tuple(self.vocab.encode(q.split()))[:self.max_len]
        return ids

    def doc(self, doc_id: str) -> tuple[int, ...]:
        ids = self._d.get(doc_id)
        if ids is None:
            doc = self.corpus.get(doc_id)
            terms = doc.terms if doc is not None else ()
            ids = self._d[doc_id] = tuple(self.vocab.encode(terms))[:self.max_len]
        return ids

    def behavior(self, b: Behavior) -> tuple[int, ...]:
        return self.doc(b.key) if b.kind == CLICK else self.query(b.key)


class SentenceBank:
    """Deduplicates token sequences so each is encoded once per batch."""

    def __init__(self):
        self.rows: dict[tuple[int, ...], int] = {}

    def add(self, ids: Sequence[int]) -> int:
        key = tuple(ids)
        row = self.rows.get(key)
        if row is None:
            row = self.rows[key] = len(self.rows)
        return row

    def add_view(self, view: HistoryView, lookup: TokenLookup, query_ids=None) -> SeqItem:
        return SeqItem(
            tuple(self.add(lookup.behavior(b)) for b in view.long_term),
            tuple(self.add(lookup.behavior(b)) for b in view.short_term),
            None if query_ids is None else self.add(query_ids),
        )

    def encode(self, model: Model) -> Tensor:
        seqs = list(self.rows)
        if not seqs:
            return Tensor(np.zeros((0, model.cfg.hidden), model.dtype))
        return model.encode_sentences(seqs)[0]


def sequence_encode(model: Model, view: HistoryView, lookup: TokenLookup, query_ids=None) -> Tensor:
    """Convenience single-instance user encoding."""
    bank = SentenceBank()
    item = bank.add_view(view, lookup, query_ids)
    return model.encode_sequences(bank.encode(model), [item])[0]


def load_embedding_file(path, vocab: Vocabulary, model: Model) -> int:
    """Overwrite embedding rows from a ``token<TAB>v1 ... vd`` file; returns rows loaded."""
    emb = model.store["emb"].data
    loaded = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected token<TAB>values")
            token, values = parts
            vec = np.array(values.split(), dtype=np.float64)
            if vec.shape[0] != emb.shape[1]:
                raise ValueError(f"{path}:{lineno}: dimension {vec.shape[0]} != {emb.shape[1]}")
            idx = vocab.index.get(token)
            if idx is None or idx == PAD:
                continue
            emb[idx] = vec
            loaded += 1
    model.store["feat.emb"].data[...] = emb
    return loaded
