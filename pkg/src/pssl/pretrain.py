"""Stage one: contrastive pre-training of the two encoders."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .encoders import (SENTENCE_PREFIXES, SEQUENCE_PREFIXES, Model, SentenceBank, TokenLookup,
                       param_names)
from .logs import split_history
from .mining import DP, QP, SAP, TASKS, UP, BatchStream, PretrainBatch

logger = logging.getLogger(__name__)

DEFAULT_WEIGHTS = {DP: 0.5, QP: 0.5, SAP: 1.0, UP: 0.2}


@dataclass
class PretrainConfig:
    batch_size: int = 16
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    tasks: tuple = TASKS
    lr: float = 1e-3
    steps: int = 300
    temperature: float = 1.0
    seed: int = 0
    aug_ratio: float = 0.5
    up_negatives: str = "both"
    symmetric: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")


def info_nce(anchor: Tensor, positive: Tensor, negatives: Sequence[Tensor], temperature: float = 1.0) -> Tensor:
    """-log softmax probability of the positive among positive + negatives (cosine logits)."""
    logits = [ad.cosine(anchor, positive) * (1.0 / temperature)]
    logits += [ad.cosine(anchor, n) * (1.0 / temperature) for n in negatives]
    stacked = ad.stack(logits)
    return ad.logsumexp(stacked) - logits[0]


def batch_info_nce(za: Tensor, zb: Tensor, temperature: float = 1.0, negatives: str = "both") -> Tensor:
    """Mean InfoNCE over anchors ``za[k]`` with positives ``zb[k]``.

    With ``negatives='both'`` each anchor is contrasted against the other
    2(N-1) batch members; with ``'one'`` only against the other N-1 positives.
    """
    n = za.shape[0]
    inv_t = 1.0 / temperature
    s_ab = ad.cosine_matrix(za, zb) * inv_t
    diag = np.arange(n)
    pos = s_ab[diag, diag]
    if negatives == "both":
        s_aa = ad.cosine_matrix(za, za) * inv_t
        self_mask = np.zeros((n, 2 * n), dtype=za.dtype)
        self_mask[diag, n + diag] = -1e9
        logits = ad.concat([s_ab, s_aa], axis=1) + Tensor(self_mask)
    elif negatives == "one":
        logits = s_ab
    else:
        raise ValueError(f"unknown negative mode {negatives!r}")
    return (ad.logsumexp(logits, axis=-1) - pos).mean()


def encode_batch(batch: PretrainBatch, model: Model, lookup: TokenLookup) -> tuple[Tensor, Tensor]:
    """Encode both members of every pair in the batch -> (anchors, positives)."""
    bank = SentenceBank()
    n = len(batch)
    cfg = model.cfg
    if batch.task in (DP, QP):
        if batch.task == DP:
            a = [bank.add(lookup.doc(p.doc_i)) for p in batch.items]
            b = [bank.add(lookup.doc(p.doc_j)) for p in batch.items]
        else:
            a = [bank.add(lookup.query(p.query_i)) for p in batch.items]
            b = [bank.add(lookup.query(p.query_j)) for p in batch.items]
        vec = bank.encode(model)
        return vec[np.array(a)], vec[np.array(b)]
    if batch.task == SAP:
        items = [bank.add_view(split_history(h, cfg.max_long, cfg.max_short), lookup)
                 for pair in batch.augmented for h in pair]
    elif batch.task == UP:
        items = []
        for p in batch.items:
            q = lookup.query(p.query)
            items.append(bank.add_view(p.history_i, lookup, q))
            items.append(bank.add_view(p.history_j, lookup, q))
    else:
        raise ValueError(f"unknown task {batch.task!r}")
    reps = model.encode_sequences(bank.encode(model), items)
    idx = np.arange(n)
    return reps[2 * idx], reps[2 * idx + 1]


def task_loss(batch: PretrainBatch, model: Model, lookup: TokenLookup, temperature: float = 1.0,
              negatives: str = "both", symmetric: bool = False) -> Tensor:
    za, zb = encode_batch(batch, model, lookup)
    mode = negatives if batch.task == UP else "both"
    loss = batch_info_nce(za, zb, temperature, mode)
    if symmetric:
        loss = (loss + batch_info_nce(zb, za, temperature, mode)) * 0.5
    return loss


@dataclass
class PretrainResult:
    curve: list[dict]
    tasks: tuple[str, ...]


def pretrain_run(model: Model, data: Mapping[str, Sequence], lookup: TokenLookup,
                 cfg: PretrainConfig, log_path=None, checkpoint_path=None) -> PretrainResult:
    """Weighted multi-task contrastive training; word embeddings stay frozen."""
    streams = {}
    for task in TASKS:
        if task not in cfg.tasks:
            continue
        items = data.get(task, ())
        if len(items) < cfg.batch_size:
            logger.warning("task %s: %d instances < batch size %d, skipped", task, len(items), cfg.batch_size)
            continue
        seed = cfg.seed * 1000 + TASKS.index(task)
        streams[task] = iter(BatchStream(task, items, cfg.batch_size, seed, cfg.aug_ratio))
    if not streams:
        raise ValueError("no enabled pre-training task has enough instances")
    model.set_embeddings_trainable(False)
    model.store.reset_optimizer()
    prefixes = list(SENTENCE_PREFIXES)
    if SAP in streams or UP in streams:
        prefixes += SEQUENCE_PREFIXES
    names = param_names(model.store, prefixes)
    curve: list[dict] = []
    for step in range(1, cfg.steps + 1):
        total = None
        losses = {}
        for task, stream in streams.items():
            loss = task_loss(next(stream), model, lookup, cfg.temperature, cfg.up_negatives, cfg.symmetric)
            losses[task] = loss.item()
            term = loss * float(cfg.weights.get(task, 0.0))
            total = term if total is None else total + term
        total.backward()
        model.store.adam_step(cfg.lr, names)
        total_v = total.item()
        for task, v in losses.items():
            curve.append({"step": step, "task": task, "loss": v, "total": total_v})
        if step % 50 == 0 or step == 1:
            logger.info("pretrain step %d total %.4f %s", step, total_v,
                        " ".join(f"{t}={v:.4f}" for t, v in losses.items()))
        if checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            checkpoint.save(checkpoint_path, model, {"stage": "pretrain", "step": step})
    if log_path:
        write_curve(log_path, curve)
    if checkpoint_path:
        checkpoint.save(checkpoint_path, model, {"stage": "pretrain", "step": cfg.steps})
    return PretrainResult(curve, tuple(streams))


def write_curve(path, curve: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "task", "loss", "total"], lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
