"""Run configuration and the end-to-end experiment driver."""

from __future__ import annotations

import configparser
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .bm25 import BM25Index
from .encoders import PRESETS, Model, TokenLookup, preset
from .logs import Document, QueryEvent, Splits, click_entropies, sessionize, temporal_split
from .metrics import MetricsReport, compute_ranking_metrics, metrics_report
from .mining import (DP, QP, SAP, TASKS, UP, mine_document_pairs, mine_query_pairs,
                     mine_sap_instances, mine_user_pairs)
from .pretrain import PretrainConfig, PretrainResult, pretrain_run
from .ranker import (EventRecord, FeatureExtractor, FinetuneConfig, FinetuneResult, finetune_run,
                     prepare_records, rerank)
from .runs import RankedList
from .vocab import Vocabulary, build_vocab

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    sim_threshold: float = 0.5
    max_gap: int = 0  # seconds; 0 disables the time cut
    background_fraction: float = 5 / 13
    sat_dwell: int = 30
    min_count: int = 1
    entropy_threshold: float = 1.0
    max_behaviors: int = 70


@dataclass
class ModelSection:
    preset: str = "desk"
    emb_dim: int = 0  # 0 keeps the preset value (here and below)
    hidden: int = 0
    heads: int = 0
    layers: int = 0
    ff_dim: int = 0
    mlp_units: int = 0
    max_sentence_len: int = 0
    max_long: int = 0
    max_short: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    pretrain_enabled: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def model_config(self, vocab_size: int):
        m = self.model
        if m.preset not in PRESETS:
            raise ConfigError(f"model.preset: unknown preset {m.preset!r}")
        over = {f.name: getattr(m, f.name) for f in dataclasses.fields(m)
                if f.name != "preset" and getattr(m, f.name)}
        return preset(m.preset, vocab_size, **over)

    def seeded(self, seed: int) -> "RunConfig":
        """Same config with every stage seed derived from ``seed``."""
        return dataclasses.replace(self, seed=seed,
                                   pretrain=dataclasses.replace(self.pretrain, seed=seed),
                                   finetune=dataclasses.replace(self.finetune, seed=seed))


# ----------------------------------------------------------------------------
# INI (de)serialisation
# ----------------------------------------------------------------------------

_SECTIONS = ("data", "model", "pretrain", "finetune")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, dict):
        return ", ".join(f"{k}={_format(v)}" for k, v in value.items())
    if isinstance(value, (tuple, list)):
        return ", ".join(map(str, value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(section: str, name: str, raw: str, current):
    where = f"{section}.{name}" if section else name
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected a boolean, got {raw!r}")
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, dict):
            out = dict(current)
            for part in filter(None, (p.strip() for p in raw.split(","))):
                k, _, v = part.partition("=")
                k = k.strip()
                if k not in current:
                    raise ValueError(f"unknown key {k!r}")
                out[k] = float(v)
            return out
        if isinstance(current, tuple):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def apply_setting(cfg: RunConfig, key: str, raw: str) -> RunConfig:
    """Apply one ``section.field=value`` (or top-level ``field=value``) override."""
    section, _, name = key.rpartition(".")
    if section:
        if section not in _SECTIONS:
            raise ConfigError(f"{key}: unknown section {section!r}")
        obj = getattr(cfg, section)
    else:
        obj = cfg
    names = {f.name for f in dataclasses.fields(obj)} - set(_SECTIONS)
    if name not in names:
        raise ConfigError(f"{key}: unknown field")
    value = _parse(section, name, raw, getattr(obj, name))
    try:
        new_obj = dataclasses.replace(obj, **{name: value})
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return dataclasses.replace(cfg, **{section: new_obj}) if section else new_obj


def load_config(path=None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    """File values first, then ``overrides`` (CLI flags) on top."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for name, raw in parser.items(section):
                key = name if section == "run" else f"{section}.{name}"
                if section not in _SECTIONS + ("run",):
                    raise ConfigError(f"{path}: unknown section [{section}]")
                cfg = apply_setting(cfg, key, raw)
    for key, raw in (overrides or {}).items():
        cfg = apply_setting(cfg, key, raw)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = ["[run]"]
    for f in dataclasses.fields(cfg):
        if f.name not in _SECTIONS:
            lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    for section in _SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# prepared log
# ----------------------------------------------------------------------------

@dataclass
class PreparedLog:
    corpus: dict[str, Document]
    events: dict[str, list[QueryEvent]]  # all retained users, sessionized
    splits: Splits
    vocab: Vocabulary
    bm25: BM25Index
    entropies: dict[str, float]  # over the whole experimental log

    @classmethod
    def build(cls, corpus, raw_events, cfg: DataConfig | None = None,
              vocab: Vocabulary | None = None) -> "PreparedLog":
        cfg = cfg or DataConfig()
        events = sessionize(raw_events, cfg.sim_threshold, cfg.max_gap or None)
        splits = temporal_split(events, cfg.background_fraction)
        kept = splits.merged(*Splits.NAMES)
        history = splits.merged("background", "train")
        if vocab is None:
            vocab = build_vocab(history, corpus, cfg.min_count)
        return cls(corpus, kept, splits, vocab, BM25Index(corpus), click_entropies(kept))

    @property
    def mining_events(self) -> dict[str, list[QueryEvent]]:
        return self.splits.merged("background", "train")

    def lookup(self, max_len: int = 20) -> TokenLookup:
        return TokenLookup(self.vocab, self.corpus, max_len)


def mine_all(log: PreparedLog, cfg: RunConfig) -> dict[str, list]:
    ev = log.mining_events
    m = cfg.model_config(len(log.vocab))
    return {
        DP: mine_document_pairs(ev),
        QP: mine_query_pairs(ev),
        SAP: mine_sap_instances(ev, cfg.seed, cfg.data.max_behaviors),
        UP: mine_user_pairs(ev, cfg.data.entropy_threshold, m.max_long, m.max_short),
    }


def build_records(log: PreparedLog, model: Model, lookup: TokenLookup,
                  splits=("train", "valid", "test")) -> dict[str, list[EventRecord]]:
    ext = FeatureExtractor(log.bm25, lookup, model.store["feat.emb"].data)
    c = model.cfg
    return {name: prepare_records(log.events, log.splits[name], ext, lookup, c.max_long, c.max_short)
            for name in splits}


@dataclass
class ExperimentResult:
    model: Model
    pretrain: PretrainResult | None
    finetune: FinetuneResult
    test_lists: list[RankedList]
    report: MetricsReport


def run_experiment(log: PreparedLog, cfg: RunConfig, pairs: Mapping[str, list] | None = None) -> ExperimentResult:
    model = Model.create(cfg.model_config(len(log.vocab)), cfg.seed)
    lookup = log.lookup(model.cfg.max_sentence_len)
    pre = None
    if cfg.pretrain_enabled and cfg.pretrain.tasks and cfg.pretrain.steps > 0:
        data = pairs if pairs is not None else mine_all(log, cfg)
        pre = pretrain_run(model, data, lookup, cfg.pretrain)
    records = build_records(log, model, lookup)
    ft = finetune_run(model, records["train"], records["valid"], lookup, cfg.finetune)
    lists = rerank(model, records["test"], lookup)
    return ExperimentResult(model, pre, ft, lists, metrics_report(lists, "test", log.entropies,
                                                                 cfg.data.entropy_threshold))


def subset_p1(lists, queries) -> float:
    sel = [rl.labels for rl in lists if rl.query in queries]
    return compute_ranking_metrics(sel).p1


def ablation_configs(base: RunConfig) -> dict[str, RunConfig]:
    """Full model, no pre-training, and one variant per removed task."""
    out = {"PSSL": base, "no-pretrain": dataclasses.replace(base, pretrain_enabled=False)}
    for task in TASKS:
        tasks = tuple(t for t in base.pretrain.tasks if t != task)
        out[f"w/o {task.upper()}"] = dataclasses.replace(
            base, pretrain=dataclasses.replace(base.pretrain, tasks=tasks))
    return out


def mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std())
