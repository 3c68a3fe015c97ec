"""Command-line entry point: ``pssl <subcommand> ...``.

Exit codes: 0 success, 1 usage or invalid configuration, 2 data error
(missing or malformed input, checksum mismatch), 3 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from . import autodiff as ad
from .encoders import Model, SentenceBank
from .logs import (DocumentConflictError, LogFormatError, SplitError, history_views, ingest_log,
                   log_stats, write_documents, write_events)
from .metrics import (cosine_histogram, metrics_report, sample_population, write_histogram,
                      write_vectors)
from .mining import TASKS, read_pairs, write_pairs
from .pipeline import (ConfigError, PreparedLog, RunConfig, build_records, dump_config, load_config,
                       mine_all)
from .pretrain import pretrain_run
from .ranker import finetune_run, original_lists, rerank
from .runs import (assemble_lists, read_qrels, read_queries, read_run, write_qrels, write_queries,
                   write_run)
from .synth import InfeasibleConfigError, SynthConfig, generate
from .vocab import Vocabulary

logger = logging.getLogger("pssl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DATA_ENV = "PSSL_DATA_DIR"
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ----------------------------------------------------------------------------
# manifests
# ----------------------------------------------------------------------------

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir: Path, stage: str, cfg: RunConfig | None, inputs: dict, outputs: list[str],
                   extra: dict | None = None) -> None:
    doc = {
        "stage": stage,
        "code_version": __version__,
        "seed": cfg.seed if cfg else None,
        "config": dump_config(cfg) if cfg else None,
        "inputs": {str(p): sha256(p) for p in inputs.values()},
        "outputs": {name: sha256(out_dir / name) for name in outputs},
    }
    if extra:
        doc.update(extra)
    (out_dir / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def verify_dir(path: Path) -> dict:
    """Check the checksums recorded in a stage directory's manifest."""
    man = path / MANIFEST
    if not man.exists():
        raise DataError(f"{path}: no {MANIFEST}; not a pipeline output directory")
    doc = json.loads(man.read_text())
    for name, digest in doc.get("outputs", {}).items():
        f = path / name
        if not f.exists():
            raise DataError(f"{f}: listed in manifest but missing")
        if sha256(f) != digest:
            raise DataError(f"{f}: checksum mismatch against {man}")
    return doc


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing input: {p}")
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _data_dir(args) -> Path:
    d = args.data or os.environ.get(DATA_ENV)
    if not d:
        raise UsageError(f"--data not given and {DATA_ENV} is unset")
    p = _require(d)
    verify_dir(p)
    return p


def _load_log(data: Path, cfg: RunConfig) -> PreparedLog:
    res = ingest_log(data / "events.tsv", data / "docs.tsv")
    return PreparedLog.build(res.corpus, res.events, cfg.data, Vocabulary.load(data / "vocab.txt"))


def _load_model(path, log: PreparedLog, cfg: RunConfig) -> tuple[Model, dict]:
    _require(path)
    model, meta = checkpoint.load(path, cfg.model_config(len(log.vocab)))
    return model, meta


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> None:
    scfg = SynthConfig(seed=cfg.seed)
    for item in args.synth_set or []:
        key, _, raw = item.partition("=")
        fields = {f.name: f for f in dataclasses.fields(SynthConfig)}
        if key not in fields:
            raise ConfigError(f"synth.{key}: unknown field")
        cur = getattr(scfg, key)
        try:
            val = (raw.lower() in ("1", "true", "yes")) if isinstance(cur, bool) else type(cur)(raw)
        except ValueError as exc:
            raise ConfigError(f"synth.{key}: {exc}") from None
        scfg = dataclasses.replace(scfg, **{key: val})
    out = _out_dir(args.out)
    try:
        paths = generate(scfg, out)
    except InfeasibleConfigError as exc:
        raise ConfigError(f"synth: {exc}") from None
    write_manifest(out, "synth", cfg, {}, [p.name for p in paths.values()],
                   {"synth_config": dataclasses.asdict(scfg)})
    print(f"wrote {', '.join(str(p) for p in paths.values())}")


def cmd_ingest(args, cfg: RunConfig) -> None:
    events_path, docs_path = _require(args.events), _require(args.docs)
    res = ingest_log(events_path, docs_path)
    log = PreparedLog.build(res.corpus, res.events, cfg.data)
    out = _out_dir(args.out)
    write_events(out / "events.tsv", log.events)
    write_documents(out / "docs.tsv", res.corpus)
    log.vocab.save(out / "vocab.txt")
    stats = {name: dataclasses.asdict(log_stats(log.splits[name])) for name in log.splits.NAMES}
    report = {
        "rows": res.report.n_rows,
        "events": res.report.n_events,
        "dropped_events": dict(res.report.dropped_events),
        "dropped_documents": res.report.dropped_documents,
        "removed_users": list(log.splits.removed_users),
        "split_boundaries": list(log.splits.boundaries),
        "vocab_size": len(log.vocab),
        "stats": stats,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "ingest", cfg, {"events": events_path, "docs": docs_path},
                   ["events.tsv", "docs.tsv", "vocab.txt", "report.json"])
    print(f"ingested {res.report.n_events} events ({res.report.n_dropped} dropped), "
          f"{len(log.events)} users kept, vocabulary {len(log.vocab)}")


def cmd_mine(args, cfg: RunConfig) -> None:
    data = _data_dir(args)
    log = _load_log(data, cfg)
    pairs = mine_all(log, cfg)
    out = _out_dir(args.out)
    for task in TASKS:
        write_pairs(out / f"{task}.tsv", task, pairs[task])
    write_manifest(out, "mine-pairs", cfg, {"data": data / MANIFEST}, [f"{t}.tsv" for t in TASKS],
                   {"counts": {t: len(pairs[t]) for t in TASKS}})
    print(" ".join(f"{t}={len(pairs[t])}" for t in TASKS))


def cmd_pretrain(args, cfg: RunConfig) -> None:
    data = _data_dir(args)
    pairs_dir = _require(args.pairs)
    verify_dir(pairs_dir)
    log = _load_log(data, cfg)
    mcfg = cfg.model_config(len(log.vocab))
    mining = log.mining_events
    pairs = {t: read_pairs(pairs_dir / f"{t}.tsv", t, mining, mcfg.max_long, mcfg.max_short)
             for t in TASKS if t in cfg.pretrain.tasks}
    model = Model.create(mcfg, cfg.seed)
    out = _out_dir(args.out)
    pretrain_run(model, pairs, log.lookup(mcfg.max_sentence_len), cfg.pretrain,
                 log_path=out / "loss.csv", checkpoint_path=out / "model.ckpt")
    write_manifest(out, "pretrain", cfg, {"data": data / MANIFEST, "pairs": pairs_dir / MANIFEST},
                   ["model.ckpt", "loss.csv"])
    print(f"wrote {out / 'model.ckpt'}")


def cmd_finetune(args, cfg: RunConfig) -> None:
    data = _data_dir(args)
    log = _load_log(data, cfg)
    inputs = {"data": data / MANIFEST}
    if args.init:
        model, _ = _load_model(args.init, log, cfg)
        inputs["init"] = Path(args.init)
    else:
        model = Model.create(cfg.model_config(len(log.vocab)), cfg.seed)
    lookup = log.lookup(model.cfg.max_sentence_len)
    records = build_records(log, model, lookup, ("train", "valid"))
    out = _out_dir(args.out)
    res = finetune_run(model, records["train"], records["valid"], lookup, cfg.finetune,
                       log_path=out / "finetune.csv", checkpoint_path=out / "model.ckpt")
    write_manifest(out, "finetune", cfg, inputs, ["model.ckpt", "finetune.csv"],
                   {"best_step": res.best_step, "best_valid_map": res.best_map})
    print(f"best validation MAP {res.best_map} at step {res.best_step}; wrote {out / 'model.ckpt'}")


def cmd_rerank(args, cfg: RunConfig) -> None:
    data = _data_dir(args)
    log = _load_log(data, cfg)
    model, _ = _load_model(args.model, log, cfg)
    lookup = log.lookup(model.cfg.max_sentence_len)
    records = build_records(log, model, lookup, (args.split,))[args.split]
    lists = rerank(model, records, lookup)
    out = _out_dir(args.out)
    write_run(out / "run.tsv", lists, tag=args.tag)
    write_run(out / "original.tsv", original_lists(records), tag="original", original=True)
    write_qrels(out / "qrels.tsv", lists)
    write_queries(out / "queries.tsv", lists, log.entropies)
    write_manifest(out, "rerank", cfg, {"data": data / MANIFEST, "model": Path(args.model)},
                   ["run.tsv", "original.tsv", "qrels.tsv", "queries.tsv"], {"split": args.split})
    print(f"re-ranked {len(lists)} {args.split} queries into {out / 'run.tsv'}")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    run = read_run(_require(args.run))
    original = read_run(_require(args.original))
    qrels = read_qrels(_require(args.qrels))
    queries = read_queries(_require(args.queries)) if args.queries else None
    lists = assemble_lists(run, original, qrels, queries)
    entropies = None
    if queries:
        entropies = {q: h for _, q, h in queries.values() if h is not None}
    report = metrics_report(lists, args.split, entropies, cfg.data.entropy_threshold)
    out = _out_dir(args.out)
    report.write_csv(out / "metrics.csv")
    (out / "metrics.txt").write_text(report.table() + "\n")
    inputs = {"run": Path(args.run), "original": Path(args.original), "qrels": Path(args.qrels)}
    if args.queries:
        inputs["queries"] = Path(args.queries)
    write_manifest(out, "evaluate", cfg, inputs, ["metrics.csv", "metrics.txt"])
    print(report.table())


def cmd_analyze(args, cfg: RunConfig) -> None:
    data = _data_dir(args)
    log = _load_log(data, cfg)
    model, _ = _load_model(args.model, log, cfg)
    models = {"trained": model}
    if args.baseline:
        models = {"initial": _load_model(args.baseline, log, cfg)[0], "trained": model}
    lookup = log.lookup(model.cfg.max_sentence_len)
    queries = sorted({ev.query for evs in log.splits["test"].values() for ev in evs})
    queries = sample_population(queries, args.queries if args.queries else None, cfg.seed)
    users = sample_population(sorted(log.events), args.users if args.users else None, cfg.seed)
    out = _out_dir(args.out)
    hists = {}
    edges = None
    with ad.no_grad():
        vec = model.encode_sentences([lookup.query(q) for q in queries])[0].data
        write_vectors(out / "query_vectors.csv", queries, vec.astype(np.float64))
        for name, m in models.items():
            bank = SentenceBank()
            items = []
            for u in users:
                evs = log.events[u]
                items.append(bank.add_view(history_views(evs, len(evs) - 1, m.cfg.max_long, m.cfg.max_short),
                                           lookup, lookup.query(evs[-1].query)))
            reps = m.encode_sequences(bank.encode(m), items).data
            hists[name], edges = cosine_histogram(reps)
    write_histogram(out / "user_cosine_hist.csv", hists, edges)
    inputs = {"data": data / MANIFEST, "model": Path(args.model)}
    if args.baseline:
        inputs["baseline"] = Path(args.baseline)
    write_manifest(out, "analyze", cfg, inputs, ["query_vectors.csv", "user_cosine_hist.csv"])
    print(f"wrote {out / 'query_vectors.csv'} and {out / 'user_cosine_hist.csv'}")


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--set", dest="overrides", action="append", metavar="SECTION.FIELD=VALUE",
                        help="override a config value (repeatable; wins over --config)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="pssl", description="Personalized search re-ranking with self-supervised pre-training.")
    p.add_argument("--version", action="version", version=f"pssl {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic log with planted intents")
    s.add_argument("--out", required=True)
    s.add_argument("--synth-set", action="append", metavar="FIELD=VALUE",
                   help="override a synthetic-generator field, e.g. n_users=60")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="validate, sessionize and split a log")
    s.add_argument("--events", required=True)
    s.add_argument("--docs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    data_help = f"ingested data directory (default: ${DATA_ENV})"
    s = sub.add_parser("mine-pairs", parents=[common], help="mine DP/QP/SAP/UP training pairs")
    s.add_argument("--data", help=data_help)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mine)

    s = sub.add_parser("pretrain", parents=[common], help="contrastive pre-training")
    s.add_argument("--data", help=data_help)
    s.add_argument("--pairs", required=True, help="mine-pairs output directory")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="pairwise ranking fine-tuning")
    s.add_argument("--data", help=data_help)
    s.add_argument("--init", help="pre-trained checkpoint (omit to start from scratch)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("rerank", parents=[common], help="re-rank a split and write run files")
    s.add_argument("--data", help=data_help)
    s.add_argument("--model", required=True)
    s.add_argument("--split", choices=("train", "valid", "test"), default="test")
    s.add_argument("--tag", default="pssl")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rerank)

    s = sub.add_parser("evaluate", parents=[common], help="compute MAP/MRR/P@1/P-improve")
    s.add_argument("--run", required=True)
    s.add_argument("--original", required=True, help="run file with the original ranking")
    s.add_argument("--qrels", required=True)
    s.add_argument("--queries", help="query table with click entropies (enables entropy buckets)")
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("analyze", parents=[common], help="query-vector dump and user-cosine histogram")
    s.add_argument("--data", help=data_help)
    s.add_argument("--model", required=True)
    s.add_argument("--baseline", help="second checkpoint (e.g. the initialized model) for comparison")
    s.add_argument("--queries", type=int, default=0, help="sample size of test queries (0 = all)")
    s.add_argument("--users", type=int, default=0, help="sample size of users (0 = all)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze)
    return p


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects SECTION.FIELD=VALUE, got {item!r}")
        out[key.strip()] = value
    if args.seed is not None:
        out["seed"] = str(args.seed)
    return out


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"pssl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            _require(args.config)
        # stage seeds always follow the run seed
        cfg = load_config(args.config, _overrides(args))
        cfg = cfg.seeded(cfg.seed)
        args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"pssl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, LogFormatError, DocumentConflictError, SplitError, checkpoint.CheckpointError,
            FileNotFoundError) as exc:
        print(f"pssl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"pssl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"pssl: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
