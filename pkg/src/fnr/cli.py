"""Command-line entry point for batch runs.

Subcommands: pretrain-embeddings, build-bank, train, evaluate, extract,
stats.  Settings merge a config file (JSON or key=value lines) with
command-line overrides, overrides winning; unknown keys are rejected.
All randomness flows from one seed (--seed, config, or the SAN_SEED
environment variable, in that order).

Exit codes: 0 success, 2 I/O error, 3 config/validation error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError
from .data import (CorpusError, QaRecord, corpus_stats, format_stats,
                   load_corpus, make_example, split)
from .embeddings import SgnsConfig, load_embeddings, save_embeddings, train_skipgram
from .model import (CheckpointError, SanConfig, extract_spans, forward,
                    load_model, predict_tags, save_model)
from .retrieval import Bm25Index, build_bank, load_bank_cache, save_bank_cache
from .training import DivergenceError, TrainConfig, evaluate, train
from .vocab import build_vocab, join_sentences, tokenize

log = logging.getLogger("fnr")

DEFAULT_SEED = 13


class ConfigError(ValueError):
    """Bad run configuration: unknown key, bad value, or missing setting."""


@dataclass
class RunConfig:
    """Merged settings from a config file plus command-line overrides."""
    # model
    variant: str = "san"
    embedding_dim: int = 100
    hidden_size: int = 100
    attention_dim: int = 100
    max_len: int = 40
    bank_size: int = 5
    dropout: float = 0.2
    share_bank_encoder: bool = False
    seed: int | None = None
    # training
    lr: float = 0.001
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    # paths
    corpus: str | None = None
    pool: str | None = None
    bank_cache: str | None = None
    embeddings: str | None = None
    checkpoint: str | None = None
    epoch_log: str | None = None
    report: str | None = None

    def resolved_seed(self) -> int:
        if self.seed is not None:
            return self.seed
        env = os.environ.get("SAN_SEED")
        if env is not None:
            try:
                return int(env)
            except ValueError as err:
                raise ConfigError(f"SAN_SEED must be an integer, got {env!r}") from err
        return DEFAULT_SEED

    def san_config(self) -> SanConfig:
        try:
            return SanConfig(embedding_dim=self.embedding_dim, hidden_size=self.hidden_size,
                             attention_dim=self.attention_dim, max_len=self.max_len,
                             bank_size=self.bank_size, dropout=self.dropout,
                             variant=_canonical_variant(self.variant),
                             share_bank_encoder=self.share_bank_encoder,
                             seed=self.resolved_seed())
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(lr=self.lr, batch_size=self.batch_size,
                               max_epochs=self.max_epochs, patience=self.patience,
                               dropout=self.dropout, seed=self.resolved_seed())
        except ValueError as err:
            raise ConfigError(str(err)) from err


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, value) -> object:
    kind = _FIELD_TYPES[key]
    if isinstance(value, str):
        text = value.strip()
        if kind.startswith("bool"):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {text!r}")
        try:
            if kind.startswith("int"):
                return int(text)
            if kind.startswith("float"):
                return float(text)
        except ValueError as err:
            raise ConfigError(f"{key}: cannot parse {text!r}") from err
        return text
    return value


def _apply(cfg: RunConfig, updates: dict) -> None:
    for key, value in updates.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, value))


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    """Config file values first, then overrides on top."""
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        stripped = text.lstrip()
        if stripped.startswith("{"):
            try:
                values = json.loads(text)
            except json.JSONDecodeError as err:
                raise ConfigError(f"{path}: invalid JSON config ({err.msg})") from err
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: config must be a JSON object")
            _apply(cfg, values)
        else:
            values = {}
            for line_no, line in enumerate(text.splitlines(), start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{line_no}: expected key=value")
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
            _apply(cfg, values)
    _apply(cfg, overrides)
    return cfg


def _canonical_variant(name: str) -> str:
    norm = name.strip().lower().replace("_", "-")
    aliases = {"san": "san", "sblstm": "sblstm", "s-blstm": "sblstm",
               "san-noblstm2": "san-noblstm2", "san-minus-blstm2": "san-noblstm2"}
    if norm not in aliases:
        raise ConfigError(f"unknown variant {name!r}; use SAN, sblstm or san-noblstm2")
    return aliases[norm]


def _question_sequences(records) -> list[list[str]]:
    return [rec.question_tokens for rec in records]


def cmd_pretrain_embeddings(args) -> int:
    records = load_corpus(args.corpus)
    if not records:
        raise ConfigError(f"{args.corpus}: corpus is empty")
    cfg = SgnsConfig(dim=args.dim, window=args.window, negatives=args.negatives,
                     epochs=args.epochs, lr=args.lr, min_freq=args.min_freq)
    seed = args.seed if args.seed is not None else _env_seed()
    matrix = train_skipgram(_question_sequences(records), cfg,
                            np.random.default_rng(seed))
    save_embeddings(matrix, args.out)
    final = matrix.loss_history[-1] if matrix.loss_history else float("nan")
    print(f"vocabulary size: {len(matrix.vocab)}")
    print(f"final mean objective: {final:.6f}")
    return 0


def cmd_build_bank(args) -> int:
    labeled = [r for r in load_corpus(args.labeled) if r.labeled]
    if not labeled:
        raise ConfigError(f"{args.labeled}: no labeled records")
    pool = load_corpus(args.pool)
    index = Bm25Index(pool)
    entries = []
    sizes = []
    for rec in labeled:
        bank = build_bank(rec, index, u_max=args.top_k)
        entries.append((rec.line_no, [b.line_no for b in bank]))
        sizes.append(len(bank))
    save_bank_cache(args.out, entries)
    mean_size = sum(sizes) / len(sizes)
    if mean_size == 0:
        log.warning("question pool produced only empty banks")
    print(f"banks written: {len(entries)}")
    print(f"mean bank size: {mean_size:.2f}")
    return 0


def _resolve_banks(labeled, cfg: RunConfig, san_cfg: SanConfig) -> dict[int, list[QaRecord]]:
    """Bank records per labeled-record line number, from the cache when
    present, via BM25 over the pool otherwise, empty as a last resort."""
    banks: dict[int, list[QaRecord]] = {rec.line_no: [] for rec in labeled}
    if not san_cfg.has_bank or san_cfg.bank_size == 0:
        return banks
    pool = load_corpus(cfg.pool) if cfg.pool else []
    if cfg.bank_cache:
        pool_by_line = {rec.line_no: rec for rec in pool}
        cache = load_bank_cache(cfg.bank_cache)
        for rec in labeled:
            lines = cache.get(rec.line_no, [])
            try:
                banks[rec.line_no] = [pool_by_line[i] for i in lines][: san_cfg.bank_size]
            except KeyError as err:
                raise ConfigError(
                    f"bank cache references pool line {err.args[0]} not present in {cfg.pool}") from err
    elif pool:
        index = Bm25Index(pool)
        for rec in labeled:
            banks[rec.line_no] = build_bank(rec, index, u_max=san_cfg.bank_size)
    else:
        log.warning("no pool or bank cache configured; training with empty banks")
    return banks


def cmd_train(args) -> int:
    overrides = dict(args.set or [])
    for key in ("variant", "embeddings", "corpus", "pool", "bank_cache",
                "epoch_log", "seed"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.out is not None:
        overrides["checkpoint"] = args.out
    cfg = load_run_config(args.config, overrides)
    if cfg.corpus is None:
        raise ConfigError("no corpus configured (corpus=PATH or --corpus)")
    if cfg.checkpoint is None:
        raise ConfigError("no checkpoint output configured (checkpoint=PATH or --out)")
    san_cfg = cfg.san_config()
    tcfg = cfg.train_config()

    records = load_corpus(cfg.corpus)
    labeled = [r for r in records if r.labeled]
    if not labeled:
        raise ConfigError(f"{cfg.corpus}: no labeled records to train on")
    if len(labeled) < len(records):
        log.info("ignoring %d unlabeled records in %s", len(records) - len(labeled), cfg.corpus)

    banks = _resolve_banks(labeled, cfg, san_cfg)
    if cfg.embeddings:
        pretrained = load_embeddings(cfg.embeddings)
        vocab = pretrained.vocab
        if pretrained.dim != san_cfg.embedding_dim:
            log.info("embedding file is %d-dimensional; overriding embedding_dim %d",
                     pretrained.dim, san_cfg.embedding_dim)
            san_cfg = dataclasses.replace(san_cfg, embedding_dim=pretrained.dim)
    else:
        log.warning("no pretrained embeddings configured; using random initialization")
        pretrained = None
        seqs = _question_sequences(labeled)
        for bank in banks.values():
            seqs.extend(_question_sequences(bank))
        vocab = build_vocab(seqs)

    examples = [make_example(rec, banks[rec.line_no], vocab,
                             max_len=san_cfg.max_len, bank_size=san_cfg.bank_size)
                for rec in labeled]
    data_split = split(examples, seed=tcfg.seed)
    log.info("split sizes: train=%d validation=%d test=%d",
             len(data_split.train), len(data_split.validation), len(data_split.test))

    log_fh = open(cfg.epoch_log, "w", encoding="utf-8") if cfg.epoch_log else None
    try:
        def sink(entry):
            line = entry.to_json()
            print(line)
            if log_fh is not None:
                log_fh.write(line + "\n")
            log.info("epoch %d: loss=%.4f val_span_f1=%.4f (%.2fs)",
                     entry.epoch, entry.train_loss, entry.val_metrics.span_f1,
                     entry.wall_time)

        params, logs = train(san_cfg, tcfg, data_split, vocab, pretrained,
                             epoch_sink=sink)
    finally:
        if log_fh is not None:
            log_fh.close()
    save_model(cfg.checkpoint, params, san_cfg, vocab)
    best = max((entry.val_metrics.span_f1 for entry in logs), default=0.0)
    log.info("checkpoint written to %s (best validation span-F1 %.4f)",
             cfg.checkpoint, best)
    if data_split.test:
        final = evaluate(params, san_cfg, data_split.test)
        print(json.dumps({"test": final.to_dict()}, sort_keys=True))
    return 0


def _examples_for_model(records, vocab, san_cfg: SanConfig, pool_path, cache_path):
    cfg = RunConfig(pool=pool_path, bank_cache=cache_path)
    banks = _resolve_banks(records, cfg, san_cfg)
    return [make_example(rec, banks[rec.line_no], vocab,
                         max_len=san_cfg.max_len, bank_size=san_cfg.bank_size)
            for rec in records]


def cmd_evaluate(args) -> int:
    records = [r for r in load_corpus(args.data) if r.labeled]
    if not records:
        raise ConfigError(f"{args.data}: no labeled records to evaluate")
    rows = []
    for path in args.model:
        params, san_cfg, vocab = load_model(path)
        examples = _examples_for_model(records, vocab, san_cfg, args.pool, args.bank_cache)
        metrics = evaluate(params, san_cfg, examples)
        rows.append({"path": path, "variant": san_cfg.variant,
                     "metrics": metrics.to_dict()})
    report = {"data": args.data, "models": rows}
    width = max(len(r["variant"]) for r in rows) + 2
    print(f"{'Method':<{width}}  {'P':>6}  {'R':>6}  {'F1':>6}")
    for row in rows:
        span = row["metrics"]["span"]
        print(f"{row['variant']:<{width}}  {span['precision']:>6.3f}  "
              f"{span['recall']:>6.3f}  {span['f1']:>6.3f}")
    if len(rows) == 1:
        token = rows[0]["metrics"]["token"]
        print(f"token-level: P={token['precision']:.3f} R={token['recall']:.3f} "
              f"F1={token['f1']:.3f}")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return 0


def cmd_extract(args) -> int:
    params, san_cfg, vocab = load_model(args.model)
    sentences = tokenize(args.question)
    if not sentences:
        raise ConfigError("question is empty after tokenization")
    tokens = join_sentences(sentences)

    bank_records: list[QaRecord] = []
    category = args.category or "query"
    if args.bank:
        pool = load_corpus(args.bank)
        categories = sorted({r.category for r in pool if not r.labeled})
        if args.category is None:
            if len(categories) != 1:
                raise ConfigError(
                    f"pool spans categories {categories}; pick one with --category")
            category = categories[0]
        index = Bm25Index(pool)
        query = QaRecord(product_id="query", category=category, question_tokens=tokens)
        bank_records = build_bank(query, index, u_max=san_cfg.bank_size)

    record = QaRecord(product_id="query", category=category, question_tokens=tokens)
    example = make_example(record, bank_records, vocab,
                           max_len=san_cfg.max_len, bank_size=san_cfg.bank_size)
    probs, trace = forward(example, params, san_cfg, mode="eval",
                           want_trace=args.trace is not None)
    tags = predict_tags(probs, example.mask)
    for span in extract_spans(tags, example.tokens):
        print(span.text)
    if args.trace:
        payload = {"question_tokens": example.tokens,
                   "tags": tags,
                   "bank_questions": [b.question_tokens for b in bank_records]}
        if trace is not None:
            payload.update(trace.to_dict())
        with open(args.trace, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return 0


def cmd_stats(args) -> int:
    records = load_corpus(args.corpus)
    stats = corpus_stats(records)
    print(format_stats(stats))
    return 0


def _env_seed() -> int:
    return RunConfig().resolved_seed()


def _parse_set(value: str) -> tuple[str, str]:
    if "=" not in value:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {value!r}")
    key, _, val = value.partition("=")
    return key.strip(), val.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fnr",
        description="Recognize function-need spans in product questions.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-embeddings",
                       help="train skip-gram embeddings on a raw question corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=100)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--negatives", type=int, default=5)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.025)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain_embeddings)

    p = sub.add_parser("build-bank",
                       help="retrieve similar unlabeled questions for each labeled one")
    p.add_argument("--labeled", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("train", help="train a tagger variant")
    p.add_argument("--config", default=None)
    p.add_argument("--variant", default=None)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--pool", default=None)
    p.add_argument("--bank-cache", dest="bank_cache", default=None)
    p.add_argument("--epoch-log", dest="epoch_log", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", type=_parse_set, metavar="KEY=VALUE",
                   help="override any config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score checkpoints on a labeled corpus")
    p.add_argument("--model", action="append", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--pool", default=None)
    p.add_argument("--bank-cache", dest="bank_cache", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extract", help="extract function spans from one question")
    p.add_argument("--model", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--bank", default=None,
                   help="unlabeled pool to retrieve the question bank from")
    p.add_argument("--category", default=None)
    p.add_argument("--trace", default=None,
                   help="write the attention trace JSON here")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("stats", help="per-product corpus statistics")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DivergenceError, NonFiniteError) as err:
        log.error("numeric failure: %s", err)
        return 4
    except (ConfigError, CorpusError, CheckpointError) as err:
        log.error("%s", err)
        return 3
    except OSError as err:
        log.error("%s", err)
        return 2
    except ValueError as err:
        log.error("%s", err)
        return 3


if __name__ == "__main__":
    sys.exit(main())
