"""Corpus I/O, preprocessing to fixed-length id sequences, example
assembly, dataset splitting, and per-product statistics.

The corpus is JSON-Lines, one QA record per line:

    {"product_id": "p1", "category": "laptop",
     "question_tokens": ["Works", "with", "iphone", "?"],
     "answer_text": "yes it does",            # optional, never consumed
     "tags": ["F", "F", "F", "O"]}            # optional; absent = unlabeled

Questions are padded/truncated to a fixed length (40 by default) with
suffix-only padding; multi-sentence questions carry an EOS token between
sentences, and EOS is always tagged O.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .vocab import EOS_TOKEN, PAD_ID, Vocabulary, join_sentences

log = logging.getLogger(__name__)

LABELS = ("F", "O")
F_TAG, O_TAG = LABELS
F_INDEX, O_INDEX = 0, 1


class CorpusError(ValueError):
    """Malformed corpus content; messages carry the offending line number."""


@dataclass
class QaRecord:
    """One QA pair.  ``tags`` aligned to ``question_tokens`` marks a labeled
    record; ``answer_text`` is stored but never consumed by the model."""
    product_id: str
    category: str
    question_tokens: list[str]
    answer_text: str | None = None
    tags: list[str] | None = None
    line_no: int | None = None

    @property
    def labeled(self) -> bool:
        return self.tags is not None

    def to_dict(self) -> dict:
        out = {"product_id": self.product_id, "category": self.category,
               "question_tokens": self.question_tokens}
        if self.answer_text is not None:
            out["answer_text"] = self.answer_text
        if self.tags is not None:
            out["tags"] = self.tags
        return out


def _parse_record(obj: dict, line_no: int) -> QaRecord:
    where = f"line {line_no}"
    if not isinstance(obj, dict):
        raise CorpusError(f"{where}: record must be a JSON object")
    for key in ("product_id", "category"):
        if not isinstance(obj.get(key), str):
            raise CorpusError(f"{where}: missing or non-string {key!r}")
    tokens = obj.get("question_tokens")
    if (not isinstance(tokens, list) or not tokens
            or not all(isinstance(t, str) for t in tokens)):
        raise CorpusError(f"{where}: question_tokens must be a non-empty list of strings")
    answer = obj.get("answer_text")
    if answer is not None and not isinstance(answer, str):
        raise CorpusError(f"{where}: answer_text must be a string")
    tags = obj.get("tags")
    if tags is not None:
        if not isinstance(tags, list) or len(tags) != len(tokens):
            raise CorpusError(
                f"{where}: tags length {len(tags) if isinstance(tags, list) else '?'} "
                f"does not match {len(tokens)} question tokens")
        bad = [t for t in tags if t not in LABELS]
        if bad:
            raise CorpusError(f"{where}: unknown tag symbol {bad[0]!r}")
        tags = list(tags)
    return QaRecord(product_id=obj["product_id"], category=obj["category"],
                    question_tokens=list(tokens), answer_text=answer,
                    tags=tags, line_no=line_no)


def load_corpus(path) -> list[QaRecord]:
    """Read and validate a JSON-Lines corpus; every error names its line."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise CorpusError(f"line {line_no}: invalid JSON ({err.msg})") from err
            records.append(_parse_record(obj, line_no))
    return records


def save_corpus(path, records: Iterable[QaRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


@dataclass
class Preprocessed:
    ids: np.ndarray           # (T,) int64
    mask: np.ndarray          # (T,) float, 1.0 at real tokens (prefix)
    tag_ids: np.ndarray | None  # (T,) int64, O at padding; None if unlabeled


def preprocess(record, vocab: Vocabulary, max_len: int = 40) -> Preprocessed:
    """Pad/truncate a record (or raw token input) to ``max_len`` ids.

    Accepts a QaRecord, a flat token list, or a list of sentences (joined
    with EOS).  EOS tokens are forced to tag O.  Already length-T input
    passes through unchanged, so the operation is idempotent.
    """
    tags = None
    if isinstance(record, QaRecord):
        tokens = record.question_tokens
        tags = record.tags
    else:
        tokens = record
    if tokens and isinstance(tokens[0], (list, tuple)):
        tokens = join_sentences(tokens)
    if not tokens:
        raise CorpusError("cannot preprocess an empty token list")

    tokens = list(tokens)[:max_len]
    n = len(tokens)
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[:n] = vocab.encode(tokens)
    mask = np.zeros(max_len)
    mask[:n] = 1.0
    tag_ids = None
    if tags is not None:
        tag_ids = np.full(max_len, O_INDEX, dtype=np.int64)
        for t in range(n):
            if tokens[t] == EOS_TOKEN:
                tag_ids[t] = O_INDEX
            else:
                tag_ids[t] = LABELS.index(tags[t])
    return Preprocessed(ids=ids, mask=mask, tag_ids=tag_ids)


@dataclass
class Example:
    """A labeled question paired with its (possibly empty) question bank,
    already padded to the model's fixed shapes."""
    record: QaRecord
    bank: list[QaRecord]
    ids: np.ndarray            # (T,)
    mask: np.ndarray           # (T,)
    tag_ids: np.ndarray | None  # (T,)
    bank_ids: np.ndarray       # (U, T)
    bank_mask: np.ndarray      # (U, T)
    bank_valid: np.ndarray     # (U,)

    @property
    def length(self) -> int:
        return int(self.mask.sum())

    @property
    def tokens(self) -> list[str]:
        return self.record.question_tokens[: self.length]

    def gold_tags(self) -> list[str]:
        if self.tag_ids is None:
            raise ValueError("example is unlabeled")
        return [LABELS[i] for i in self.tag_ids[: self.length]]


def make_example(record: QaRecord, bank_records: Sequence[QaRecord],
                 vocab: Vocabulary, max_len: int = 40, bank_size: int = 5) -> Example:
    """Assemble one example; the bank is capped at ``bank_size`` and must be
    same-category unlabeled questions other than the record itself."""
    bank_records = list(bank_records)[:bank_size]
    for b in bank_records:
        if b is record:
            raise ValueError("bank must not contain the labeled question itself")
        if b.category != record.category:
            raise ValueError(
                f"bank question category {b.category!r} != {record.category!r}")
    prep = preprocess(record, vocab, max_len)
    bank_ids = np.full((bank_size, max_len), PAD_ID, dtype=np.int64)
    bank_mask = np.zeros((bank_size, max_len))
    for n, b in enumerate(bank_records):
        bp = preprocess(b, vocab, max_len)
        bank_ids[n] = bp.ids
        bank_mask[n] = bp.mask
    bank_valid = bank_mask.any(axis=1).astype(float)
    return Example(record=record, bank=bank_records, ids=prep.ids, mask=prep.mask,
                   tag_ids=prep.tag_ids, bank_ids=bank_ids, bank_mask=bank_mask,
                   bank_valid=bank_valid)


@dataclass
class Batch:
    ids: np.ndarray          # (B, T)
    mask: np.ndarray         # (B, T)
    gold: np.ndarray | None  # (B, T, |L|) one-hot at valid rows, zero at padding
    bank_ids: np.ndarray     # (B, U, T)
    bank_mask: np.ndarray    # (B, U, T)
    bank_valid: np.ndarray   # (B, U)
    examples: list[Example]

    def __len__(self) -> int:
        return len(self.examples)


def collate(examples: Sequence[Example]) -> Batch:
    ids = np.stack([e.ids for e in examples])
    mask = np.stack([e.mask for e in examples])
    gold = None
    if all(e.tag_ids is not None for e in examples):
        b, t = ids.shape
        gold = np.zeros((b, t, len(LABELS)))
        for i, e in enumerate(examples):
            valid = int(e.mask.sum())
            gold[i, np.arange(valid), e.tag_ids[:valid]] = 1.0
    return Batch(ids=ids, mask=mask, gold=gold,
                 bank_ids=np.stack([e.bank_ids for e in examples]),
                 bank_mask=np.stack([e.bank_mask for e in examples]),
                 bank_valid=np.stack([e.bank_valid for e in examples]),
                 examples=list(examples))


@dataclass
class CorpusSplit:
    train: list
    validation: list
    test: list
    seed: int


def split(examples: Sequence, seed: int) -> CorpusSplit:
    """Seeded uniform shuffle, then a contiguous 70/10/20 cut.

    Cut indices are ceil(0.7 n) and ceil(0.8 n), which keeps each part
    within one element of its exact share (9 examples -> 7/1/1).
    """
    n = len(examples)
    if n < 10:
        log.warning("splitting only %d examples; proportions are rounded", n)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    shuffled = [examples[i] for i in order]
    c1 = math.ceil(0.7 * n)
    c2 = math.ceil(0.8 * n)
    return CorpusSplit(train=shuffled[:c1], validation=shuffled[c1:c2],
                       test=shuffled[c2:], seed=seed)


@dataclass
class ProductRow:
    product: str
    qa_count: int
    with_function_pct: float


@dataclass
class CorpusStats:
    rows: list[ProductRow]
    total_qa: int
    total_pct: float


def corpus_stats(records: Iterable[QaRecord]) -> CorpusStats:
    """Per-product QA counts and the share of QAs containing at least one
    F tag, plus the totals row.  Products appear in first-seen order."""
    order: list[str] = []
    counts: dict[str, list[int]] = {}
    for rec in records:
        if not rec.labeled:
            continue
        if rec.product_id not in counts:
            order.append(rec.product_id)
            counts[rec.product_id] = [0, 0]
        counts[rec.product_id][0] += 1
        if F_TAG in rec.tags:
            counts[rec.product_id][1] += 1
    if not order:
        raise CorpusError("no labeled records to summarize")
    rows = [ProductRow(p, counts[p][0], 100.0 * counts[p][1] / counts[p][0])
            for p in order]
    total = sum(r.qa_count for r in rows)
    with_f = sum(counts[p][1] for p in order)
    return CorpusStats(rows=rows, total_qa=total, total_pct=100.0 * with_f / total)


def format_stats(stats: CorpusStats) -> str:
    width = max([len("Product")] + [len(r.product) for r in stats.rows])
    lines = [f"{'Product':<{width}}  {'QA':>6}  % of QAs with Functions"]
    for r in stats.rows:
        lines.append(f"{r.product:<{width}}  {r.qa_count:>6}  {r.with_function_pct:.2f}")
    lines.append(f"{'Total':<{width}}  {stats.total_qa:>6}  {stats.total_pct:.2f}")
    return "\n".join(lines)
