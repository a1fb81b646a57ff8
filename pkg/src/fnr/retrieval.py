"""BM25 retrieval of similar unlabeled questions, per product category.

Stands in for a search-engine dependency: banks are built once, offline,
by scoring the labeled question's tokens against every unlabeled question
in the same category (k1=1.2, b=0.75, idf floored at 0) and keeping the
top matches.  Scoring is deterministic; ties break on the stable document
order of the pool.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .data import QaRecord
from .vocab import EOS_TOKEN


def _match_tokens(tokens: Iterable[str]) -> list[str]:
    """Case-folded tokens used for scoring; EOS separators do not match."""
    return [t.lower() for t in tokens if t != EOS_TOKEN]


@dataclass
class _CategoryIndex:
    docs: list[QaRecord]
    doc_terms: list[Counter]
    doc_lens: list[int]
    df: Counter
    avgdl: float


class Bm25Index:
    """Per-category inverted statistics over an unlabeled question pool."""

    def __init__(self, pool: Sequence[QaRecord], k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self._categories: dict[str, _CategoryIndex] = {}
        for rec in pool:
            if rec.labeled:
                continue
            cat = self._categories.setdefault(
                rec.category, _CategoryIndex([], [], [], Counter(), 0.0))
            terms = Counter(_match_tokens(rec.question_tokens))
            cat.docs.append(rec)
            cat.doc_terms.append(terms)
            cat.doc_lens.append(sum(terms.values()))
            for term in terms:
                cat.df[term] += 1
        for cat in self._categories.values():
            cat.avgdl = sum(cat.doc_lens) / len(cat.docs)

    def pool_size(self, category: str) -> int:
        cat = self._categories.get(category)
        return len(cat.docs) if cat else 0

    def score(self, query_tokens: Sequence[str], category: str) -> list[float]:
        """BM25 score of the query against every pool document of the
        category, in pool order."""
        cat = self._categories.get(category)
        if cat is None:
            return []
        query = _match_tokens(query_tokens)
        n_docs = len(cat.docs)
        scores = []
        for terms, dl in zip(cat.doc_terms, cat.doc_lens):
            norm = self.k1 * (1.0 - self.b + self.b * dl / cat.avgdl)
            s = 0.0
            for term in query:
                f = terms.get(term, 0)
                if f == 0:
                    continue
                idf = max(0.0, math.log((n_docs - cat.df[term] + 0.5) / (cat.df[term] + 0.5)))
                s += idf * f * (self.k1 + 1.0) / (f + norm)
            scores.append(s)
        return scores

    def query(self, query_tokens: Sequence[str], category: str, top_k: int) -> list[QaRecord]:
        """Top-k pool questions by score (ties by pool order), excluding any
        candidate whose token sequence equals the query's."""
        cat = self._categories.get(category)
        if cat is None:
            return []
        query_norm = _match_tokens(query_tokens)
        scores = self.score(query_tokens, category)
        ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        out = []
        for i in ranked:
            if _match_tokens(cat.docs[i].question_tokens) == query_norm:
                continue
            out.append(cat.docs[i])
            if len(out) == top_k:
                break
        return out


def build_bank(labeled: QaRecord, index: Bm25Index, u_max: int = 5) -> list[QaRecord]:
    """The up-to-``u_max`` most similar same-category unlabeled questions.
    A pool smaller than ``u_max`` yields all available candidates; an empty
    pool yields an empty bank."""
    return index.query(labeled.question_tokens, labeled.category, u_max)


def save_bank_cache(path, entries: Iterable[tuple[int, list[int]]]) -> None:
    """Bank cache JSON-Lines: {"query_line": int, "bank_lines": [int]},
    line numbers 1-based into the labeled and pool corpora."""
    with open(path, "w", encoding="utf-8") as fh:
        for query_line, bank_lines in entries:
            fh.write(json.dumps({"query_line": query_line,
                                 "bank_lines": list(bank_lines)}) + "\n")


def load_bank_cache(path) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                query_line = int(obj["query_line"])
                bank_lines = [int(v) for v in obj["bank_lines"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise ValueError(f"{path}:{line_no}: malformed bank cache entry") from err
            out[query_line] = bank_lines
    return out
