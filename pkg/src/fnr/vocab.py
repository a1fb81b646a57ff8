"""Token vocabulary with reserved ids and the shared tokenizer.

Reserved ids are fixed: PAD=0 (all-zero, never updated embedding), EOS=1
(sentence separator inside concatenated questions), UNK=2 (fallback for
unseen or below-cutoff tokens).  Tokens are lowercased by default; the
literal separator token "EOS" keeps its case so it can never collide with
an ordinary word "eos".
"""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable, Sequence

PAD_TOKEN = "<PAD>"
EOS_TOKEN = "EOS"
UNK_TOKEN = "<UNK>"
PAD_ID = 0
EOS_ID = 1
UNK_ID = 2
RESERVED = (PAD_TOKEN, EOS_TOKEN, UNK_TOKEN)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_SENT_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")


class Vocabulary:
    """Dense token -> id map with reserved PAD/EOS/UNK slots."""

    def __init__(self, tokens: Sequence[str], lowercase: bool = True,
                 min_freq: int = 1):
        """``tokens`` is the full id-ordered token list including the three
        reserved entries at positions 0..2."""
        if tuple(tokens[:3]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        self.lowercase = lowercase
        self.min_freq = min_freq
        self.id_to_token: list[str] = list(tokens)
        self.token_to_id: dict[str, int] = {}
        for i, tok in enumerate(self.id_to_token):
            if tok in self.token_to_id:
                raise ValueError(f"duplicate token {tok!r} in vocabulary")
            self.token_to_id[tok] = i

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return self.normalize(token) in self.token_to_id

    def normalize(self, token: str) -> str:
        if token == EOS_TOKEN:
            return token
        return token.lower() if self.lowercase else token

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(self.normalize(token), UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.lookup(t) for t in tokens]


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int = 1,
                lowercase: bool = True) -> Vocabulary:
    """Deterministic vocabulary over a token-sequence corpus.

    Ids beyond the reserved three are assigned frequency-descending with
    lexicographic tie-breaking, so two corpora with the same token multiset
    produce the identical vocabulary.  Tokens below ``min_freq`` are left
    out and resolve to UNK.
    """
    counts: Counter[str] = Counter()
    saw_any = False
    for seq in corpus:
        saw_any = True
        for tok in seq:
            if tok == EOS_TOKEN:
                continue
            norm = tok.lower() if lowercase else tok
            if norm in RESERVED:
                continue
            counts[norm] += 1
    if not saw_any:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept, lowercase=lowercase, min_freq=min_freq)


def tokenize(text: str) -> list[list[str]]:
    """Split raw text into sentences of tokens.

    Whitespace/punctuation tokenization with sentence boundaries at
    terminal .!? runs; case is preserved for surface output and folded
    only at vocabulary lookup.
    """
    sentences = []
    for chunk in _SENT_SPLIT_RE.split(text.strip()):
        toks = _TOKEN_RE.findall(chunk)
        if toks:
            sentences.append(toks)
    return sentences


def join_sentences(sentences: Sequence[Sequence[str]]) -> list[str]:
    """Concatenate sentences into one token sequence with EOS separators."""
    out: list[str] = []
    for i, sent in enumerate(sentences):
        if i > 0:
            out.append(EOS_TOKEN)
        out.extend(sent)
    return out
