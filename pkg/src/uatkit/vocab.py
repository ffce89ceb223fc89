"""Word-level vocabulary with the special tokens the pipeline needs.

Tokens are lowercased, split on whitespace, and punctuation becomes
standalone tokens. The literal strings "[mask]", "[pad]", "[unk]" and
"[cls]" encode to their reserved ids 0..3.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

MASK, PAD, UNK, CLS = "[mask]", "[pad]", "[unk]", "[cls]"
SPECIALS = (MASK, PAD, UNK, CLS)

# small closed-class list used by content-word-only masking
FUNCTION_WORDS = frozenset(
    "the a an was is were are it and of to in on at this that with for".split()
)

_TOKEN_RE = re.compile(r"\[mask\]|\[pad\]|\[unk\]|\[cls\]|[a-z0-9']+|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split into words and standalone punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    """Canonical single-space join of the token stream."""
    return " ".join(tokenize(text))


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token<->id maps; specials occupy ids 0..3.

    Intended operating range is 16..65536 entries; ``build_vocab`` only
    enforces the upper bound so that tiny fixture vocabularies stay legal.
    """

    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(repr=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != SPECIALS:
            raise ValueError(f"specials must occupy ids 0..3, got {self.id_to_token[:4]}")
        if len(self.id_to_token) > 65536:
            raise ValueError(f"vocabulary too large: {len(self.id_to_token)}")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def mask_id(self) -> int:
        return 0

    @property
    def pad_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    @property
    def cls_id(self) -> int:
        return 3

    @property
    def special_ids(self) -> tuple[int, int, int, int]:
        return (0, 1, 2, 3)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def encode(self, text: str) -> list[int]:
        return [self.id_of(t) for t in tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        n = len(self.id_to_token)
        for i in ids:
            if not 0 <= i < n:
                raise ValueError(f"token id {i} out of range for vocabulary of size {n}")
        return " ".join(self.id_to_token[i] for i in ids)

    def tokens(self, ids: Sequence[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def content_ids(self) -> list[int]:
        """All non-special ids (the candidate pool for triggers)."""
        return list(range(4, len(self.id_to_token)))

    def to_lines(self) -> list[str]:
        return list(self.id_to_token)

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "Vocabulary":
        toks = tuple(t.rstrip("\n") for t in lines)
        return cls(id_to_token=toks, token_to_id={t: i for i, t in enumerate(toks)})

    def save_text(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load_text(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh)


def build_vocab(corpus_lines: Iterable[str], max_size: int = 4096, min_freq: int = 1) -> Vocabulary:
    """Frequency-ranked vocabulary over the corpus, lexicographic tie-break.

    ``max_size`` counts the 4 specials. Tokens below ``min_freq`` are left
    out and will encode to [unk].
    """
    counts: Counter[str] = Counter()
    n_lines = 0
    for line in corpus_lines:
        n_lines += 1
        for tok in tokenize(line):
            if tok not in SPECIALS:
                counts[tok] += 1
    if n_lines == 0:
        raise ValueError("build_vocab: empty corpus")
    if max_size < 4:
        raise ValueError(f"build_vocab: max_size must be >= 4, got {max_size}")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, c in ranked if c >= min_freq][: max_size - 4]
    id_to_token = SPECIALS + tuple(kept)
    return Vocabulary(id_to_token=id_to_token,
                      token_to_id={t: i for i, t in enumerate(id_to_token)})
