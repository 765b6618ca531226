"""Word-level vocabulary and sequence encoding."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, MASK, CLS, SEP, UNK = "[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"
SPECIALS = (PAD, MASK, CLS, SEP, UNK)
PAD_ID, MASK_ID, CLS_ID, SEP_ID, UNK_ID = range(5)
N_SPECIALS = len(SPECIALS)

# bracketed specials survive tokenization so decoded text can be re-encoded
_TOKEN_RE = re.compile(r"\[(?:pad|mask|cls|sep|unk)\]|[a-z0-9_']+|[^\sa-z0-9_']")


class VocabError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, punctuation marks become their own tokens."""
    return [t.upper() if t.startswith("[") and t.endswith("]") and len(t) > 2 else t
            for t in _TOKEN_RE.findall(text.lower())]


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if tuple(self.tokens[:N_SPECIALS]) != SPECIALS:
            raise VocabError("special tokens must occupy ids 0-4")
        if len(self.tokens) < N_SPECIALS + 1:
            raise VocabError("vocabulary needs at least one content token")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def specials(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(SPECIALS)}

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def to_json(self) -> str:
        return json.dumps({"tokens": list(self.tokens), "specials": self.specials}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        data = json.loads(text)
        vocab = cls(tuple(data["tokens"]))
        if "specials" in data and data["specials"] != vocab.specials:
            raise VocabError(f"unexpected special ids {data['specials']}")
        return vocab

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class TokenSeq:
    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        mask = np.asarray(self.mask, dtype=bool)
        if ids.shape != mask.shape or ids.ndim != 1:
            raise VocabError("ids and mask must be equal-length 1-D arrays")
        mask = mask & (ids != PAD_ID)
        ids.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "mask", mask)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def content_positions(self) -> np.ndarray:
        """Positions holding non-special tokens, in order."""
        return np.flatnonzero(self.ids >= N_SPECIALS)

    @property
    def unique_content_ids(self) -> tuple[int, ...]:
        """Distinct content ids in order of first appearance."""
        return tuple(dict.fromkeys(int(i) for i in self.ids if i >= N_SPECIALS))

    def replace(self, positions, token_id: int = MASK_ID, attend: bool = False) -> "TokenSeq":
        ids = self.ids.copy()
        mask = self.mask.copy()
        ids[positions] = token_id
        mask[positions] = attend
        return TokenSeq(ids, mask)


def build_vocab(corpus: Iterable[str], max_size: int = 2048, min_freq: int = 1) -> Vocabulary:
    """Specials, then content words by descending count (ties lexicographic).

    ``max_size`` caps the total vocabulary size, specials included.
    """
    counts: Counter[str] = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        counts.update(t for t in tokenize(text) if t not in SPECIALS)
    if n_docs == 0 or not counts:
        raise VocabError("empty corpus")
    if max_size < N_SPECIALS + 1:
        raise VocabError(f"max_size must be at least {N_SPECIALS + 1}")
    ranked = sorted((tok for tok, c in counts.items() if c >= min_freq),
                    key=lambda tok: (-counts[tok], tok))
    content = ranked[: max_size - N_SPECIALS]
    if not content:
        raise VocabError(f"no token reaches min_freq={min_freq}")
    return Vocabulary(SPECIALS + tuple(content))


def encode(vocab: Vocabulary, text: str, n_max: int) -> TokenSeq:
    if n_max < 3:
        raise VocabError("n_max must be at least 3")
    words = [t for t in tokenize(text) if t not in (PAD, CLS, SEP)]
    ids = [CLS_ID] + [vocab.id_of(w) for w in words[: n_max - 2]] + [SEP_ID]
    n_real = len(ids)
    ids += [PAD_ID] * (n_max - n_real)
    mask = [True] * n_real + [False] * (n_max - n_real)
    return TokenSeq(np.array(ids), np.array(mask))


def decode_ids(vocab: Vocabulary, ids) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise VocabError(f"id {i} outside vocabulary of size {len(vocab)}")
        out.append(vocab.tokens[i])
    return " ".join(out)
