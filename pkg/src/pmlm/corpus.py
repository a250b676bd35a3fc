"""Text ingestion, vocabulary, and two-segment packing.

Packed layout is ``[SOS] S1 [EOS] S2 [EOS]``; ``[SOS]`` and the first
``[EOS]`` belong to segment 0, the rest to segment 1.
"""

from __future__ import annotations

import os
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, UNK, SOS, EOS, MASK, PSEUDO = "[PAD]", "[UNK]", "[SOS]", "[EOS]", "[MASK]", "[P]"
SPECIAL_TOKENS = (PAD, UNK, SOS, EOS, MASK, PSEUDO)

_SENTENCE_END = re.compile(r"[.!?]$")


class CorpusError(ValueError):
    pass


def tokenize_text(text: str, mode: str = "word", lowercase: bool = True) -> list[str]:
    if lowercase:
        text = text.lower()
    if mode == "word":
        return text.split()
    if mode == "char":
        return list(text)
    raise ValueError(f"unknown tokenizer mode {mode!r}")


@dataclass(frozen=True)
class Vocab:
    """Immutable token <-> id table. Specials always occupy ids 0..5."""

    id_to_token: tuple[str, ...]
    mode: str = "word"
    lowercase: bool = True
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.id_to_token[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the special tokens in fixed order")
        table = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(table) != len(self.id_to_token):
            raise ValueError("duplicate token in vocab")
        object.__setattr__(self, "token_to_id", table)

    def __len__(self) -> int:
        return len(self.id_to_token)

    pad = property(lambda self: 0)
    unk = property(lambda self: 1)
    sos = property(lambda self: 2)
    eos = property(lambda self: 3)
    mask = property(lambda self: 4)
    pseudo = property(lambda self: 5)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(len(SPECIAL_TOKENS)))

    @property
    def first_regular_id(self) -> int:
        return len(SPECIAL_TOKENS)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk)

    def encode(self, text: str) -> list[int]:
        return [self.lookup(t) for t in tokenize_text(text, self.mode, self.lowercase)]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        toks = [
            self.id_to_token[i]
            for i in ids
            if not (skip_special and i in self.special_ids)
        ]
        return " ".join(toks) if self.mode == "word" else "".join(toks)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.id_to_token:
                f.write((r"\n" if tok == "\n" else tok) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike, mode: str = "word", lowercase: bool = True) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            # only strip the line terminator: char vocabs contain whitespace tokens
            tokens = [line[:-1] if line.endswith("\n") else line for line in f]
        # the newline character is stored escaped
        tokens = ["\n" if t == r"\n" else t for t in tokens]
        return cls(tuple(tokens), mode=mode, lowercase=lowercase)


def build_vocab(
    corpus: str | Iterable[str],
    max_size: int = 30000,
    mode: str = "word",
    lowercase: bool = True,
) -> Vocab:
    """Count units in ``corpus`` and keep the ``max_size - 6`` most frequent.

    Ties are broken lexicographically so the result depends only on the input.
    """
    if max_size < len(SPECIAL_TOKENS):
        raise ValueError(f"max_size must be >= {len(SPECIAL_TOKENS)}")
    if isinstance(corpus, str):
        corpus = [corpus]
    counts: Counter[str] = Counter()
    for chunk in corpus:
        counts.update(tokenize_text(chunk, mode, lowercase))
    for tok in SPECIAL_TOKENS:
        counts.pop(tok, None)
    if not counts:
        raise CorpusError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: max_size - len(SPECIAL_TOKENS)]]
    return Vocab(SPECIAL_TOKENS + tuple(keep), mode=mode, lowercase=lowercase)


@dataclass(frozen=True)
class PackedInput:
    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.token_ids)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.token_ids, dtype=np.int64), np.asarray(self.segment_ids, dtype=np.int64)

    def segments(self, vocab: Vocab) -> tuple[list[int], list[int]]:
        """Split back into (S1, S2); raises if the layout is broken."""
        ids = list(self.token_ids)
        if len(ids) < 3 or ids[0] != vocab.sos or ids[-1] != vocab.eos:
            raise CorpusError("not a packed input")
        first = ids.index(vocab.eos)
        s1, s2 = ids[1:first], ids[first + 1 : -1]
        if any(i in vocab.special_ids for i in s1 + s2):
            raise CorpusError("special token inside segment")
        return s1, s2


def pack_pair(s1: Sequence[int], s2: Sequence[int], max_len: int, vocab: Vocab | None = None) -> PackedInput:
    special = vocab.special_ids if vocab is not None else frozenset(range(len(SPECIAL_TOKENS)))
    sos = vocab.sos if vocab is not None else 2
    eos = vocab.eos if vocab is not None else 3
    if len(s1) + len(s2) + 3 > max_len:
        raise CorpusError(f"sequence too long: {len(s1)} + {len(s2)} + 3 > {max_len}")
    for name, seg in (("s1", s1), ("s2", s2)):
        bad = [t for t in seg if t in special]
        if bad:
            raise CorpusError(f"special token {bad[0]} inside segment {name}")
    tokens = (sos, *s1, eos, *s2, eos)
    segments = (0,) * (len(s1) + 2) + (1,) * (len(s2) + 1)
    return PackedInput(tuple(int(t) for t in tokens), segments)


def split_sentences(tokens: Sequence[str]) -> list[list[str]]:
    """Split a token list after sentence-final punctuation."""
    out: list[list[str]] = []
    cur: list[str] = []
    for tok in tokens:
        cur.append(tok)
        if _SENTENCE_END.search(tok):
            out.append(cur)
            cur = []
    if cur:
        out.append(cur)
    return out


def _read_lines(path: str | os.PathLike) -> Iterator[str]:
    offset = 0
    with open(path, "rb") as f:
        for raw in f:
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise CorpusError(f"{os.fspath(path)}: malformed UTF-8 at byte offset {offset + e.start}") from e
            offset += len(raw)
            yield line


def stream_documents(path: str | os.PathLike, vocab: Vocab) -> Iterator[list[list[int]]]:
    """Yield documents as lists of sentences of token ids, in file order.

    Documents are separated by blank lines; every non-blank line ends a
    sentence, as does sentence-final punctuation inside a line (word mode).
    """
    sentences: list[list[int]] = []
    for line in _read_lines(path):
        if not line.strip():
            if sentences:
                yield sentences
                sentences = []
            continue
        if vocab.mode == "char":
            ids = vocab.encode(line.rstrip("\n"))
            if ids:
                sentences.append(ids)
            continue
        toks = tokenize_text(line, vocab.mode, vocab.lowercase)
        for sent in split_sentences(toks):
            sentences.append([vocab.lookup(t) for t in sent])
    if sentences:
        yield sentences


def pair_segments(document: Sequence[Sequence[int]], max_len: int) -> list[tuple[list[int], list[int]]]:
    """Pair consecutive sentences as (S1, S2): (1, 2), (3, 4), ...

    A trailing odd sentence becomes (S1, []). Segments are truncated from the
    right so every pair fits ``max_len`` once packed; S1 gets priority.
    """
    budget = max_len - 3
    if budget < 1:
        raise ValueError("max_len too small to hold any text")
    pairs = []
    for i in range(0, len(document), 2):
        s1 = list(document[i])[:budget]
        s2 = list(document[i + 1])[: budget - len(s1)] if i + 1 < len(document) else []
        pairs.append((s1, s2))
    return pairs


def load_pairs(paths: Iterable[str | os.PathLike], vocab: Vocab, max_len: int) -> list[PackedInput]:
    out = []
    for path in paths:
        for doc in stream_documents(path, vocab):
            for s1, s2 in pair_segments(doc, max_len):
                if s1:
                    out.append(pack_pair(s1, s2, max_len, vocab))
    return out


def corpus_files(location: str | os.PathLike) -> list[str]:
    """A single file, or every ``*.txt`` file under a directory (sorted)."""
    location = os.fspath(location)
    if os.path.isdir(location):
        files = sorted(
            os.path.join(root, name)
            for root, _, names in os.walk(location)
            for name in names
            if name.endswith(".txt")
        )
        if not files:
            raise CorpusError(f"{location}: no .txt files")
        return files
    if not os.path.exists(location):
        raise FileNotFoundError(location)
    return [location]
