"""Corpus reading, subword vocabulary, tokenization and NSP pair sampling."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
RESERVED = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
N_RESERVED = len(RESERVED)
CONT = "##"

_PRETOKEN = re.compile(r"\w+|[^\w\s]")


class CorpusError(ValueError):
    pass


def pretokenize(text: str) -> list[str]:
    """Split on whitespace, then split punctuation into single-char tokens."""
    return _PRETOKEN.findall(text)


# ---------------------------------------------------------------------------
# corpus file
# ---------------------------------------------------------------------------

def read_corpus(path: str | Path) -> list[list[str]]:
    """Documents are separated by blank lines; each line is one sentence."""
    text = Path(path).read_text(encoding="utf-8")
    return parse_corpus(text)


def parse_corpus(text: str) -> list[list[str]]:
    docs, cur = [], []
    for line in text.splitlines():
        line = line.strip()
        if line:
            cur.append(line)
        elif cur:
            docs.append(cur)
            cur = []
    if cur:
        docs.append(cur)
    return docs


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:N_RESERVED]) != RESERVED:
            raise CorpusError("vocabulary must start with the reserved tokens")
        self.index = {}
        for i, tok in enumerate(self.tokens):
            if tok in self.index:
                raise CorpusError(f"duplicate vocabulary entry {tok!r}")
            self.index[tok] = i

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def id(self, tok: str) -> int:
        return self.index.get(tok, UNK_ID)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str], merged: str) -> tuple[str, ...]:
    out, i = [], 0
    while i < len(symbols):
        if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def _join(a: str, b: str) -> str:
    return a + b[len(CONT):]


def build_vocab(sentences: Iterable[str], target_size: int, min_freq: int = 1) -> Vocab:
    """Frequency-driven subword vocabulary.

    Words start as characters (non-initial characters carry ``##``). The
    alphabet enters the vocabulary in descending frequency, then the most
    frequent adjacent symbol pair is merged repeatedly until ``target_size``
    entries exist or no pair reaches ``min_freq``. Ties go to the
    lexicographically smallest candidate.
    """
    if target_size <= N_RESERVED:
        raise CorpusError(f"target_size must exceed {N_RESERVED}")
    word_freq: Counter[str] = Counter()
    for s in sentences:
        word_freq.update(pretokenize(s))
    if not word_freq:
        raise CorpusError("empty corpus")

    words = {w: tuple([w[0]] + [CONT + c for c in w[1:]]) for w in word_freq}
    sym_freq: Counter[str] = Counter()
    for w, f in word_freq.items():
        for s in words[w]:
            sym_freq[s] += f
    alphabet = sorted((s for s, f in sym_freq.items() if f >= min_freq), key=lambda s: (-sym_freq[s], s))
    tokens = list(RESERVED) + alphabet[: target_size - N_RESERVED]
    known = set(tokens)

    while len(tokens) < target_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for w, f in word_freq.items():
            syms = words[w]
            for a, b in zip(syms, syms[1:]):
                pairs[(a, b)] += f
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < min_freq:
            break
        pair = best[0]
        merged = _join(*pair)
        for w in words:
            if pair[0] in words[w]:
                words[w] = _merge_word(words[w], pair, merged)
        if merged not in known:
            tokens.append(merged)
            known.add(merged)
    return Vocab(tokens)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def _segment_word(word: str, vocab: Vocab) -> list[int]:
    ids, start = [], 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            piece = word[start:end] if start == 0 else CONT + word[start:end]
            if piece in vocab.index:
                found = vocab.index[piece]
                break
            end -= 1
        if found is None:
            ids.append(UNK_ID)
            start += 1
        else:
            ids.append(found)
            start = end
    return ids


def encode(text: str, vocab: Vocab) -> list[int]:
    """Greedy longest-match segmentation of each pre-token; no special tokens."""
    ids: list[int] = []
    for word in pretokenize(text):
        ids.extend(_segment_word(word, vocab))
    return ids


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    words: list[str] = []
    for i in ids:
        tok = vocab.tokens[int(i)]
        if tok.startswith(CONT) and words:
            words[-1] += tok[len(CONT):]
        else:
            words.append(tok)
    return " ".join(words)


def tokens_of(ids: Sequence[int], vocab: Vocab) -> list[str]:
    return [vocab.tokens[int(i)] for i in ids]


# ---------------------------------------------------------------------------
# sequences and NSP pairs
# ---------------------------------------------------------------------------

@dataclass
class TokenSequence:
    ids: list[int]
    segment_ids: list[int]

    def __len__(self) -> int:
        return len(self.ids)

    def validate(self, max_len: int | None = None) -> None:
        if len(self.ids) != len(self.segment_ids):
            raise CorpusError("ids and segment_ids differ in length")
        if not self.ids or self.ids[0] != CLS_ID or self.ids[-1] != SEP_ID:
            raise CorpusError("sequence must start with [CLS] and end with [SEP]")
        if MASK_ID in self.ids or PAD_ID in self.ids:
            raise CorpusError("sequence contains [MASK] or [PAD]")
        if any(s not in (0, 1) for s in self.segment_ids):
            raise CorpusError("segment ids must be 0 or 1")
        if max_len is not None and len(self.ids) > max_len:
            raise CorpusError("sequence longer than max_len")


def single_sequence(ids: Sequence[int], max_len: int) -> TokenSequence:
    """``[CLS] ids [SEP]``, truncating ``ids`` from the end to fit."""
    body = list(ids)[: max_len - 2]
    return TokenSequence([CLS_ID, *body, SEP_ID], [0] * (len(body) + 2))


def encode_corpus(docs: Sequence[Sequence[str]], vocab: Vocab) -> list[list[list[int]]]:
    """Encode every sentence, dropping sentences that encode to nothing."""
    out = []
    for doc in docs:
        enc = [ids for ids in (encode(s, vocab) for s in doc) if ids]
        if enc:
            out.append(enc)
    return out


def make_nsp_pair(docs: Sequence[Sequence[Sequence[int]]], rng: np.random.Generator, max_len: int,
                  max_tries: int = 100) -> tuple[TokenSequence, bool]:
    """Sample ``[CLS] A [SEP] B [SEP]`` and whether B follows A.

    ``docs`` are lists of encoded sentences. Documents with fewer than two
    sentences are skipped by resampling.
    """
    if max_len < 5:
        raise CorpusError("max_len must leave room for two segments and three specials")
    if len(docs) < 2:
        raise CorpusError("need at least two documents")
    for _ in range(max_tries):
        d = int(rng.integers(len(docs)))
        doc = docs[d]
        if len(doc) < 2:
            continue
        i = int(rng.integers(len(doc) - 1))
        a = list(doc[i])
        if rng.random() < 0.5:
            b, is_next = list(doc[i + 1]), True
        else:
            other = int(rng.integers(len(docs) - 1))
            other += other >= d
            odoc = docs[other]
            b, is_next = list(odoc[int(rng.integers(len(odoc)))]), False
        budget = max_len - 3
        while len(a) + len(b) > budget:
            if len(a) >= len(b):
                a.pop()
            else:
                b.pop()
        ids = [CLS_ID, *a, SEP_ID, *b, SEP_ID]
        segs = [0] * (len(a) + 2) + [1] * (len(b) + 1)
        return TokenSequence(ids, segs), is_next
    raise CorpusError(f"no usable document found after {max_tries} draws")
