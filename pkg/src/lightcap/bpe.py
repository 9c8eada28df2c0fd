"""Byte-pair encoding: merge learning, subword encoding and vocabularies.

Words are split into characters plus a trailing ``</w>`` symbol before
merging. Encoded output uses the ``@@`` continuation convention: every
subword except the last one of a word ends in ``@@``, so decoding is a
plain join.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

EOW = "</w>"
CONT = "@@"

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

MERGES_HEADER = "#bpe-v1"


class BPEFormatError(ValueError):
    pass


@dataclass
class MergeTable:
    merges: list = field(default_factory=list)

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("duplicate merge pair")
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}

    def __len__(self):
        return len(self.merges)

    def save(self, path) -> None:
        lines = [f"{MERGES_HEADER} {len(self.merges)}"]
        lines += [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MergeTable":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith(MERGES_HEADER + " "):
            raise BPEFormatError(f"{path}: missing '{MERGES_HEADER} <n>' header")
        try:
            n = int(lines[0].split()[1])
        except (IndexError, ValueError):
            raise BPEFormatError(f"{path}: malformed header {lines[0]!r}") from None
        merges = []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split(" ")
            if len(parts) != 2 or not all(parts):
                raise BPEFormatError(f"{path}:{lineno}: expected 'left right', got {line!r}")
            merges.append((parts[0], parts[1]))
        if len(merges) != n:
            raise BPEFormatError(f"{path}: header announces {n} merges, found {len(merges)}")
        return cls(merges)


def _word_counts(corpus: Iterable[Sequence[str]]) -> Counter:
    counts = Counter()
    for sentence in corpus:
        if isinstance(sentence, str):
            sentence = sentence.split()
        counts.update(sentence)
    return counts


def _merge_symbols(symbols: tuple, pair: tuple) -> tuple:
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def learn_bpe(corpus: Sequence[Sequence[str]], n_merges: int, min_frequency: int = 2) -> MergeTable:
    """Greedily learn up to ``n_merges`` merges from a tokenized corpus.

    Sentences may be lists of words or whitespace-separated strings. At each
    step the most frequent adjacent pair is merged; ties go to the
    lexicographically smallest ``(left, right)``. Learning stops early once
    no pair occurs at least ``min_frequency`` times.
    """
    counts = _word_counts(corpus)
    if not counts:
        raise ValueError("cannot learn BPE from an empty corpus")
    if n_merges < 0:
        raise ValueError("n_merges must be non-negative")

    vocab = {tuple(w) + (EOW,): c for w, c in counts.items()}
    merges = []
    for _ in range(n_merges):
        pairs = Counter()
        for symbols, c in vocab.items():
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += c
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < min_frequency:
            break
        pair = best[0]
        merges.append(pair)
        new_vocab = {}
        for symbols, c in vocab.items():
            merged = _merge_symbols(symbols, pair)
            new_vocab[merged] = new_vocab.get(merged, 0) + c
        vocab = new_vocab
    return MergeTable(merges)


def encode_word(word: str, merges: MergeTable) -> list:
    symbols = tuple(word) + (EOW,)
    ranks = merges.ranks
    while len(symbols) > 1:
        candidates = [(ranks[p], p) for p in zip(symbols, symbols[1:]) if p in ranks]
        if not candidates:
            break
        _, pair = min(candidates)
        symbols = _merge_symbols(symbols, pair)
    symbols = list(symbols)
    if symbols[-1] == EOW:
        symbols.pop()
    else:
        symbols[-1] = symbols[-1][: -len(EOW)]
    return [s + CONT for s in symbols[:-1]] + symbols[-1:]


def encode(sentence, merges: MergeTable) -> list:
    """Subword tokens for a sentence (a list of words or a string)."""
    if isinstance(sentence, str):
        sentence = sentence.split()
    out = []
    for word in sentence:
        out.extend(encode_word(word, merges))
    return out


def decode(tokens: Sequence[str]) -> str:
    words = []
    current = ""
    for tok in tokens:
        if tok.endswith(CONT):
            current += tok[: -len(CONT)]
        else:
            words.append(current + tok)
            current = ""
    if current:
        words.append(current)
    return " ".join(words)


class Vocab:
    """Token/id bijection with the four reserved specials at ids 0..3."""

    def __init__(self, tokens: Iterable[str]):
        tokens = [t for t in tokens if t not in SPECIALS]
        self.itos = list(SPECIALS) + tokens
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary tokens must be unique")

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def __contains__(self, token):
        return token in self.stoi

    def lookup(self, tokens: Sequence[str]) -> list:
        return [self.stoi.get(t, UNK) for t in tokens]

    def tokens(self, ids: Iterable[int]) -> list:
        return [self.itos[int(i)] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(SPECIALS):]),
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(corpus_encoded: Sequence[Sequence[str]]) -> Vocab:
    if not corpus_encoded:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocab(sorted({t for seq in corpus_encoded for t in seq}))


class BPETokenizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` learns merges and vocabulary, ``transform``
    maps sentences to id arrays and ``inverse_transform`` maps them back."""

    def __init__(self, n_merges: int = 200, min_frequency: int = 2):
        self.n_merges = n_merges
        self.min_frequency = min_frequency

    def fit(self, X, y=None):
        sentences = [_normalize(s) for s in X]
        self.merges_ = learn_bpe(sentences, self.n_merges, self.min_frequency)
        self.vocab_ = build_vocab([encode(s, self.merges_) for s in sentences])
        return self

    @classmethod
    def from_files(cls, merges_path, vocab_path) -> "BPETokenizer":
        tok = cls()
        tok.merges_ = MergeTable.load(merges_path)
        tok.n_merges = len(tok.merges_)
        tok.vocab_ = Vocab.load(vocab_path)
        return tok

    def save(self, directory) -> None:
        check_is_fitted(self, "merges_")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.merges_.save(directory / "merges.txt")
        self.vocab_.save(directory / "vocab.txt")

    def encode(self, sentence: str) -> list:
        check_is_fitted(self, "merges_")
        return encode(_normalize(sentence), self.merges_)

    def transform(self, X):
        """Id sequences (without BOS/EOS) for each sentence in ``X``."""
        check_is_fitted(self, "vocab_")
        return [np.asarray(self.vocab_.lookup(self.encode(s)), dtype=np.int64) for s in X]

    def inverse_transform(self, X):
        check_is_fitted(self, "vocab_")
        out = []
        for ids in X:
            toks = [t for t in self.vocab_.tokens(ids) if t not in SPECIALS]
            out.append(decode(toks))
        return out


def _normalize(sentence: str) -> str:
    return " ".join(sentence.lower().split())
