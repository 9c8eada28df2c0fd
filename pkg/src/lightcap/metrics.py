"""BLEU-4 and CIDEr-D caption scorers.

Sentences are lowercased and split on whitespace before scoring. CIDEr-D is
reported on its standard 0-10 scale.
"""
from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

MAX_N = 4


def tokenize(sentence) -> list:
    if isinstance(sentence, str):
        return sentence.lower().split()
    return [w.lower() for w in sentence]


def ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def _check_pairs(candidates, references):
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    for refs in references:
        if not refs:
            raise ValueError("every reference set must be non-empty")


def _bleu_stats(cand: list, refs: list):
    """Clipped matches and totals per order, candidate and closest reference length."""
    matches, totals = [0] * MAX_N, [0] * MAX_N
    for n in range(1, MAX_N + 1):
        c = ngrams(cand, n)
        max_ref = Counter()
        for r in refs:
            for g, k in ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], k)
        matches[n - 1] = sum(min(k, max_ref[g]) for g, k in c.items())
        totals[n - 1] = max(len(cand) - n + 1, 0)
    # closest reference length, ties to the shorter one
    ref_len = min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
    return matches, totals, len(cand), ref_len


def _combine(matches, totals, cand_len, ref_len, smooth: bool) -> float:
    log_p = 0.0
    for n in range(MAX_N):
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t)
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p / MAX_N)


def bleu4(candidates, references) -> float:
    """Corpus-level BLEU-4 without smoothing.

    An n-gram order with no candidate n-grams anywhere in the corpus has
    zero precision, which makes the score 0.
    """
    _check_pairs(candidates, references)
    matches, totals = [0] * MAX_N, [0] * MAX_N
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        m, t, c, r = _bleu_stats(tokenize(cand), [tokenize(x) for x in refs])
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        cand_len += c
        ref_len += r
    return _combine(matches, totals, cand_len, ref_len, smooth=False)


def sentence_bleu4(candidate, references) -> float:
    """Sentence-level BLEU-4 with add-one smoothing on orders 2-4."""
    if not references:
        raise ValueError("every reference set must be non-empty")
    m, t, c, r = _bleu_stats(tokenize(candidate), [tokenize(x) for x in references])
    return _combine(m, t, c, r, smooth=True)


class CiderD:
    """CIDEr-D with document frequencies taken from a reference corpus.

    Each image's reference set counts as one document. Candidate n-gram
    weights are clipped to the reference weights and each cosine is damped
    by a Gaussian penalty on the length difference.
    """

    def __init__(self, references, sigma: float = 6.0):
        self.sigma = sigma
        self.doc_freq = Counter()
        for refs in references:
            seen = set()
            for r in refs:
                words = tokenize(r)
                for n in range(1, MAX_N + 1):
                    seen.update(ngrams(words, n))
            self.doc_freq.update(seen)
        self.n_docs = len(references)
        if self.n_docs == 0 or not self.doc_freq:
            raise ValueError("CIDEr-D needs a non-empty reference corpus for IDF")
        self.log_n_docs = math.log(float(self.n_docs))
        self._ref_cache = {}

    def _vector(self, words):
        vecs, norms = [], []
        for n in range(1, MAX_N + 1):
            v = {g: tf * (self.log_n_docs - math.log(max(1.0, self.doc_freq[g])))
                 for g, tf in ngrams(words, n).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms

    def _sim(self, cvec, cnorm, clen, rvec, rnorm, rlen):
        delta = float(clen - rlen)
        penalty = math.exp(-(delta ** 2) / (2 * self.sigma ** 2))
        sims = []
        for n in range(MAX_N):
            val = sum(min(w, rvec[n][g]) * rvec[n][g] for g, w in cvec[n].items() if g in rvec[n])
            if cnorm[n] != 0 and rnorm[n] != 0:
                val /= cnorm[n] * rnorm[n]
            else:
                val = 0.0
            sims.append(val * penalty)
        return sims

    def sentence_score(self, candidate, references) -> float:
        if not references:
            raise ValueError("every reference set must be non-empty")
        cand = tokenize(candidate)
        if not cand:
            return 0.0
        cvec, cnorm = self._vector(cand)
        total = 0.0
        for r in references:
            key = r if isinstance(r, str) else " ".join(r)
            if key not in self._ref_cache:
                words = tokenize(r)
                self._ref_cache[key] = (len(words),) + self._vector(words)
            rlen, rvec, rnorm = self._ref_cache[key]
            total += sum(self._sim(cvec, cnorm, len(cand), rvec, rnorm, rlen)) / MAX_N
        return 10.0 * total / len(references)

    def corpus_score(self, candidates, references) -> float:
        _check_pairs(candidates, references)
        if not candidates:
            return 0.0
        return sum(self.sentence_score(c, r) for c, r in zip(candidates, references)) / len(candidates)


def cider_d(candidates, references, corpus_idf: CiderD | None = None, sigma: float = 6.0) -> float:
    """Corpus CIDEr-D; the IDF table defaults to the given references."""
    _check_pairs(candidates, references)
    scorer = corpus_idf if corpus_idf is not None else CiderD(references, sigma=sigma)
    return scorer.corpus_score(candidates, references)
