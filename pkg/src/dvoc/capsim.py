"""Caption similarity scoring on consensus-weighted n-gram statistics.

The score follows the classic consensus captioning recipe: clipped
term-frequency vectors weighted by corpus idf, cosine-compared per
n-gram order 1..4, averaged over orders and references, damped by a
Gaussian length penalty. The raw score lives on the usual 0..10 scale;
similarity() maps it into [0, 1] for use as a metric term.

Scores are corpus-relative: a candidate identical to its reference earns
the maximal score for that corpus, which is below 1.0 whenever shared
n-grams carry zero idf.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import InputError

MAX_NGRAM = 4
DEFAULT_SIGMA = 6.0

_TOKEN_RUN = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase tokens split on runs of non-alphanumeric characters."""
    return _TOKEN_RUN.findall(text.lower())


def ngram_counts(tokens: Sequence[str], max_n: int = MAX_NGRAM) -> Counter:
    """Counts of all n-grams of order 1..max_n, keyed by token tuple."""
    counts: Counter = Counter()
    for n in range(1, max_n + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i:i + n])] += 1
    return counts


@dataclass
class NgramStats:
    """Document frequencies over a reference corpus.

    doc_freq counts, per n-gram, the number of corpus sentences that
    contain it at least once; corpus_size is the sentence count.
    """

    corpus_size: int
    doc_freq: dict[tuple[str, ...], int] = field(default_factory=dict)

    def idf(self, ngram: tuple[str, ...]) -> float:
        return math.log(self.corpus_size) - math.log(max(1.0, self.doc_freq.get(ngram, 0)))


def build_stats(corpus: Iterable[str]) -> NgramStats:
    """Collect document frequencies from an iterable of raw sentences."""
    doc_freq: dict[tuple[str, ...], int] = {}
    size = 0
    for sentence in corpus:
        size += 1
        for gram in set(ngram_counts(tokenize(sentence))):
            doc_freq[gram] = doc_freq.get(gram, 0) + 1
    if size == 0:
        raise InputError("reference corpus is empty")
    return NgramStats(corpus_size=size, doc_freq=doc_freq)


def _tfidf_vector(counts: Counter, stats: NgramStats):
    """Per-order tf-idf maps plus their norms and the unigram length."""
    vecs: list[dict] = [{} for _ in range(MAX_NGRAM)]
    norms = [0.0] * MAX_NGRAM
    length = 0
    for gram, count in counts.items():
        weight = count * stats.idf(gram)
        order = len(gram) - 1
        vecs[order][gram] = weight
        norms[order] += weight * weight
        if order == 0:
            length += count
    return vecs, [math.sqrt(v) for v in norms], length


def _pair_score(cand, ref, sigma: float) -> float:
    """Mean over n-gram orders of the clipped cosine, length-damped."""
    cand_vecs, cand_norms, cand_len = cand
    ref_vecs, ref_norms, ref_len = ref
    delta = float(cand_len - ref_len)
    penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
    total = 0.0
    for order in range(MAX_NGRAM):
        num = 0.0
        rvec = ref_vecs[order]
        # Candidate counts are clipped at the reference count, then each
        # matched term is weighted by the reference side.
        for gram, weight in cand_vecs[order].items():
            other = rvec.get(gram)
            if other is not None:
                num += min(weight, other) * other
        if num and cand_norms[order] and ref_norms[order]:
            total += num / (cand_norms[order] * ref_norms[order]) * penalty
    return total / MAX_NGRAM


def cider_score(candidate: str, references: Sequence[str], stats: NgramStats,
                sigma: float = DEFAULT_SIGMA) -> float:
    """Raw consensus score on the 0..10 scale, averaged over references."""
    if not references:
        raise InputError("no references to score against")
    cand = _tfidf_vector(ngram_counts(tokenize(candidate)), stats)
    total = 0.0
    for reference in references:
        ref = _tfidf_vector(ngram_counts(tokenize(reference)), stats)
        total += _pair_score(cand, ref, sigma)
    return 10.0 * total / len(references)


def similarity(candidate: str, references: Sequence[str], stats: NgramStats,
               sigma: float = DEFAULT_SIGMA) -> float:
    """Caption similarity in [0, 1]: the raw score rescaled and clipped."""
    return min(1.0, max(0.0, cider_score(candidate, references, stats, sigma) / 10.0))


class CiderBackend:
    """Callable similarity backend bound to a fixed reference corpus."""

    name = "cider"

    def __init__(self, corpus: Iterable[str], sigma: float = DEFAULT_SIGMA):
        self.stats = build_stats(corpus)
        self.sigma = sigma
        self._vectors: dict[str, tuple] = {}

    def _vector(self, text: str):
        cached = self._vectors.get(text)
        if cached is None:
            cached = _tfidf_vector(ngram_counts(tokenize(text)), self.stats)
            self._vectors[text] = cached
        return cached

    def score(self, candidate: str, references: Sequence[str]) -> float:
        if not references:
            raise InputError("no references to score against")
        cand = self._vector(candidate)
        total = sum(_pair_score(cand, self._vector(r), self.sigma) for r in references)
        return min(1.0, max(0.0, total / len(references)))
