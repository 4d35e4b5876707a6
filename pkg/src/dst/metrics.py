"""Latency, quality and hallucination metrics."""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Sequence


def average_lagging(g: Sequence[int], J: int, I: int | None = None) -> float:
    """Average Lagging of a read trace.

    ``g[i-1]`` is the number of source tokens read before target token ``i``
    (values above ``J`` are clipped to ``J``). The sum runs up to the first
    token emitted with the whole source read, or to ``I`` if that never
    happens.
    """
    if J < 1:
        raise ValueError("source length must be positive")
    I = len(g) if I is None else I
    if I == 0 or len(g) == 0:
        return 0.0
    gamma = J / I
    total, tau = 0.0, 0
    for i, gi in enumerate(g[:I], start=1):
        gi = min(gi, J)
        total += gi - (i - 1) * gamma
        tau = i
        if gi == J:
            break
    return total / tau


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[k:k + n]) for k in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU on pre-tokenised sentences, uniform weights, no smoothing.

    Orders with no hypothesis n-grams at all in the corpus are left out of
    the geometric mean; any order with zero matches gives 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference counts differ")
    if not hypotheses:
        raise ValueError("empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    logs = []
    for m, t in zip(matches, totals):
        if t == 0:
            continue
        if m == 0:
            return 0.0
        logs.append(math.log(m / t))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(sum(logs) / len(logs))


def hallucination_rate(hyp_len: int, alignment: Iterable[tuple[int, int]]) -> float:
    """Share of the ``hyp_len`` target positions with no aligned source token."""
    if hyp_len <= 0:
        return 0.0
    aligned = {i for _, i in alignment if 1 <= i <= hyp_len}
    return (hyp_len - len(aligned)) / hyp_len
