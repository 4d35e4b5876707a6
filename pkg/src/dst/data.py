"""Vocabulary, parallel corpora and synthetic tasks with known alignments."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import EOS, SPECIALS, UNK

COPY = "copy"
DELAYED_COPY = "delayed_copy"
LOCAL_REORDER = "local_reorder"
TASKS = (COPY, DELAYED_COPY, LOCAL_REORDER)


class Vocabulary:
    """Token <-> id map; ids 0..3 are ``<pad> <s> </s> <unk>``."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[: len(SPECIALS)] != list(SPECIALS):
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def synthetic(cls, n: int) -> "Vocabulary":
        return cls([f"w{k}" for k in range(n)])

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])


@dataclass
class ParallelCorpus:
    """Sentence pairs of token ids (no ``</s>``) with optional alignments.

    Alignments are sets of 1-based ``(j, i)``: source ``j`` feeds target ``i``.
    """

    pairs: list[tuple[list[int], list[int]]]
    alignments: list[set[tuple[int, int]]] | None = None
    vocab_size: int | None = None
    kind: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for s, t in self.pairs:
            if not s or not t:
                raise ValueError("empty sentence in corpus")
            if self.vocab_size is not None and max(max(s), max(t)) >= self.vocab_size:
                raise ValueError("token id outside vocabulary")
        if self.alignments is not None and len(self.alignments) != len(self.pairs):
            raise ValueError("one alignment set per pair required")

    def __len__(self) -> int:
        return len(self.pairs)

    def training_pairs(self) -> list[tuple[list[int], list[int]]]:
        """Pairs with ``</s>`` appended to both sides."""
        return [(list(s) + [EOS], list(t) + [EOS]) for s, t in self.pairs]

    def subset(self, start: int, stop: int) -> "ParallelCorpus":
        al = None if self.alignments is None else self.alignments[start:stop]
        return ParallelCorpus(self.pairs[start:stop], al, self.vocab_size, self.kind, dict(self.meta))

    def hypothesis_alignment(self, index: int, hyp: Sequence[int]) -> set[tuple[int, int]]:
        """Reference links that the hypothesis actually realises.

        Hypothesis token ``i`` keeps link ``(j, i)`` only if it equals source
        token ``j``; anything else is unsupported by the source.
        """
        if self.alignments is None:
            raise ValueError("corpus carries no alignments")
        src = self.pairs[index][0]
        return {(j, i) for j, i in self.alignments[index]
                if i <= len(hyp) and hyp[i - 1] == src[j - 1]}


def generate_task(kind: str, vocab: int, length: tuple[int, int], count: int, seed: int,
                  k: int = 3, w: int = 2) -> ParallelCorpus:
    """Synthetic pairs over ``vocab`` content tokens (ids ``4..4+vocab-1``).

    ``copy``: target equals source. ``delayed_copy``: target token ``i`` is
    source token ``i + k``, so the target is ``k`` tokens shorter.
    ``local_reorder``: consecutive blocks of width ``w`` are swapped pairwise.
    """
    lo, hi = length
    if kind not in TASKS:
        raise ValueError(f"unknown task {kind!r}")
    if not 1 <= lo <= hi or vocab < 1 or count < 0:
        raise ValueError("invalid task ranges")
    if kind == DELAYED_COPY and lo <= k:
        raise ValueError("delayed_copy needs source length > k")
    if kind == LOCAL_REORDER and w < 1:
        raise ValueError("block width must be positive")
    rng = np.random.default_rng(seed)
    offset = len(SPECIALS)
    pairs, aligns = [], []
    for _ in range(count):
        J = int(rng.integers(lo, hi + 1))
        src = [int(t) + offset for t in rng.integers(0, vocab, size=J)]
        if kind == COPY:
            order = list(range(J))
        elif kind == DELAYED_COPY:
            order = list(range(k, J))
        else:
            blocks = [list(range(s, min(s + w, J))) for s in range(0, J, w)]
            for b in range(0, len(blocks) - 1, 2):
                blocks[b], blocks[b + 1] = blocks[b + 1], blocks[b]
            order = [j for blk in blocks for j in blk]
        tgt = [src[j] for j in order]
        pairs.append((src, tgt))
        aligns.append({(j + 1, i + 1) for i, j in enumerate(order)})
    meta = {"k": k} if kind == DELAYED_COPY else {"w": w} if kind == LOCAL_REORDER else {}
    return ParallelCorpus(pairs, aligns, vocab + offset, kind, meta)


def read_parallel(src_path: str | Path, tgt_path: str | Path, vocab: Vocabulary,
                  align_path: str | Path | None = None) -> ParallelCorpus:
    """Two line-aligned whitespace-tokenised files (plus optional ``j-i`` alignments)."""
    src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ValueError("source and target files differ in line count")
    pairs = [(vocab.encode(s.split()), vocab.encode(t.split()))
             for s, t in zip(src_lines, tgt_lines)]
    aligns = None
    if align_path is not None:
        aligns = []
        for line in Path(align_path).read_text(encoding="utf-8").splitlines():
            links = set()
            for tok in line.split():
                j, i = tok.split("-")
                links.add((int(j), int(i)))
            aligns.append(links)
    return ParallelCorpus(pairs, aligns, len(vocab))


def write_parallel(corpus: ParallelCorpus, vocab: Vocabulary, src_path: str | Path,
                   tgt_path: str | Path, align_path: str | Path | None = None) -> None:
    Path(src_path).write_text("".join(" ".join(vocab.decode(s)) + "\n" for s, _ in corpus.pairs),
                              encoding="utf-8")
    Path(tgt_path).write_text("".join(" ".join(vocab.decode(t)) + "\n" for _, t in corpus.pairs),
                              encoding="utf-8")
    if align_path is not None and corpus.alignments is not None:
        Path(align_path).write_text(
            "".join(" ".join(f"{j}-{i}" for j, i in sorted(a)) + "\n" for a in corpus.alignments),
            encoding="utf-8")
