"""Latency/quality sweeps over inference thresholds."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ParallelCorpus
from .inference import translate_stream
from .metrics import average_lagging, bleu, hallucination_rate


@dataclass
class EvalReport:
    delta_infer: float
    AL: float
    BLEU: float
    HR: float
    sentences: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model, corpus: ParallelCorpus, deltas: Sequence[float],
             max_len: int | None = None) -> list[EvalReport]:
    """Stream every source sentence at each threshold and score the outputs.

    HR is reported as 0.0 when the corpus carries no alignments.
    """
    vocab = model.config.vocab_size
    if corpus.vocab_size is not None and corpus.vocab_size > vocab:
        raise ValueError(f"corpus vocabulary ({corpus.vocab_size}) exceeds model ({vocab})")
    for s, t in corpus.pairs:
        if max(s) >= vocab or max(t) >= vocab:
            raise ValueError("corpus token id outside the model vocabulary")
    reports = []
    for delta in deltas:
        hyps, refs, als, hrs, sents = [], [], [], [], []
        for idx, (src, ref) in enumerate(corpus.pairs):
            limit = max_len or min(2 * len(src) + 10, model.config.max_target_len - 1)
            res = translate_stream(model, src, delta, max_len=limit)
            J = len(src)
            g = [min(x, J) for x in res.g]
            als.append(average_lagging(g, J, len(res.tokens)))
            if corpus.alignments is not None:
                hrs.append(hallucination_rate(len(res.tokens),
                                              corpus.hypothesis_alignment(idx, res.tokens)))
            hyps.append(res.tokens)
            refs.append(ref)
            sents.append({"g": g, "hyp": res.tokens, "J": J, "I": len(res.tokens)})
        reports.append(EvalReport(
            delta_infer=float(delta),
            AL=float(np.mean(als)),
            BLEU=bleu(hyps, refs),
            HR=float(np.mean(hrs)) if hrs else 0.0,
            sentences=sents,
        ))
    return reports


def write_reports(reports: Sequence[EvalReport], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=1))


def plot_curve(reports: Sequence[EvalReport], path: str | Path) -> None:
    """BLEU against AL, one point per threshold."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    als = [r.AL for r in reports]
    bleus = [r.BLEU for r in reports]
    ax.plot(als, bleus, marker="o")
    for r in reports:
        ax.annotate(f"{r.delta_infer:g}", (r.AL, r.BLEU), fontsize=7)
    ax.set_xlabel("AL")
    ax.set_ylabel("BLEU")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
