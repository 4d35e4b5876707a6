"""Greedy READ/WRITE decoding over a live source stream."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .model import BOS, EOS, READ, WRITE, DST, decision_aggregate, make_batch


@dataclass
class StreamResult:
    tokens: list[int]                    # emitted ids, without </s>
    g: list[int]                         # source tokens read before each emitted token
    source_read: int                     # tokens consumed, including an appended </s>
    truncated: bool = False
    decisions: list[dict] = field(default_factory=list)


class _Source:
    def __init__(self, tokens: Iterable[int], append_eos: bool):
        self.it: Iterator[int] = iter(tokens)
        self.append_eos = append_eos
        self.exhausted = False
        self.raw_count = 0

    def next(self) -> int | None:
        if self.exhausted:
            return None
        try:
            tok = next(self.it)
        except StopIteration:
            self.exhausted = True
            return EOS if self.append_eos and self.raw_count else None
        self.raw_count += 1
        if tok == EOS:
            self.exhausted = True
        return tok


def translate_stream(model, source: Iterable[int], delta: float, max_len: int = 64,
                     append_eos: bool = True,
                     on_event: Callable[[dict], None] | None = None) -> StreamResult:
    """Simultaneous greedy decoding.

    The first action is always READ. Afterwards the pending target position is
    evaluated against the current source prefix: WRITE when a strict majority
    of decision layers have cumulative allocation above ``delta`` or once the
    source is exhausted, otherwise READ one more token. ``on_event`` sees every
    decision as it is made.
    """
    src = _Source(source, append_eos)
    state = model.new_stream()
    first = src.next()
    if first is None:
        raise ValueError("empty source")
    model.stream_source(state, first)
    tokens: list[int] = []
    g: list[int] = []
    decisions: list[dict] = []
    prev = BOS
    truncated = False

    def emit(event):
        decisions.append(event)
        if on_event:
            on_event(event)

    emit({"action": READ, "m": state.m, "token": int(first)})
    while True:
        if len(tokens) >= max_len:
            truncated = True
            break
        pending = model.stream_peek(state, prev)
        values = np.asarray(model.decision_values(pending))
        action = decision_aggregate(values, delta)
        if action == READ and not src.exhausted:
            tok = src.next()
            if tok is not None:
                model.stream_source(state, tok)
                emit({"action": READ, "m": state.m, "token": int(tok),
                      "cumulative": values.tolist()})
            continue
        if not src.exhausted:
            # write before exhaustion only on a strict majority
            assert 2 * int((values > delta).sum()) > values.size
        model.stream_commit(state, pending)
        out = int(np.argmax(pending.logits))
        emit({"action": WRITE, "m": state.m, "token": out, "cumulative": values.tolist()})
        if g:
            assert state.m >= g[-1]
        if out == EOS:
            break
        tokens.append(out)
        g.append(state.m)
        prev = out
    return StreamResult(tokens, g, state.m, truncated, decisions)


def replay_consistency(model: DST, x: Sequence[int], y: Sequence[int], g: Sequence[int]) -> float:
    """Max |logit difference| between streaming and batch passes under trace ``g``.

    ``x`` and ``y`` include the final ``</s>``; ``g[i]`` is the source bound of
    target row ``i``.
    """
    x, y, g = list(x), list(y), list(g)
    if len(g) != len(y):
        raise ValueError("trace length must equal target length")
    if any(b < a for a, b in zip(g, g[1:])) or g[0] < 1 or g[-1] > len(x):
        raise ValueError("invalid trace")
    with T.no_grad():
        out = model.forward(make_batch([(x, y)]), "ssa", np.asarray(g).reshape(1, -1))
    batch_logits = out.logits.data[0]
    state = model.new_stream()
    inputs = [BOS] + y[:-1]
    worst = 0.0
    for i, gi in enumerate(g):
        while state.m < gi:
            model.stream_source(state, x[state.m])
        logits, _ = model.forward_stream_step(state, inputs[i], "target")
        worst = max(worst, float(np.abs(logits - batch_logits[i]).max()))
    return worst
