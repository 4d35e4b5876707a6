from dataclasses import dataclass, field

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dst.data import COPY, generate_task
from dst.evaluate import evaluate, plot_curve, write_reports
from dst.inference import replay_consistency, translate_stream
from dst.model import DST, EOS, READ, WRITE, ModelConfig, make_batch


@dataclass
class _State:
    m: int = 0
    n_target: int = 0


@dataclass
class _Pending:
    logits: np.ndarray
    cumulative: np.ndarray
    m: int
    position: int


@dataclass
class ScriptedModel:
    """Allocation rows and outputs fixed in advance, one matrix per decision layer."""

    p: list                      # per layer, [I, J]
    outputs: list                # token emitted at each target step
    vocab: int = 16
    peeks: list = field(default_factory=list)

    def new_stream(self):
        return _State()

    def stream_source(self, state, token):
        state.m += 1

    def stream_peek(self, state, token):
        i = state.n_target
        logits = np.zeros(self.vocab)
        logits[self.outputs[i]] = 1.0
        cum = np.array([float(np.sum(layer[i][: state.m])) for layer in self.p])
        self.peeks.append((i, state.m))
        return _Pending(logits, cum, state.m, i)

    def stream_commit(self, state, pending):
        assert pending.m == state.m
        state.n_target += 1

    def decision_values(self, pending):
        return pending.cumulative


def hand_policy(p, delta, J, I):
    """Majority rule evaluated by hand: read until most layers clear ``delta``."""
    g, m = [], 1
    for i in range(I):
        while m < J:
            votes = sum(float(np.sum(layer[i][:m])) > delta for layer in p)
            if 2 * votes > len(p):
                break
            m += 1
        g.append(m)
    return g


def test_scripted_example():
    a = [[0.6, 0.1, 0.1, 0.1], [0.1, 0.2, 0.3, 0.3], [0.1, 0.1, 0.1, 0.1], [0.3, 0.3, 0.3, 0.1]]
    b = [[0.2, 0.5, 0.1, 0.1], [0.1, 0.3, 0.3, 0.2], [0.9, 0.0, 0.0, 0.0], [0.3, 0.3, 0.3, 0.1]]
    model = ScriptedModel([a, b], outputs=[7, 8, 9, EOS])
    res = translate_stream(model, [4, 5, 6], delta=0.5)
    assert res.tokens == [7, 8, 9]
    assert res.g == [2, 3, 4]
    assert res.source_read == 4
    assert res.decisions[0]["action"] == READ
    assert [d["action"] for d in res.decisions].count(WRITE) == 4


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.floats(0.05, 0.95))
def test_scripted_policy_matches_hand_simulation(seed, layers, delta):
    rng = np.random.default_rng(seed)
    J, I = int(rng.integers(2, 9)), int(rng.integers(1, 9))
    p = [rng.uniform(0, 2.0 / J, size=(I + 1, J)) for _ in range(layers)]
    outputs = [int(t) for t in rng.integers(4, 16, size=I)] + [EOS]
    res = translate_stream(ScriptedModel(p, outputs), list(range(4, 4 + J - 1)), delta)
    assert res.g == hand_policy(p, delta, J, I)
    assert res.tokens == outputs[:-1]


def test_zero_threshold_writes_after_first_read():
    p = [np.full((6, 5), 0.01)] * 2
    res = translate_stream(ScriptedModel(p, [4, 5, 6, 7, 8, EOS]), [4, 5, 6, 7], delta=0.0)
    assert res.g == [1] * 5
    assert res.source_read == 1


def test_unreachable_threshold_reads_whole_source():
    p = [np.full((6, 5), 0.1)] * 3
    res = translate_stream(ScriptedModel(p, [4, 5, 6, 7, 8, EOS]), [4, 5, 6, 7], delta=0.99)
    assert res.g == [5] * 5


def test_majority_needs_strictly_more_than_half():
    hi, lo = np.full((2, 3), 0.5), np.full((2, 3), 0.0)
    res = translate_stream(ScriptedModel([hi, lo], [4, EOS]), [4, 5], delta=0.3)
    assert res.g == [3]
    res = translate_stream(ScriptedModel([hi, hi, lo], [4, EOS]), [4, 5], delta=0.3)
    assert res.g == [1]


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_raising_threshold_never_reads_less(seed, d1, d2):
    rng = np.random.default_rng(seed)
    J, I = int(rng.integers(2, 9)), int(rng.integers(1, 9))
    p = [rng.uniform(0, 2.0 / J, size=(I + 1, J)) for _ in range(2)]
    outputs = [4] * I + [EOS]
    lo, hi = sorted((d1, d2))
    g_lo = translate_stream(ScriptedModel(p, outputs), [4] * (J - 1), lo).g
    g_hi = translate_stream(ScriptedModel(p, outputs), [4] * (J - 1), hi).g
    assert all(b >= a for a, b in zip(g_lo, g_hi))


def test_truncation_and_errors():
    p = [np.full((10, 3), 0.9)]
    res = translate_stream(ScriptedModel(p, [4] * 10), [4, 5], delta=0.5, max_len=4)
    assert res.truncated and len(res.tokens) == 4
    with pytest.raises(ValueError):
        translate_stream(ScriptedModel(p, [4]), [], delta=0.5)


def test_events_reach_callback():
    p = [np.full((3, 3), 0.3)]
    seen = []
    translate_stream(ScriptedModel(p, [4, 5, EOS]), [4, 5], delta=0.5, on_event=seen.append)
    assert seen[0]["action"] == READ and seen[-1]["action"] == WRITE and seen[-1]["token"] == EOS


# ---------------------------------------------------------------- real model

def _model(**kw):
    return DST(ModelConfig(vocab_size=14, model_dim=16, ffn_dim=32, layers=3, decision_layers=2,
                           seed=4, **kw))


def test_full_sentence_first_token_matches_batch():
    model = _model()
    x = [5, 6, 7, 8, EOS]
    res = translate_stream(model, x[:-1], delta=1e9, max_len=3)
    assert res.g[0] == len(x)
    out = model.forward(make_batch([(x, [res.tokens[0]])]), "ssa")
    assert int(np.argmax(out.logits.data[0, 0])) == res.tokens[0]


def test_replay_consistency_on_real_traces():
    model = _model()
    rng = np.random.default_rng(0)
    for _ in range(5):
        J, I = int(rng.integers(2, 8)), int(rng.integers(1, 8))
        x = [int(t) for t in rng.integers(4, 14, size=J - 1)] + [EOS]
        y = [int(t) for t in rng.integers(4, 14, size=I - 1)] + [EOS]
        g = np.sort(rng.integers(1, J + 1, size=I)).tolist()
        assert replay_consistency(model, x, y, g) < 1e-9
    with pytest.raises(ValueError):
        replay_consistency(model, [4, EOS], [4, EOS], [2, 1])


def test_evaluate_smoke_and_determinism(tmp_path):
    model = _model()
    corpus = generate_task(COPY, 10, (3, 6), 6, seed=1)
    a = evaluate(model, corpus, [0.3, 0.9])
    b = evaluate(model, corpus, [0.3, 0.9])
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    for r in a:
        assert 0 <= r.BLEU <= 100 and 0 <= r.HR <= 1 and len(r.sentences) == 6
        for s in r.sentences:
            assert len(s["g"]) == s["I"] and all(1 <= v <= s["J"] for v in s["g"])
    write_reports(a, tmp_path / "r.json")
    assert (tmp_path / "r.json").stat().st_size > 0
    pytest.importorskip("matplotlib")
    plot_curve(a, tmp_path / "r.png")
    assert (tmp_path / "r.png").stat().st_size > 0


def test_evaluate_rejects_vocab_mismatch():
    corpus = generate_task(COPY, 30, (3, 6), 2, seed=1)
    with pytest.raises(ValueError):
        evaluate(_model(), corpus, [0.5])
