import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from nltk.translate.bleu_score import corpus_bleu

from dst.data import (COPY, DELAYED_COPY, LOCAL_REORDER, ParallelCorpus, Vocabulary, generate_task,
                      read_parallel, write_parallel)
from dst.metrics import average_lagging, bleu, hallucination_rate
from dst.model import EOS


# ---------------------------------------------------------------- average lagging

def test_al_examples():
    assert average_lagging([1, 2, 3, 4, 5], 5) == pytest.approx(1.0)
    assert average_lagging([5, 5, 5, 5, 5], 5) == pytest.approx(5.0)
    for n in (1, 3, 10, 40):
        assert average_lagging(list(range(1, n + 1)), n) == pytest.approx(1.0)


def test_al_wait_k_and_cutoff():
    # wait-3 on J=I=6: g = 3,4,5,6,6,6; tau = 4
    g = [min(i + 2, 6) for i in range(1, 7)]
    assert average_lagging(g, 6) == pytest.approx((3 + 3 + 3 + 3) / 4)
    # unequal lengths scale the diagonal by J / I
    assert average_lagging([2, 4], 4, 2) == pytest.approx((2 + (4 - 2)) / 2)
    # reads beyond J are clipped
    assert average_lagging([9], 4) == pytest.approx(4.0)
    assert average_lagging([], 4) == 0.0
    with pytest.raises(ValueError):
        average_lagging([1], 0)


# ---------------------------------------------------------------- BLEU

FIXTURE_HYP = [
    "the cat sat on the mat today".split(),
    "a quick brown fox jumps over the lazy dog".split(),
    "there is a book on the table".split(),
]
FIXTURE_REF = [
    "the cat sat on the mat".split(),
    "the quick brown fox jumped over the lazy dog".split(),
    "there is a red book on the table".split(),
]


def test_bleu_matches_reference_implementation():
    ref = 100 * corpus_bleu([[r] for r in FIXTURE_REF], FIXTURE_HYP)
    assert bleu(FIXTURE_HYP, FIXTURE_REF) == pytest.approx(ref, abs=0.1)


@pytest.mark.filterwarnings("ignore::UserWarning")
@given(st.lists(st.lists(st.integers(0, 6), min_size=4, max_size=12), min_size=1, max_size=6),
       st.integers(0, 2**32 - 1))
def test_bleu_agrees_with_nltk_on_random_corpora(refs, seed):
    rng = np.random.default_rng(seed)
    hyps = []
    for r in refs:
        h = list(r)
        for _ in range(rng.integers(0, 3)):
            h[rng.integers(len(h))] = int(rng.integers(0, 6))
        hyps.append(h)
    # every hypothesis has 4-grams, so both conventions for empty orders agree
    theirs = 100 * corpus_bleu([[r] for r in refs], hyps)
    assert bleu(hyps, refs) == pytest.approx(theirs, abs=0.1)


def test_bleu_examples():
    assert bleu(FIXTURE_REF, FIXTURE_REF) == pytest.approx(100.0)
    assert bleu([[1, 2, 3, 4]], [[5, 6, 7, 8]]) == 0.0
    assert bleu([[]], [[1, 2]]) == 0.0
    # short hypothesis pays the brevity penalty
    assert bleu([[1, 2, 3, 4]], [[1, 2, 3, 4, 5, 6, 7, 8]]) == pytest.approx(100 * math.exp(-1))
    with pytest.raises(ValueError):
        bleu([], [])
    with pytest.raises(ValueError):
        bleu([[1]], [[1], [2]])


# ---------------------------------------------------------------- hallucination rate

def test_hr_examples():
    assert hallucination_rate(5, {(k, k) for k in range(1, 6)}) == 0.0
    assert hallucination_rate(5, {(k, k) for k in range(1, 5)}) == pytest.approx(0.2)
    assert hallucination_rate(5, set()) == 1.0
    assert hallucination_rate(0, set()) == 0.0


@given(st.integers(1, 12), st.data())
def test_hr_invariant_to_source_permutation(n, data):
    links = data.draw(st.sets(st.tuples(st.integers(1, 12), st.integers(1, n))))
    perm = data.draw(st.permutations(range(1, 13)))
    moved = {(perm[j - 1], i) for j, i in links}
    assert hallucination_rate(n, links) == hallucination_rate(n, moved)


def test_hypothesis_alignment_drops_wrong_tokens():
    corpus = generate_task(COPY, 10, (5, 5), 1, seed=0)
    src = corpus.pairs[0][0]
    hyp = list(src)
    hyp[2] = src[2] + 1 if src[2] + 1 < 14 else 4
    links = corpus.hypothesis_alignment(0, hyp)
    assert hallucination_rate(len(hyp), links) == pytest.approx(0.2)
    assert hallucination_rate(3, corpus.hypothesis_alignment(0, src[:3])) == 0.0


# ---------------------------------------------------------------- synthetic tasks

def test_generate_task_examples():
    c = generate_task(COPY, 10, (5, 5), 3, seed=1)
    assert c.alignments[0] == {(k, k) for k in range(1, 6)}
    assert all(s == t for s, t in c.pairs)
    d = generate_task(DELAYED_COPY, 10, (5, 5), 3, seed=1, k=2)
    s, t = d.pairs[0]
    assert t == s[2:] and (3, 1) in d.alignments[0]
    r = generate_task(LOCAL_REORDER, 10, (5, 5), 1, seed=1, w=2)
    s, t = r.pairs[0]
    assert t == [s[2], s[3], s[0], s[1], s[4]]
    assert generate_task(COPY, 10, (3, 9), 20, seed=4).pairs == generate_task(COPY, 10, (3, 9), 20, seed=4).pairs


@pytest.mark.parametrize("kind", [COPY, DELAYED_COPY, LOCAL_REORDER])
def test_generate_task_alignment_is_consistent(kind):
    c = generate_task(kind, 12, (4, 11), 50, seed=2, k=3, w=3)
    for (s, t), links in zip(c.pairs, c.alignments):
        assert len(links) == len(t)
        assert {i for _, i in links} == set(range(1, len(t) + 1))
        assert all(t[i - 1] == s[j - 1] for j, i in links)
        assert 4 <= min(s) and max(s) < 16


def test_generate_task_rejects_bad_ranges():
    with pytest.raises(ValueError):
        generate_task("reverse", 10, (3, 5), 1, seed=0)
    with pytest.raises(ValueError):
        generate_task(DELAYED_COPY, 10, (3, 5), 1, seed=0, k=3)
    with pytest.raises(ValueError):
        generate_task(COPY, 10, (5, 3), 1, seed=0)


def test_corpus_helpers():
    c = generate_task(COPY, 10, (3, 6), 10, seed=3)
    tp = c.training_pairs()
    assert all(s[-1] == EOS and t[-1] == EOS for s, t in tp)
    assert len(c.subset(2, 5)) == 3
    with pytest.raises(ValueError):
        ParallelCorpus([([4], [])])
    with pytest.raises(ValueError):
        ParallelCorpus([([4], [99])], vocab_size=10)


def test_vocabulary_and_file_round_trip(tmp_path):
    v = Vocabulary.synthetic(10)
    assert len(v) == 14 and v.decode(v.encode(["w3", "zz"])) == ["w3", "<unk>"]
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt").tokens == v.tokens
    c = generate_task(LOCAL_REORDER, 10, (3, 7), 8, seed=5)
    paths = [tmp_path / n for n in ("a.src", "a.tgt", "a.align")]
    write_parallel(c, v, *paths)
    back = read_parallel(*paths[:2], v, paths[2])
    assert back.pairs == c.pairs and back.alignments == c.alignments
    with pytest.raises(ValueError):
        Vocabulary(["<pad>", "<s>", "</s>", "<unk>", "a", "a"])
